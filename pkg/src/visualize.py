"""
Error heatmaps and spectral response curves.
"""

import csv
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from data_synth_io import SpectralCube
from hprn_errors import ContractError, DimensionError
from metrics_suite import MRAE_EPS

HEATMAP_CMAP = "jet"
CURVE_COLUMNS = ["point", "y", "x", "wavelength_nm", "value", "reference"]


def error_map(pred: SpectralCube, gt: SpectralCube, band: Optional[int] = None) -> np.ndarray:
    """Per-pixel MRAE over all bands, or the absolute error of one band."""
    if pred.values.shape != gt.values.shape:
        raise DimensionError(f"heatmap: prediction {pred.values.shape} and ground truth {gt.values.shape} differ")
    p = pred.values.astype(np.float64)
    g = gt.values.astype(np.float64)
    if band is None:
        return np.mean(np.abs(g - p) / np.maximum(g, MRAE_EPS), axis=0)
    if not 0 <= band < gt.bands:
        raise ContractError(f"band {band} out of range [0, {gt.bands})")
    return np.abs(g[band] - p[band])


def write_heatmap(path: str, errors: np.ndarray, vmax: float = 0.2):
    """Save an H x W error map with a fixed colormap and range [0, vmax]; one image pixel per map pixel."""
    if vmax <= 0:
        raise ContractError(f"vmax must be > 0, got {vmax}")
    plt.imsave(path, errors, cmap=HEATMAP_CMAP, vmin=0.0, vmax=vmax)


def spectral_curves(cube: SpectralCube, points: Sequence[Tuple[int, int]],
                    reference: Optional[SpectralCube] = None) -> List[dict]:
    """Rows of (point, y, x, wavelength, value[, reference]); B rows per point."""
    if reference is not None and reference.values.shape != cube.values.shape:
        raise DimensionError(f"curves: reference {reference.values.shape} does not match {cube.values.shape}")
    rows = []
    for i, (y, x) in enumerate(points):
        if not (0 <= y < cube.height and 0 <= x < cube.width):
            raise ContractError(f"pixel ({y}, {x}) outside {cube.height}x{cube.width}")
        for b, wl in enumerate(cube.wavelengths_nm):
            rows.append({
                "point": i,
                "y": y,
                "x": x,
                "wavelength_nm": float(wl),
                "value": float(cube.values[b, y, x]),
                "reference": "" if reference is None else float(reference.values[b, y, x]),
            })
    return rows


def write_curves(csv_path: str, png_path: Optional[str], cube: SpectralCube, points: Sequence[Tuple[int, int]],
                 reference: Optional[SpectralCube] = None) -> List[dict]:
    rows = spectral_curves(cube, points, reference)
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    if png_path:
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, (y, x) in enumerate(points):
            line, = ax.plot(cube.wavelengths_nm, cube.values[:, y, x], label=f"({y}, {x})")
            if reference is not None:
                ax.plot(cube.wavelengths_nm, reference.values[:, y, x], linestyle="--", color=line.get_color())
        ax.set_xlabel("Wavelength (nm)")
        ax.set_ylabel("Value")
        ax.legend()
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return rows
