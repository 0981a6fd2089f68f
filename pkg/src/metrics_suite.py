"""
Reconstruction quality metrics: MRAE, RMSE, SAM, PSNR and ASSIM.

Lower is better for MRAE, RMSE and SAM; higher is better for PSNR and ASSIM.
All functions take B x H x W arrays (or SpectralCube / Tensor) and return floats.
"""

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from skimage.metrics import structural_similarity

from hprn_config import PSNR_FORMULAS
from hprn_errors import ContractError, DimensionError, UndefinedMetricError

MRAE_EPS = 1e-6
PSNR_CAP_DB = 100.0
EQ19_TERM_GUARD = 1e-12
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11

SUMMARY_COLUMNS = ["mrae", "rmse", "sam_degrees", "psnr_db", "psnr_capped", "assim", "sam_skipped"]
BAND_COLUMNS = ["band", "wavelength_nm", "mrae", "rmse", "psnr_db", "ssim"]


def _as_array(cube) -> np.ndarray:
    values = getattr(cube, "values", None)
    if values is None:
        values = getattr(cube, "data", cube)
    return np.asarray(values, dtype=np.float64)


def _pair(pred, gt, what: str) -> Tuple[np.ndarray, np.ndarray]:
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise DimensionError(f"{what}: prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


# ========================================
# Metrics
# ========================================
def mrae(pred, gt) -> float:
    p, g = _pair(pred, gt, "mrae")
    return float(np.mean(np.abs(g - p) / np.maximum(g, MRAE_EPS)))


def rmse(pred, gt) -> float:
    p, g = _pair(pred, gt, "rmse")
    return float(np.sqrt(np.mean((g - p) ** 2)))


def sam_details(pred, gt) -> Tuple[float, int]:
    """Mean spectral angle in degrees over pixels where both spectra are nonzero, plus the skip count."""
    p, g = _pair(pred, gt, "sam")
    if p.ndim < 2:
        raise DimensionError(f"sam expects spectra along axis 0, got shape {p.shape}")
    p = p.reshape(p.shape[0], -1)
    g = g.reshape(g.shape[0], -1)
    norm_p = np.linalg.norm(p, axis=0)
    norm_g = np.linalg.norm(g, axis=0)
    valid = (norm_p > 0) & (norm_g > 0)
    skipped = int(np.count_nonzero(~valid))
    if not valid.any():
        raise UndefinedMetricError("sam: every pixel has a zero-norm spectrum")
    cosine = (p[:, valid] * g[:, valid]).sum(axis=0) / (norm_p[valid] * norm_g[valid])
    angles = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return float(angles.mean()), skipped


def sam(pred, gt) -> float:
    return sam_details(pred, gt)[0]


def psnr_details(pred, gt, peak: float = 1.0, formula: str = "standard") -> Tuple[float, bool]:
    """
    PSNR in dB and whether the value is the zero-error cap.

    formula="standard": 10 log10(peak^2 / MSE)
    formula="eq19": mean over entries of 10 log10(peak^2 / max(err^2, 1e-12))
    """
    p, g = _pair(pred, gt, "psnr")
    if peak <= 0:
        raise ContractError(f"psnr peak must be > 0, got {peak}")
    if formula not in PSNR_FORMULAS:
        raise ContractError(f"Unknown psnr formula '{formula}'. Valid: {', '.join(PSNR_FORMULAS)}")
    squared = (g - p) ** 2
    mse = float(squared.mean())
    if mse == 0.0:
        return PSNR_CAP_DB, True
    if formula == "eq19":
        return float(np.mean(10.0 * np.log10(peak * peak / np.maximum(squared, EQ19_TERM_GUARD)))), False
    return float(10.0 * np.log10(peak * peak / mse)), False


def psnr(pred, gt, peak: float = 1.0, formula: str = "standard") -> float:
    return psnr_details(pred, gt, peak, formula)[0]


def band_ssim(pred, gt, peak: float = 1.0) -> List[float]:
    """Per-band SSIM with an 11 x 11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    p, g = _pair(pred, gt, "assim")
    if p.ndim != 3:
        raise DimensionError(f"assim expects B x H x W, got {p.shape}")
    if min(p.shape[1:]) < SSIM_WINDOW:
        raise ContractError(f"assim needs H, W >= {SSIM_WINDOW}, got {p.shape[1:]}")
    return [
        float(structural_similarity(g[b], p[b], data_range=peak, gaussian_weights=True, sigma=SSIM_SIGMA,
                                    use_sample_covariance=False, K1=0.01, K2=0.03))
        for b in range(p.shape[0])
    ]


def assim(pred, gt, peak: float = 1.0) -> float:
    return float(np.mean(band_ssim(pred, gt, peak)))


# ========================================
# Reports
# ========================================
@dataclass
class MetricsReport:
    mrae: float
    rmse: float
    sam_degrees: float
    psnr_db: float
    assim: float
    psnr_capped: bool = False
    sam_skipped: int = 0
    wavelengths_nm: List[float] = field(default_factory=list)
    band_mrae: List[float] = field(default_factory=list)
    band_rmse: List[float] = field(default_factory=list)
    band_psnr_db: List[float] = field(default_factory=list)
    band_ssim: List[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mrae": self.mrae,
            "rmse": self.rmse,
            "sam_degrees": self.sam_degrees,
            "psnr_db": self.psnr_db,
            "psnr_capped": self.psnr_capped,
            "assim": self.assim,
            "sam_skipped": self.sam_skipped,
        }

    def pretty(self) -> str:
        cap = " (capped: zero error)" if self.psnr_capped else ""
        return "\n".join([
            f"MRAE   {self.mrae:.6f}",
            f"RMSE   {self.rmse:.6f}",
            f"SAM    {self.sam_degrees:.4f} deg" + (f" ({self.sam_skipped} zero-norm pixels skipped)" if self.sam_skipped else ""),
            f"PSNR   {self.psnr_db:.3f} dB{cap}",
            f"ASSIM  {self.assim:.6f}",
        ])

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
            writer.writeheader()
            writer.writerow({k: (int(v) if isinstance(v, bool) else v) for k, v in self.summary().items()})

    def write_band_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(BAND_COLUMNS)
            for b, values in enumerate(zip(self.wavelengths_nm, self.band_mrae, self.band_rmse,
                                           self.band_psnr_db, self.band_ssim)):
                writer.writerow([b, *values])


def evaluate(pred, gt, peak: float = 1.0, psnr_formula: str = "standard",
             wavelengths: Optional[np.ndarray] = None) -> MetricsReport:
    """All five metrics plus per-band breakdowns."""
    p, g = _pair(pred, gt, "evaluate")
    if p.ndim != 3:
        raise DimensionError(f"evaluate expects B x H x W cubes, got {p.shape}")
    if wavelengths is None:
        wavelengths = getattr(gt, "wavelengths_nm", None)
    if wavelengths is None:
        wavelengths = np.arange(p.shape[0], dtype=np.float64)
    sam_deg, skipped = sam_details(p, g)
    psnr_db, capped = psnr_details(p, g, peak, psnr_formula)
    ssim_bands = band_ssim(p, g, peak)
    return MetricsReport(
        mrae=mrae(p, g),
        rmse=rmse(p, g),
        sam_degrees=sam_deg,
        psnr_db=psnr_db,
        assim=float(np.mean(ssim_bands)),
        psnr_capped=capped,
        sam_skipped=skipped,
        wavelengths_nm=[float(w) for w in wavelengths],
        band_mrae=[mrae(p[b], g[b]) for b in range(p.shape[0])],
        band_rmse=[rmse(p[b], g[b]) for b in range(p.shape[0])],
        band_psnr_db=[psnr(p[b], g[b], peak, psnr_formula) for b in range(p.shape[0])],
        band_ssim=ssim_bands,
    )


def mean_report(reports: List[MetricsReport]) -> dict:
    """Average the scalar summaries of several reports."""
    if not reports:
        raise ContractError("mean_report needs at least one report")
    keys = ["mrae", "rmse", "sam_degrees", "psnr_db", "assim"]
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
