"""
SLIC superpixels for the semantic prior.

Localized k-means in (CIELAB color, y/S, x/S) space on a regular grid of
seeds, followed by a connectivity pass that merges small orphan fragments
into their largest neighbour. Deterministic: no random initialization.
"""

import csv
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2lab

from hprn_errors import ContractError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
COLOR_SPACES = ("lab", "rgb")


@dataclass
class SlicParams:
    scale: int
    compactness: float = 10.0
    max_iters: int = 10
    color_space: str = "lab"
    tolerance: float = 1e-3

    def validate(self) -> "SlicParams":
        if self.scale < 1:
            raise ContractError(f"SLIC scale must be >= 1, got {self.scale}")
        if self.compactness <= 0:
            raise ContractError(f"SLIC compactness must be > 0, got {self.compactness}")
        if self.max_iters < 1:
            raise ContractError(f"SLIC max_iters must be >= 1, got {self.max_iters}")
        if self.color_space not in COLOR_SPACES:
            raise ContractError(f"color_space must be one of {COLOR_SPACES}, got '{self.color_space}'")
        return self


@dataclass
class LabelMap:
    """H x W category assignment; labels are dense in [0, n_labels)."""

    labels: np.ndarray
    n_labels: int
    scale: int

    @property
    def shape(self):
        return self.labels.shape

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_labels)

    def validate(self) -> "LabelMap":
        if self.labels.ndim != 2:
            raise ContractError(f"label map must be H x W, got {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.n_labels:
            raise ContractError(f"labels must lie in [0, {self.n_labels})")
        return self

    def is_connected(self) -> bool:
        """True when every label occupies exactly one 4-connected region."""
        for value in range(self.n_labels):
            _, n_regions = ndimage.label(self.labels == value, FOUR_CONNECTED)
            if n_regions != 1:
                return False
        return True

    def relabeled(self, mapping: Sequence[int]) -> "LabelMap":
        """Apply a bijective ID remap (mapping[old] = new)."""
        mapping = np.asarray(mapping)
        return LabelMap(mapping[self.labels], self.n_labels, self.scale)


def relabel_by_first_appearance(labels: np.ndarray) -> np.ndarray:
    """Dense relabel so IDs increase with the raster position of each label's first pixel."""
    _, first_index, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first_index), dtype=np.int64)
    rank[np.argsort(first_index, kind="stable")] = np.arange(len(first_index))
    return rank[inverse].reshape(labels.shape)


# ========================================
# Segmentation
# ========================================
def _color_features(rgb: np.ndarray, color_space: str) -> np.ndarray:
    image = np.ascontiguousarray(rgb.transpose(1, 2, 0), dtype=np.float64)
    if color_space == "lab":
        return rgb2lab(image)
    return image * 100.0


def _seed_grid(height: int, width: int, k: int):
    nx = min(width, k, max(1, math.ceil(math.sqrt(k * width / height))))
    ny = min(height, max(1, round(k / nx)))
    cy = (np.arange(ny) + 0.5) * height / ny - 0.5
    cx = (np.arange(nx) + 0.5) * width / nx - 0.5
    grid_y, grid_x = np.meshgrid(cy, cx, indexing="ij")
    return grid_y.ravel(), grid_x.ravel()


def slic_segment(rgb, params: SlicParams) -> LabelMap:
    """
    Segment a 3 x H x W RGB image in [0, 1] into about params.scale superpixels.

    Args:
        rgb: numpy array or Tensor, 3 x H x W
        params: SlicParams

    Returns:
        Connected, densely labeled LabelMap
    """
    params.validate()
    rgb = np.asarray(getattr(rgb, "data", rgb), dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ContractError(f"slic_segment expects a 3 x H x W image, got {rgb.shape}")
    if rgb.min() < -1e-9 or rgb.max() > 1 + 1e-9:
        raise ContractError("slic_segment expects RGB values in [0, 1]")
    _, height, width = rgb.shape
    n_pixels = height * width
    if params.scale > n_pixels:
        raise ContractError(f"SLIC scale {params.scale} exceeds pixel count {n_pixels}")

    color = _color_features(np.clip(rgb, 0.0, 1.0), params.color_space)
    step = math.sqrt(n_pixels / params.scale)
    seed_y, seed_x = _seed_grid(height, width, params.scale)
    n_centers = len(seed_y)
    centers = np.empty((n_centers, 5))
    centers[:, 3] = seed_y
    centers[:, 4] = seed_x
    centers[:, :3] = color[np.rint(seed_y).astype(int), np.rint(seed_x).astype(int)]

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    labels = np.zeros((height, width), dtype=np.int64)
    for _ in range(params.max_iters):
        best = np.full((height, width), np.inf)
        labels = np.full((height, width), -1, dtype=np.int64)
        for k in range(n_centers):
            cy, cx = centers[k, 3], centers[k, 4]
            y0, y1 = max(0, math.ceil(cy - step)), min(height, math.floor(cy + step) + 1)
            x0, x1 = max(0, math.ceil(cx - step)), min(width, math.floor(cx + step) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            d_color = np.linalg.norm(color[y0:y1, x0:x1] - centers[k, :3], axis=-1)
            d_space = np.hypot(yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx) / step
            distance = d_color + params.compactness * d_space
            window_best = best[y0:y1, x0:x1]
            window_labels = labels[y0:y1, x0:x1]
            # strict comparison: the lowest index keeps ties
            closer = distance < window_best
            window_best[closer] = distance[closer]
            window_labels[closer] = k

        orphans = labels < 0
        if orphans.any():
            dy = yy[orphans][:, None] - centers[None, :, 3]
            dx = xx[orphans][:, None] - centers[None, :, 4]
            labels[orphans] = np.argmin(dy * dy + dx * dx, axis=1)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_centers).astype(np.float64)
        features = np.concatenate([color.reshape(-1, 3), yy.reshape(-1, 1), xx.reshape(-1, 1)], axis=1)
        updated = centers.copy()
        occupied = counts > 0
        for j in range(5):
            sums = np.bincount(flat, weights=features[:, j], minlength=n_centers)
            updated[occupied, j] = sums[occupied] / counts[occupied]
        shift = np.sqrt(((updated[:, :3] - centers[:, :3]) ** 2).sum(axis=1)
                        + ((updated[:, 3:] - centers[:, 3:]) ** 2).sum(axis=1) / (step * step))
        centers = updated
        if shift.max() < params.tolerance:
            break

    dense = relabel_by_first_appearance(labels)
    raw = LabelMap(dense, int(dense.max()) + 1, params.scale)
    return enforce_connectivity(raw)


def enforce_connectivity(lm: LabelMap) -> LabelMap:
    """
    Split every label into 4-connected components and merge components smaller
    than (HW / scale) / 4 into their largest adjacent component.
    """
    labels = lm.labels
    height, width = labels.shape
    n_pixels = height * width
    min_size = (n_pixels / max(lm.scale, 1)) / 4.0

    components = np.full(labels.shape, -1, dtype=np.int64)
    n_components = 0
    for value in np.unique(labels):
        regions, n_regions = ndimage.label(labels == value, FOUR_CONNECTED)
        inside = regions > 0
        components[inside] = regions[inside] - 1 + n_components
        n_components += n_regions

    flat = components.ravel()
    sizes = np.bincount(flat, minlength=n_components)
    first_pixel = np.full(n_components, n_pixels)
    np.minimum.at(first_pixel, flat, np.arange(n_pixels))

    for comp in np.argsort(first_pixel, kind="stable"):
        if sizes[comp] == 0 or sizes[comp] >= min_size:
            continue
        mask = components == comp
        ring = ndimage.binary_dilation(mask, FOUR_CONNECTED) & ~mask
        neighbours = np.unique(components[ring])
        if neighbours.size == 0:
            continue
        target = neighbours[np.argmax(sizes[neighbours])]
        components[mask] = target
        sizes[target] += sizes[comp]
        sizes[comp] = 0

    dense = relabel_by_first_appearance(components)
    return LabelMap(dense, int(dense.max()) + 1, lm.scale)


def multiscale_labels(rgb, scales: Sequence[int], compactness: float = 10.0, max_iters: int = 10) -> List[LabelMap]:
    """One LabelMap per requested scale, in the order given."""
    if not scales:
        raise ContractError("multiscale_labels needs at least one scale")
    return [slic_segment(rgb, SlicParams(scale=int(k), compactness=compactness, max_iters=max_iters)) for k in scales]


# ========================================
# Output
# ========================================
def write_label_png(lm: LabelMap, path: str):
    """Save labels as a 16-bit grayscale PNG."""
    if lm.n_labels > 65535:
        raise ContractError(f"{lm.n_labels} labels do not fit a 16-bit PNG")
    Image.fromarray(lm.labels.astype(np.uint16)).save(path)


def read_label_png(path: str, scale: int = 0) -> LabelMap:
    labels = np.asarray(Image.open(path)).astype(np.int64)
    return LabelMap(labels, int(labels.max()) + 1, scale).validate()


def write_label_counts(lm: LabelMap, path: str):
    """CSV of per-label pixel counts: label,pixels."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "pixels"])
        for label, count in enumerate(lm.counts()):
            writer.writerow([label, int(count)])
