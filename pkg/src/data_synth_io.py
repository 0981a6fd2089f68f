"""
Synthetic RGB-HSI data, camera projection, patching and file formats.

Scenes are piecewise mixtures of a few smooth spectral endmembers over
Voronoi regions, blurred at the boundaries so SLIC has structure to find.
RGB images come from a 3 x B camera sensitivity matrix (rgb = phi . spectrum),
optionally degraded with noise and 8-bit quantization for the "realworld" track.

HSC1 cube layout (little-endian):
    bytes 0-3 "HSC1" | u32 B | u32 H | u32 W | B*H*W float32, band-major, row-major
"""

import csv
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.interpolate import CubicSpline
from tqdm import tqdm

from hprn_errors import ContractError, CubeFormatError
from log_utils import log

HSC1_MAGIC = b"HSC1"
HSC1_HEADER_BYTES = 16
MAX_CUBE_ELEMENTS = 2 ** 31 - 1
TRACKS = ("clean", "realworld")
SPLIT_NAMES = ("train", "val", "test")


def default_wavelengths(bands: int) -> np.ndarray:
    """400-700 nm; exactly 10 nm steps for the usual 31 bands."""
    if bands == 31:
        return np.arange(400.0, 701.0, 10.0)
    return np.linspace(400.0, 700.0, bands)


# ========================================
# Domain types
# ========================================
@dataclass
class SpectralCube:
    values: np.ndarray
    wavelengths_nm: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ContractError(f"SpectralCube values must be B x H x W, got {self.values.shape}")
        if self.wavelengths_nm is None:
            self.wavelengths_nm = default_wavelengths(self.values.shape[0])
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def validate(self) -> "SpectralCube":
        if len(self.wavelengths_nm) != self.bands:
            raise ContractError(f"{len(self.wavelengths_nm)} wavelengths for {self.bands} bands")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ContractError("wavelengths must be strictly increasing")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ContractError("cube values must lie in [0, 1]")
        return self

    def crop(self, top: int, left: int, size: int) -> "SpectralCube":
        return SpectralCube(crop_window(self.values, top, left, size), self.wavelengths_nm)


@dataclass
class SensitivityMatrix:
    """3 x B camera response; rows are R, G, B."""

    values: np.ndarray
    wavelengths_nm: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.wavelengths_nm is None:
            self.wavelengths_nm = default_wavelengths(self.values.shape[1])

    @property
    def bands(self) -> int:
        return self.values.shape[1]

    def validate(self) -> "SensitivityMatrix":
        if self.values.ndim != 2 or self.values.shape[0] != 3:
            raise ContractError(f"sensitivity must be 3 x B, got {self.values.shape}")
        if self.values.min() < 0:
            raise ContractError("sensitivity entries must be >= 0")
        if np.any(self.values.sum(axis=1) <= 0):
            raise ContractError("every sensitivity row needs a positive sum")
        return self


@dataclass
class NoiseSpec:
    """Real-world degradation: zero-mean Gaussian noise then optional 8-bit quantization."""

    sigma: float = 0.005
    quantize: bool = True
    seed: int = 0


@dataclass
class ScenePair:
    scene_id: str
    rgb: np.ndarray
    cube: SpectralCube


@dataclass
class Patch:
    scene_id: str
    top: int
    left: int
    rgb: np.ndarray
    hsi: np.ndarray


@dataclass
class DatasetSplit:
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)

    def validate(self) -> "DatasetSplit":
        seen = set()
        for name in SPLIT_NAMES:
            ids = set(getattr(self, name))
            overlap = seen & ids
            if overlap:
                raise ContractError(f"split '{name}' shares ids with another split: {sorted(overlap)[:3]}")
            seen |= ids
        return self

    def get(self, name: str) -> List[str]:
        if name not in SPLIT_NAMES:
            raise ContractError(f"Unknown split '{name}'. Valid: {SPLIT_NAMES}")
        return getattr(self, name)


# ========================================
# Generators
# ========================================
def gen_sensitivity(bands: int, seed: int, wavelengths: Optional[np.ndarray] = None) -> SensitivityMatrix:
    """Three Gaussian responses near 450 / 550 / 620 nm, 30-50 nm wide, each summing to 1."""
    if bands < 3:
        raise ContractError(f"need at least 3 bands, got {bands}")
    wl = default_wavelengths(bands) if wavelengths is None else np.asarray(wavelengths, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = np.array([450.0, 550.0, 620.0]) + rng.uniform(-10.0, 10.0, size=3)
    widths = rng.uniform(30.0, 50.0, size=3)
    curves = np.exp(-0.5 * ((wl[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    curves /= curves.sum(axis=1, keepdims=True)
    return SensitivityMatrix(curves, wl).validate()


def gen_endmembers(bands: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """count x B smooth positive spectra from natural cubic splines through random knots."""
    wl = default_wavelengths(bands)
    knots = np.linspace(wl[0], wl[-1], 6)
    spectra = np.empty((count, bands))
    for e in range(count):
        spline = CubicSpline(knots, rng.uniform(0.05, 0.95, size=len(knots)), bc_type="natural")
        spectra[e] = np.clip(spline(wl), 0.02, 1.0)
    return spectra


def gen_hsi(height: int, width: int, bands: int, seed: int, n_endmembers: int = 5,
            n_regions: Optional[int] = None, blur_sigma: float = 1.5) -> SpectralCube:
    """
    Generate a synthetic scene.

    Args:
        height, width, bands: Cube dimensions
        seed: Generator seed; the cube is a pure function of all arguments
        n_endmembers: Number of spectral materials K_e
        n_regions: Voronoi cell count (default: one per 256 pixels, at least K_e)
        blur_sigma: Gaussian blur of the abundance maps at region boundaries

    Returns:
        SpectralCube with values in [0, 1]
    """
    if min(height, width, bands, n_endmembers) < 1:
        raise ContractError("gen_hsi dimensions must be positive")
    rng = np.random.default_rng(seed)
    endmembers = gen_endmembers(bands, n_endmembers, rng)

    n_regions = n_regions or max(n_endmembers, (height * width) // 256)
    seed_y = rng.uniform(0, height, size=n_regions)
    seed_x = rng.uniform(0, width, size=n_regions)
    material = rng.integers(0, n_endmembers, size=n_regions)
    gain = rng.uniform(0.6, 1.0, size=n_regions)

    yy, xx = np.mgrid[0:height, 0:width]
    distance = (yy[..., None] - seed_y) ** 2 + (xx[..., None] - seed_x) ** 2
    region = np.argmin(distance, axis=-1)

    abundance = np.zeros((n_endmembers, height, width))
    abundance[material[region], yy, xx] = gain[region]
    if blur_sigma > 0:
        abundance = ndimage.gaussian_filter(abundance, sigma=(0, blur_sigma, blur_sigma), mode="nearest")

    cube = np.tensordot(endmembers.T, abundance, axes=(1, 0))
    return SpectralCube(np.clip(cube, 0.0, 1.0), default_wavelengths(bands))


def project_rgb(cube: SpectralCube, phi: SensitivityMatrix, noise: Optional[NoiseSpec] = None,
                clip: bool = True) -> np.ndarray:
    """rgb = phi . spectrum per pixel, optionally degraded; 3 x H x W."""
    if phi.bands != cube.bands:
        raise ContractError(f"sensitivity has {phi.bands} bands, cube has {cube.bands}")
    rgb = np.tensordot(phi.values, cube.values, axes=(1, 0))
    if noise is not None:
        rng = np.random.default_rng(noise.seed)
        rgb = rgb + rng.normal(0.0, noise.sigma, size=rgb.shape)
        if noise.quantize:
            rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


# ========================================
# Patching
# ========================================
def crop_window(array: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Crop the last two axes of array to size x size at (top, left)."""
    height, width = array.shape[-2:]
    if top < 0 or left < 0 or top + size > height or left + size > width:
        raise ContractError(f"crop {size}x{size} at ({top}, {left}) exceeds {height}x{width}")
    return array[..., top:top + size, left:left + size]


def crop_patches(pair: ScenePair, size: int = 64, count: int = 1, seed: int = 0) -> List[Patch]:
    """Aligned random crops; the same window is applied to the RGB image and the cube."""
    height, width = pair.cube.height, pair.cube.width
    if size > min(height, width):
        raise ContractError(f"patch size {size} exceeds scene size {height}x{width}")
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(count):
        top = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
        patches.append(Patch(pair.scene_id, top, left,
                             crop_window(pair.rgb, top, left, size),
                             crop_window(pair.cube.values, top, left, size)))
    return patches


# ========================================
# HSC1 cubes
# ========================================
def write_cube(path: str, cube):
    """Write a SpectralCube (or B x H x W array) as HSC1."""
    values = cube.values if isinstance(cube, SpectralCube) else np.asarray(cube)
    if values.ndim != 3:
        raise ContractError(f"cube must be B x H x W, got {values.shape}")
    header = HSC1_MAGIC + struct.pack("<3I", *values.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_cube(path: str, wavelengths: Optional[np.ndarray] = None) -> SpectralCube:
    """Read an HSC1 file. Parse failures raise CubeFormatError with the byte offset."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != HSC1_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {blob[:4]!r}, expected {HSC1_MAGIC!r}", offset=0)
    if len(blob) < HSC1_HEADER_BYTES:
        raise CubeFormatError(f"{path}: truncated header", offset=len(blob))
    bands, height, width = struct.unpack_from("<3I", blob, 4)
    n_values = bands * height * width
    if min(bands, height, width) == 0 or n_values > MAX_CUBE_ELEMENTS:
        raise CubeFormatError(f"{path}: dimensions {bands}x{height}x{width} out of range", offset=4)
    expected = HSC1_HEADER_BYTES + 4 * n_values
    if len(blob) < expected:
        raise CubeFormatError(f"{path}: truncated payload, expected {expected} bytes, found {len(blob)}",
                              offset=len(blob))
    values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=HSC1_HEADER_BYTES)
    return SpectralCube(values.reshape(bands, height, width).astype(np.float32), wavelengths)


# ========================================
# Images, sensitivity, splits
# ========================================
def write_rgb_png(path: str, rgb: np.ndarray):
    """Save a 3 x H x W image in [0, 1] as an 8-bit PNG."""
    pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(pixels).save(path)


def read_rgb_png(path: str) -> np.ndarray:
    """Load an 8-bit PNG as a 3 x H x W float image in [0, 1]."""
    pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return pixels.transpose(2, 0, 1)


def write_sensitivity_csv(path: str, phi: SensitivityMatrix):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["wavelength_nm", "r", "g", "b"])
        for i, wl in enumerate(phi.wavelengths_nm):
            writer.writerow([f"{wl:g}"] + [repr(float(v)) for v in phi.values[:, i]])


def read_sensitivity_csv(path: str) -> SensitivityMatrix:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    wl = np.array([float(r["wavelength_nm"]) for r in rows])
    values = np.array([[float(r[c]) for r in rows] for c in ("r", "g", "b")])
    return SensitivityMatrix(values, wl).validate()


def make_split(ids: Sequence[str], n_train: int, n_val: int, n_test: int) -> DatasetSplit:
    if n_train + n_val + n_test > len(ids):
        raise ContractError(f"split sizes {n_train}+{n_val}+{n_test} exceed {len(ids)} scenes")
    ids = list(ids)
    return DatasetSplit(ids[:n_train], ids[n_train:n_train + n_val],
                        ids[n_train + n_val:n_train + n_val + n_test]).validate()


def write_split(directory: str, split: DatasetSplit):
    for name in SPLIT_NAMES:
        with open(os.path.join(directory, f"{name}.txt"), "w") as f:
            f.write("".join(f"{scene_id}\n" for scene_id in split.get(name)))


def read_split(directory: str) -> DatasetSplit:
    lists = {}
    for name in SPLIT_NAMES:
        path = os.path.join(directory, f"{name}.txt")
        if os.path.exists(path):
            with open(path) as f:
                lists[name] = [line.strip() for line in f if line.strip()]
        else:
            lists[name] = []
    return DatasetSplit(**lists).validate()


# ========================================
# Corpus
# ========================================
def _save_scene(directory: str, scene_id: str, cube: SpectralCube, rgb: np.ndarray):
    write_cube(os.path.join(directory, f"{scene_id}.hsc"), cube)
    write_cube(os.path.join(directory, f"{scene_id}_rgb.hsc"), rgb[None] if rgb.ndim == 2 else rgb)
    write_rgb_png(os.path.join(directory, f"{scene_id}.png"), rgb)


def _track_sensitivity(bands: int, seed: int, track: str) -> SensitivityMatrix:
    if track not in TRACKS:
        raise ContractError(f"Unknown track '{track}'. Valid: {TRACKS}")
    # the realworld camera is a different, unknown response
    return gen_sensitivity(bands, seed if track == "clean" else seed + 7919)


def generate_corpus(directory: str, n_train: int = 24, n_val: int = 4, n_test: int = 4, size: int = 128,
                    bands: int = 31, seed: int = 0, track: str = "clean", noise_sigma: float = 0.005) -> DatasetSplit:
    """
    Write a synthetic corpus: per scene <id>.hsc (cube), <id>_rgb.hsc (lossless RGB), <id>.png,
    plus sensitivity.csv and train/val/test id lists.
    """
    os.makedirs(directory, exist_ok=True)
    phi = _track_sensitivity(bands, seed, track)
    write_sensitivity_csv(os.path.join(directory, "sensitivity.csv"), phi)

    total = n_train + n_val + n_test
    ids = [f"scene_{i:03d}" for i in range(total)]
    for i, scene_id in enumerate(tqdm(ids, desc="Generating", unit="scene")):
        scene_seed = seed * 100003 + i
        cube = gen_hsi(size, size, bands, scene_seed)
        noise = NoiseSpec(noise_sigma, True, scene_seed) if track == "realworld" else None
        _save_scene(directory, scene_id, cube, project_rgb(cube, phi, noise))

    split = make_split(ids, n_train, n_val, n_test)
    write_split(directory, split)
    log(f"Wrote {total} {track} scenes ({size}x{size}x{bands}) to {directory}")
    return split


def ingest_cubes(paths: Iterable[str], directory: str, seed: int = 0, track: str = "clean",
                 noise_sigma: float = 0.005, n_val: int = 0, n_test: int = 0) -> DatasetSplit:
    """Turn user-supplied HSC1 cubes into a corpus; values are rescaled into [0, 1] when needed."""
    os.makedirs(directory, exist_ok=True)
    paths = list(paths)
    if not paths:
        raise ContractError("no cubes to ingest")
    phi = None
    ids = []
    for i, path in enumerate(paths):
        cube = read_cube(path)
        values = cube.values.astype(np.float64)
        values = np.clip(values, 0.0, None)
        peak = values.max()
        if peak > 1.0:
            values = values / peak
        cube = SpectralCube(values, cube.wavelengths_nm)
        if phi is None:
            phi = _track_sensitivity(cube.bands, seed, track)
            write_sensitivity_csv(os.path.join(directory, "sensitivity.csv"), phi)
        scene_id = os.path.splitext(os.path.basename(path))[0]
        noise = NoiseSpec(noise_sigma, True, seed * 100003 + i) if track == "realworld" else None
        _save_scene(directory, scene_id, cube, project_rgb(cube, phi, noise))
        ids.append(scene_id)

    split = make_split(ids, len(ids) - n_val - n_test, n_val, n_test)
    write_split(directory, split)
    log(f"Ingested {len(ids)} cubes into {directory}")
    return split


def load_scenes(directory: str, split_name: str) -> List[ScenePair]:
    """Load every scene of one split of a corpus directory."""
    split = read_split(directory)
    scenes = []
    for scene_id in split.get(split_name):
        cube = read_cube(os.path.join(directory, f"{scene_id}.hsc"))
        rgb = read_cube(os.path.join(directory, f"{scene_id}_rgb.hsc")).values
        scenes.append(ScenePair(scene_id, rgb, cube))
    return scenes
