"""
The HPRN network.

    F0      = conv3x3(rgb)                     3 -> C
    F_DFP   = MRB_M(... MRB_1(F0))
    F_GRS   = conv3x3(F_DFP) + F0
    F_Coa   = conv3x3(F_GRS)                   C -> B
    I_SSR   = SSRM(F_Coa, SLIC label maps)     B -> B

Each MRB holds three residual units (conv3x3 -> PReLU -> conv3x3) and a block
skip. The TCRM gate rescales the branch of the configured unit(s). The SSRM
reorders pixels by superpixel label, splits them into G groups and applies
per-group non-local attention, once per SLIC scale; a 1x1 conv fuses scales.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from data_synth_io import SpectralCube
from hprn_config import HPRNConfig
from hprn_errors import ContractError, DimensionError
from nn_ops import (
    Conv2DLayer,
    Module,
    MultiHeadAttention,
    PReLU,
    local_avg_pool,
    sigmoid,
    softmax,
)
from slic_segmenter import LabelMap, multiscale_labels, relabel_by_first_appearance
from tensor_engine import (
    Tensor,
    batched_matmul,
    concat,
    permute,
    reduce_mean,
    reshape,
    take,
)

UNITS_PER_MRB = 3


# ========================================
# TCRM
# ========================================
class TCRM(Module):
    """Channel gate from self-attention over a grid of locally pooled channel descriptors."""

    def __init__(self, channels: int, cfg: HPRNConfig, rng: np.random.Generator, dtype=np.float64):
        self.grid = tuple(cfg.tcrm_grid)
        token_dim = self.grid[0] * self.grid[1]
        reduced = max(1, channels // cfg.tcrm_r)
        self.attention = MultiHeadAttention(token_dim, cfg.tcrm_heads, rng, dtype, cfg.attention_scaling)
        self.squeeze_down = Conv2DLayer(channels, reduced, 1, rng, dtype)
        self.squeeze_act = PReLU(reduced, dtype)
        self.squeeze_up = Conv2DLayer(reduced, channels, 1, rng, dtype)

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel weights in (0, 1), shaped C x 1 x 1."""
        channels = x.shape[0]
        pooled = local_avg_pool(x, self.grid)
        tokens = reshape(pooled, (channels, self.grid[0] * self.grid[1]))
        attended = self.attention(tokens)
        descriptor = reshape(reduce_mean(attended, axes=1), (channels, 1, 1))
        return sigmoid(self.squeeze_up(self.squeeze_act(self.squeeze_down(descriptor))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


def tcrm_forward(x: Tensor, tcrm: TCRM) -> Tensor:
    return tcrm(x)


# ========================================
# MRB
# ========================================
class ResidualUnit(Module):
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        self.conv_a = Conv2DLayer(channels, channels, 3, rng, dtype)
        self.act = PReLU(channels, dtype)
        self.conv_b = Conv2DLayer(channels, channels, 3, rng, dtype)

    def branch(self, x: Tensor) -> Tensor:
        return self.conv_b(self.act(self.conv_a(x)))


def tcrm_slots(cfg: HPRNConfig) -> List[int]:
    """Zero-based unit indices that carry a TCRM."""
    if not cfg.use_tcrm:
        return []
    if cfg.tcrm_position == "multi":
        return list(range(UNITS_PER_MRB))
    return [int(cfg.tcrm_position) - 1]


class MRB(Module):
    """Multi-residual block: three sequential residual units plus a block-level skip."""

    def __init__(self, channels: int, cfg: HPRNConfig, rng: np.random.Generator, dtype=np.float64):
        self.channels = channels
        self.units = [ResidualUnit(channels, rng, dtype) for _ in range(UNITS_PER_MRB)]
        slots = tcrm_slots(cfg)
        self.tcrms = [TCRM(channels, cfg, rng, dtype) if i in slots else None for i in range(UNITS_PER_MRB)]

    def forward(self, x: Tensor) -> Tensor:
        return mrb_forward(x, self)


def mrb_forward(x: Tensor, mrb: MRB) -> Tensor:
    if x.ndim != 3 or x.shape[0] != mrb.channels:
        raise DimensionError(f"MRB expects {mrb.channels} x H x W input, got {x.shape}")
    h = x
    for unit, tcrm in zip(mrb.units, mrb.tcrms):
        branch = unit.branch(h)
        if tcrm is not None:
            branch = tcrm(branch)
        h = h + branch
    return h + x


# ========================================
# Pixel regrouping
# ========================================
@dataclass
class Permutation:
    """
    Pixel order used to regroup a feature map.

    order[s] is the raster pixel index stored at slot s (G * N slots). Slots past
    H * W are mirror-filled duplicates; primary_slot[p] is the first slot of pixel p.
    """

    order: np.ndarray
    primary_slot: np.ndarray
    groups: int
    group_size: int
    height: int
    width: int

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def n_filled(self) -> int:
        return self.groups * self.group_size - self.n_pixels

    def duplicate_slots(self) -> np.ndarray:
        return np.arange(self.n_pixels, self.groups * self.group_size)


def build_permutation(labels: LabelMap, groups: int) -> Permutation:
    """Stable sort of pixels by (label, raster index), split into groups with a mirrored tail."""
    height, width = labels.shape
    n_pixels = height * width
    if groups < 1 or groups > n_pixels:
        raise ContractError(f"group count {groups} must lie in [1, {n_pixels}] for a {height}x{width} map")
    canonical = relabel_by_first_appearance(labels.labels).ravel()
    order = np.argsort(canonical, kind="stable")
    group_size = math.ceil(n_pixels / groups)
    fill = groups * group_size - n_pixels
    if fill:
        # reflect about the last element without repeating it
        order = np.concatenate([order, order[::-1][1:fill + 1]])
    primary = np.empty(n_pixels, dtype=np.int64)
    primary[order[:n_pixels]] = np.arange(n_pixels)
    return Permutation(order, primary, groups, group_size, height, width)


def _unfold_with(feat: Tensor, perm: Permutation, layout: str) -> Tensor:
    channels = feat.shape[0]
    flat = reshape(feat, (channels, perm.n_pixels))
    grouped = reshape(take(flat, perm.order, axis=1), (channels, perm.groups, perm.group_size))
    if layout == "gnb":
        return permute(grouped, (1, 2, 0))
    if layout == "gbn":
        return permute(grouped, (1, 0, 2))
    raise ContractError(f"Unknown layout '{layout}'. Valid: gnb, gbn")


def unfold_order(feat: Tensor, labels: LabelMap, groups: int, layout: str = "gnb"):
    """
    Regroup a B x H x W feature map by superpixel label.

    Args:
        feat: B x H x W Tensor
        labels: LabelMap of shape H x W
        groups: Group count G
        layout: "gnb" for G x N x B, "gbn" for G x B x N

    Returns:
        Tuple of (grouped Tensor, Permutation)
    """
    if feat.ndim != 3:
        raise DimensionError(f"unfold_order expects B x H x W, got {feat.shape}")
    if tuple(labels.shape) != tuple(feat.shape[1:]):
        raise ContractError(f"label map {labels.shape} does not match feature map {feat.shape[1:]}")
    perm = build_permutation(labels, groups)
    return _unfold_with(feat, perm, layout), perm


def fold_reorder(grouped: Tensor, perm: Permutation, layout: str = "gnb") -> Tensor:
    """Inverse of unfold_order; each pixel reads its primary slot, duplicates are dropped."""
    if grouped.ndim != 3:
        raise ContractError(f"fold_reorder expects a 3-D grouped tensor, got {grouped.shape}")
    if layout == "gnb":
        groups, group_size, channels = grouped.shape
        by_channel = permute(grouped, (2, 0, 1))
    elif layout == "gbn":
        groups, channels, group_size = grouped.shape
        by_channel = permute(grouped, (1, 0, 2))
    else:
        raise ContractError(f"Unknown layout '{layout}'. Valid: gnb, gbn")
    if (groups, group_size) != (perm.groups, perm.group_size):
        raise ContractError(f"grouped tensor {grouped.shape} does not match permutation "
                            f"G={perm.groups}, N={perm.group_size}")
    slots = reshape(by_channel, (channels, groups * group_size))
    pixels = take(slots, perm.primary_slot, axis=1)
    return reshape(pixels, (channels, perm.height, perm.width))


# ========================================
# SSRM
# ========================================
class SSRMScale(Module):
    """Embedding and value convs for one SLIC scale."""

    def __init__(self, bands: int, shared: bool, rng: np.random.Generator, dtype=np.float64):
        self.shared = shared
        self.embed = Conv2DLayer(bands, bands, 1, rng, dtype)
        self.embed_key = None if shared else Conv2DLayer(bands, bands, 1, rng, dtype)
        self.value = Conv2DLayer(bands, bands, 1, rng, dtype)


class SSRM(Module):
    def __init__(self, cfg: HPRNConfig, rng: np.random.Generator, dtype=np.float64):
        self.groups = cfg.ssrm_groups
        self.residual = cfg.ssrm_residual
        self.scales = [SSRMScale(cfg.bands, cfg.ssrm_shared_embedding, rng, dtype) for _ in cfg.ssrm_scales]
        self.fusion = Conv2DLayer(len(cfg.ssrm_scales) * cfg.bands, cfg.bands, 1, rng, dtype)

    def init_pass_through(self):
        """Fusion averages the scales; value convs output zero. With the residual, SSRM is the identity."""
        bands = self.fusion.out_channels
        n_scales = len(self.scales)
        identity = np.tile(np.eye(bands), (1, n_scales)) / n_scales
        self.fusion.weight.data = identity.reshape(bands, n_scales * bands, 1, 1).astype(self.fusion.weight.dtype)
        self.fusion.bias.data[:] = 0
        for branch in self.scales:
            branch.value.weight.data[:] = 0
            branch.value.bias.data[:] = 0

    def forward(self, coarse: Tensor, label_maps: Sequence[LabelMap]) -> Tensor:
        return ssrm_multiscale(coarse, label_maps, self)


def ssrm_single_scale(coarse: Tensor, labels: LabelMap, groups: int, branch: SSRMScale,
                      return_relation: bool = False):
    """
    Non-local attention within each label-ordered group.

    Returns:
        B x H x W Tensor, or (Tensor, G x N x N relation Tensor) when return_relation is set
    """
    if tuple(labels.shape) != tuple(coarse.shape[1:]):
        raise ContractError(f"label map {labels.shape} does not match coarse cube {coarse.shape[1:]}")
    perm = build_permutation(labels, groups)
    query = branch.embed(coarse)
    key = query if branch.embed_key is None else branch.embed_key(coarse)
    value = branch.value(coarse)

    relation = softmax(batched_matmul(_unfold_with(query, perm, "gnb"), _unfold_with(key, perm, "gbn")), axis=-1)
    out = fold_reorder(batched_matmul(relation, _unfold_with(value, perm, "gnb")), perm)
    if return_relation:
        return out, relation
    return out


def ssrm_multiscale(coarse: Tensor, label_maps: Sequence[LabelMap], ssrm: SSRM) -> Tensor:
    if not label_maps:
        raise ContractError("SSRM needs at least one label map")
    if len(label_maps) != len(ssrm.scales):
        raise ContractError(f"SSRM built for {len(ssrm.scales)} scales, got {len(label_maps)} label maps")
    outputs = [ssrm_single_scale(coarse, lm, ssrm.groups, branch) for lm, branch in zip(label_maps, ssrm.scales)]
    fused = ssrm.fusion(concat(outputs, axis=0))
    return fused + coarse if ssrm.residual else fused


# ========================================
# HPRN
# ========================================
class HPRN(Module):
    def __init__(self, cfg: HPRNConfig, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        channels = cfg.channels
        self.shallow = Conv2DLayer(3, channels, 3, rng, dtype)
        self.mrbs = [MRB(channels, cfg, rng, dtype) for _ in range(cfg.n_mrb)]
        self.grs = Conv2DLayer(channels, channels, 3, rng, dtype)
        self.recon = Conv2DLayer(channels, cfg.bands, 3, rng, dtype)
        self.ssrm = SSRM(cfg, rng, dtype) if cfg.use_ssrm else None

    @property
    def dtype(self):
        return self.shallow.weight.dtype

    def coarse(self, rgb: Tensor) -> Tensor:
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise DimensionError(f"HPRN expects a 3 x H x W image, got {rgb.shape}")
        f0 = self.shallow(rgb)
        features = f0
        for mrb in self.mrbs:
            features = mrb(features)
        return self.recon(self.grs(features) + f0)

    def forward(self, rgb: Tensor, label_maps: Sequence[LabelMap] = ()) -> Tensor:
        coarse = self.coarse(rgb)
        if self.ssrm is None:
            return coarse
        for lm in label_maps:
            if tuple(lm.shape) != tuple(rgb.shape[1:]):
                raise ContractError(f"label map {lm.shape} does not match image {rgb.shape[1:]}")
        return ssrm_multiscale(coarse, label_maps, self.ssrm)


def semantic_prior(rgb, cfg: HPRNConfig) -> List[LabelMap]:
    """SLIC label maps for every configured scale; empty when the SSRM is disabled."""
    if not cfg.use_ssrm:
        return []
    return multiscale_labels(rgb, cfg.ssrm_scales, cfg.slic_compactness, cfg.slic_max_iters)


def hprn_forward(rgb, label_maps: Optional[Sequence[LabelMap]], model: HPRN) -> SpectralCube:
    """
    Reconstruct a spectral cube from an RGB image.

    Args:
        rgb: 3 x H x W array or Tensor in [0, 1]
        label_maps: SLIC maps per scale; computed from rgb when None
        model: HPRN

    Returns:
        SpectralCube with values clipped to [0, 1]
    """
    image = np.asarray(getattr(rgb, "data", rgb))
    if image.min() < -1e-6 or image.max() > 1 + 1e-6:
        raise ContractError("RGB input must lie in [0, 1]")
    if label_maps is None:
        label_maps = semantic_prior(image, model.cfg)
    out = model(Tensor(image, dtype=model.dtype), label_maps)
    return SpectralCube(np.clip(out.data, 0.0, 1.0))
