"""
Training objective: mean L1 plus a second-order prior constraint (SOPC).

The SOPC term compares band covariance matrices of the prediction and the
ground truth, X = (1/n) * sum_p (I_p - mean)(I_p - mean)^T over the n pixels.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hprn_errors import ContractError, DimensionError
from tensor_engine import Tensor, abs_, as_tensor, matmul, reduce_mean, reshape, scale, transpose


@dataclass
class LossBreakdown:
    l1: Tensor
    sopc: Tensor
    total: Tensor
    tau: float

    def as_floats(self) -> dict:
        return {"l1": self.l1.item(), "sopc": self.sopc.item(), "total": self.total.item()}


def _values(cube):
    """Accept Tensors, SpectralCubes and arrays."""
    if isinstance(cube, Tensor):
        return cube
    return as_tensor(np.asarray(getattr(cube, "values", cube)))


def _check_pair(pred: Tensor, gt: Tensor, what: str):
    if tuple(pred.shape) != tuple(gt.shape):
        raise DimensionError(f"{what}: prediction {pred.shape} and ground truth {gt.shape} differ")


def covariance_matrix(cube) -> Tensor:
    """B x B band covariance of a B x H x W cube, via centered inner products."""
    cube = _values(cube)
    if cube.ndim != 3:
        raise DimensionError(f"covariance_matrix expects B x H x W, got {cube.shape}")
    bands = cube.shape[0]
    n = cube.shape[1] * cube.shape[2]
    if n < 2:
        raise ContractError(f"covariance needs at least 2 pixels, got {n}")
    flat = reshape(cube, (bands, n))
    centered = flat - reduce_mean(flat, axes=1, keepdims=True)
    return scale(matmul(centered, transpose(centered)), 1.0 / n)


def sopc_loss(pred, gt) -> Tensor:
    """Mean absolute difference of the two covariance matrices."""
    pred, gt = _values(pred), _values(gt)
    _check_pair(pred, gt, "sopc_loss")
    return reduce_mean(abs_(covariance_matrix(pred) - covariance_matrix(gt)))


def l1_loss(pred, gt) -> Tensor:
    pred, gt = _values(pred), _values(gt)
    _check_pair(pred, gt, "l1_loss")
    return reduce_mean(abs_(pred - gt))


def total_loss(pred, gt, tau: float = 2.0) -> LossBreakdown:
    if tau < 0:
        raise ContractError(f"tau must be >= 0, got {tau}")
    l1 = l1_loss(pred, gt)
    sopc = sopc_loss(pred, gt)
    return LossBreakdown(l1, sopc, l1 + scale(sopc, tau), tau)


def batch_loss(preds: Sequence, gts: Sequence, tau: float = 2.0) -> LossBreakdown:
    """Average of per-sample losses; covariance is taken per cube."""
    if not preds or len(preds) != len(gts):
        raise ContractError(f"batch_loss needs matching non-empty batches, got {len(preds)} and {len(gts)}")
    parts = [total_loss(p, g, tau) for p, g in zip(preds, gts)]
    weight = 1.0 / len(parts)

    def mean_of(attr: str) -> Tensor:
        acc = getattr(parts[0], attr)
        for part in parts[1:]:
            acc = acc + getattr(part, attr)
        return scale(acc, weight)

    return LossBreakdown(mean_of("l1"), mean_of("sopc"), mean_of("total"), tau)
