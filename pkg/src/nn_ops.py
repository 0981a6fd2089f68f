"""
Neural building blocks on top of the tensor engine.

Layers are Module subclasses that own their parameters; the functional ops
(conv2d, prelu, sigmoid, softmax, local_avg_pool, multi_head_self_attention)
are differentiable primitives with hand-written backward rules.

Feature maps are unbatched: C x H x W.
"""

import math
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from checkpoint import check_compatible
from hprn_errors import ContractError, DimensionError
from tensor_engine import (
    Tensor,
    batched_matmul,
    matmul,
    note_kink,
    permute,
    reshape,
    scale,
    transpose,
)

PRELU_INIT = 0.25


# ========================================
# Module container
# ========================================
class Module:
    """Parameter container. Parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        found = []
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            full = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    found.append((full, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{full}.{i}."))
        return found

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy values in, keeping each parameter's dtype. Names and shapes must match exactly."""
        params = self.named_parameters()
        check_compatible(state, {name: p.shape for name, p in params})
        for name, p in params:
            p.data = np.array(state[name], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(values: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), dtype)


# ========================================
# Layers
# ========================================
class Conv2DLayer(Module):
    """Stride-1, zero-padded, spatial-size preserving convolution with k in {1, 3}."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, dtype=np.float64):
        if kernel not in (1, 3):
            raise ContractError(f"kernel must be 1 or 3, got {kernel}")
        if in_channels < 1 or out_channels < 1:
            raise ContractError(f"channel counts must be >= 1, got {in_channels} -> {out_channels}")
        self.weight = fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), in_channels * kernel * kernel, dtype)
        self.bias = parameter(np.zeros(out_channels), dtype)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


class Linear(Module):
    """Fully connected layer applied row-wise: N x in -> N x out."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = fan_in_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = parameter(np.zeros(out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, transpose(self.weight)) + self.bias


class PReLU(Module):
    def __init__(self, channels: int = 1, dtype=np.float64):
        self.slope = parameter(np.full(channels, PRELU_INIT), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


class MultiHeadAttention(Module):
    """
    Standard multi-head self-attention with four fully connected projections.

    Args:
        dim: Token dimension d
        heads: Head count h; must divide d
        rng: Initialization generator
        attention_scaling: Divide logits by sqrt(d / h)
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64, attention_scaling: bool = True):
        if heads < 1 or dim % heads:
            raise ContractError(f"token dim {dim} is not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.attention_scaling = attention_scaling
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.output = Linear(dim, dim, rng, dtype)

    def forward(self, tokens: Tensor, return_attention: bool = False):
        return multi_head_self_attention(tokens, self, return_attention=return_attention)


# ========================================
# Functional primitives
# ========================================
def conv2d(x: Tensor, layer: Conv2DLayer) -> Tensor:
    return conv2d_raw(x, layer.weight, layer.bias)


def conv2d_raw(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padding cross-correlation plus bias; C_in x H x W -> C_out x H x W."""
    if x.ndim != 3:
        raise DimensionError(f"conv2d: expected C x H x W input, got {x.shape}")
    if x.shape[0] != weight.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, layer expects {weight.shape[1]} (weight {weight.shape})")
    k = weight.shape[2]
    pad = (k - 1) // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(padded, (k, k), axis=(1, 2))
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [0, 3, 4])) + bias.data[:, None, None]

    def backward(g):
        grad_w = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        grad_b = g.sum(axis=(1, 2))
        flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        g_cols = sliding_window_view(np.pad(g, ((0, 0), (pad, pad), (pad, pad))), (k, k), axis=(1, 2))
        grad_x = np.tensordot(flipped, g_cols, axes=([1, 2, 3], [0, 3, 4]))
        return grad_x, grad_w, grad_b

    return Tensor.from_op(out, (x, weight, bias), backward, "conv2d")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x if x > 0 else slope * x, slope per channel (axis 0) or shared."""
    n_slopes = slope.numel()
    if x.ndim == 0 or (n_slopes != 1 and n_slopes != x.shape[0]):
        raise DimensionError(f"prelu: {n_slopes} slopes for input of shape {x.shape}")
    note_kink(x.data)
    s = slope.data.reshape((n_slopes,) + (1,) * (x.ndim - 1))
    positive = x.data > 0
    out = np.where(positive, x.data, s * x.data)

    def backward(g):
        grad_x = g * np.where(positive, 1.0, s)
        per_entry = np.where(positive, 0.0, g * x.data)
        if n_slopes == 1:
            grad_s = per_entry.sum().reshape(slope.shape)
        else:
            grad_s = per_entry.sum(axis=tuple(range(1, x.ndim))).reshape(slope.shape)
        return grad_x.astype(x.dtype), grad_s.astype(slope.dtype)

    return Tensor.from_op(out.astype(x.dtype), (x, slope), backward, "prelu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor.from_op(out, (x,), backward, "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} is invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def cell_bounds(size: int, cells: int) -> List[int]:
    """Cell edges floor(i * size / cells) for i = 0..cells."""
    return [(i * size) // cells for i in range(cells + 1)]


def local_avg_pool(x: Tensor, grid: Tuple[int, int]) -> Tensor:
    """Average each channel over a gh x gw partition: C x H x W -> C x gh x gw."""
    if x.ndim != 3:
        raise DimensionError(f"local_avg_pool: expected C x H x W, got {x.shape}")
    gh, gw = grid
    _, height, width = x.shape
    if gh < 1 or gw < 1 or gh > height or gw > width:
        raise ContractError(f"local_avg_pool: grid {gh}x{gw} does not fit spatial size {height}x{width}")
    rows, cols = cell_bounds(height, gh), cell_bounds(width, gw)
    out = np.empty((x.shape[0], gh, gw), dtype=x.dtype)
    for i in range(gh):
        for j in range(gw):
            out[:, i, j] = x.data[:, rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean(axis=(1, 2))

    def backward(g):
        grad = np.empty_like(x.data)
        for i in range(gh):
            for j in range(gw):
                count = (rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])
                grad[:, rows[i]:rows[i + 1], cols[j]:cols[j + 1]] = (g[:, i, j] / count)[:, None, None]
        return (grad,)

    return Tensor.from_op(out, (x,), backward, "local_avg_pool")


def cell_upsample(pooled: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour inverse of local_avg_pool's partition (no gradient)."""
    _, gh, gw = pooled.shape
    rows, cols = cell_bounds(size[0], gh), cell_bounds(size[1], gw)
    row_index = np.repeat(np.arange(gh), np.diff(rows))
    col_index = np.repeat(np.arange(gw), np.diff(cols))
    return pooled[:, row_index][:, :, col_index]


def multi_head_self_attention(tokens: Tensor, mha: MultiHeadAttention, return_attention: bool = False):
    """
    Self-attention over the rows of tokens (C x d): the C channels are the sequence.

    Per head: A = softmax(Q K^T / sqrt(d/h)); heads are concatenated and passed
    through the output projection.

    Returns:
        C x d Tensor, or (Tensor, h x C x C attention Tensor) when return_attention is set
    """
    if tokens.ndim != 2 or tokens.shape[1] != mha.dim:
        raise DimensionError(f"attention: expected tokens of shape C x {mha.dim}, got {tokens.shape}")
    n_tokens = tokens.shape[0]
    heads = mha.heads
    head_dim = mha.dim // heads

    def split_heads(t: Tensor) -> Tensor:
        return permute(reshape(t, (n_tokens, heads, head_dim)), (1, 0, 2))

    q = split_heads(mha.query(tokens))
    k = split_heads(mha.key(tokens))
    v = split_heads(mha.value(tokens))

    logits = batched_matmul(q, transpose(k))
    if mha.attention_scaling:
        logits = scale(logits, 1.0 / math.sqrt(head_dim))
    attention = softmax(logits, axis=-1)
    context = batched_matmul(attention, v)
    merged = reshape(permute(context, (1, 0, 2)), (n_tokens, mha.dim))
    out = mha.output(merged)
    if return_attention:
        return out, attention
    return out
