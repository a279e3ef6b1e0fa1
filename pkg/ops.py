#!/usr/bin/env python3
"""
SCSA Engine - Differentiable Operations

Every operation the attention modules and the toy backbone need, each with
an analytic backward pass. Ops are pure functions of their inputs and
parameters: they never mutate a Tensor, and they record themselves on a
Tape only when one is passed in. The single exception is batch_norm1d in
train mode, which updates the running statistics it is handed.

Each differentiable op is registered in DIFFERENTIABLE_OPS under its name.
The gradient-check suite enumerates that registry, so an op added here
without a gradient check shows up as a coverage failure.

Axis conventions:
    rank 4: (B, C, H, W)
    rank 3: (B, C, L) or (B, C, N) for flattened spatial tokens
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import debug_checks_enabled
from exceptions import (
    ConfigurationError,
    DegenerateStatisticsError,
    NonFiniteError,
    ShapeError,
)
from tensor import BackwardFn, Parameter, Tape, Tensor

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

ParamLike = Union[Parameter, Tensor]

# name -> op function, filled by @differentiable
DIFFERENTIABLE_OPS: Dict[str, Callable[..., object]] = {}

# (op name, factor) while a corrupted_backward() block is active
_corruption: ContextVar[Optional[Tuple[str, float]]] = ContextVar("_corruption", default=None)


# ============================================================================
# REGISTRY AND RECORDING HELPERS
# ============================================================================

def differentiable(name: str) -> Callable:
    """Register an op as having an analytic backward pass."""
    def register(fn: Callable) -> Callable:
        DIFFERENTIABLE_OPS[name] = fn
        fn.op_name = name
        return fn
    return register


@contextmanager
def corrupted_backward(op: str, factor: float = 1.1) -> Iterator[None]:
    """
    Scale the first input gradient of one op while the block is active.

    Negative control for the gradient checker: a correct oracle must flag
    every check that exercises the corrupted op.
    """
    if op not in DIFFERENTIABLE_OPS:
        raise ConfigurationError(f"Unknown op '{op}'")
    token = _corruption.set((op, factor))
    try:
        yield
    finally:
        _corruption.reset(token)


def _corrupt(backward: BackwardFn, factor: float) -> BackwardFn:
    def corrupted(g: np.ndarray) -> List[Optional[np.ndarray]]:
        grads = list(backward(g))
        for i, grad in enumerate(grads):
            if grad is not None:
                grads[i] = grad * factor
                break
        return grads
    return corrupted


def _check_finite(op: str, data: np.ndarray) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        coords = [tuple(int(i) for i in idx) for idx in np.argwhere(bad)]
        raise NonFiniteError(f"{op} produced non-finite output", coords)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray,
          backward: BackwardFn, tape: Optional[Tape]) -> Tensor:
    out = Tensor(data)
    if debug_checks_enabled():
        _check_finite(op, out.data)
    if tape is not None:
        corruption = _corruption.get()
        if corruption is not None and corruption[0] == op:
            backward = _corrupt(backward, corruption[1])
        tape.record(op, inputs, out, backward)
    return out


def _value(p: Optional[ParamLike], tape: Optional[Tape]) -> Optional[Tensor]:
    if p is None:
        return None
    if isinstance(p, Parameter):
        return tape.watch(p) if tape is not None else p.value
    return p


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.rank != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor (got shape {x.shape})")


def _require_shape(t: Tensor, shape: Tuple[int, ...], what: str) -> None:
    if t.shape != tuple(shape):
        raise ShapeError(f"{what} must have shape {tuple(shape)} (got {t.shape})")


# ============================================================================
# DECOMPOSITION: DIRECTIONAL POOLING, SPLIT, CONCAT
# ============================================================================

@differentiable("avg_pool_over_height")
def avg_pool_over_height(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """[B,C,H,W] -> [B,C,W], mean over H."""
    _require_rank(x, 4, "avg_pool_over_height")
    h = x.shape[2]
    data = x.data.sum(axis=2) / h

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, :] / h, x.shape).copy(),)

    return _emit("avg_pool_over_height", (x,), data, backward, tape)


@differentiable("avg_pool_over_width")
def avg_pool_over_width(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """[B,C,H,W] -> [B,C,H], mean over W."""
    _require_rank(x, 4, "avg_pool_over_width")
    w = x.shape[3]
    data = x.data.sum(axis=3) / w

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[:, :, :, None] / w, x.shape).copy(),)

    return _emit("avg_pool_over_width", (x,), data, backward, tape)


@differentiable("channel_split")
def channel_split(x: Tensor, k: int, *, tape: Optional[Tape] = None) -> List[Tensor]:
    """
    Split channels into k equal consecutive blocks.

    Part i holds channels [i*C/k, (i+1)*C/k).

    Raises:
        ConfigurationError: If C is not divisible by k
    """
    if x.rank < 2:
        raise ShapeError(f"channel_split needs a channel axis (got shape {x.shape})")
    channels = x.shape[1]
    if k < 1 or channels % k != 0:
        raise ConfigurationError(f"Cannot split {channels} channels into {k} equal parts")
    width = channels // k
    parts = []
    for i in range(k):
        lo, hi = i * width, (i + 1) * width

        def backward(g: np.ndarray, lo: int = lo, hi: int = hi):
            full = np.zeros_like(x.data, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        parts.append(_emit("channel_split", (x,), x.data[:, lo:hi].copy(), backward, tape))
    return parts


@differentiable("concat_channels")
def concat_channels(parts: Sequence[Tensor], *, tape: Optional[Tape] = None) -> Tensor:
    """
    Concatenate along the channel axis, order preserved.

    Raises:
        ShapeError: If parts disagree on any non-channel extent
    """
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.rank != len(ref) or p.shape[:1] != ref[:1] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"Cannot concatenate shapes {ref} and {p.shape} along channels")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))

    return _emit("concat_channels", tuple(parts), data, backward, tape)


# ============================================================================
# DEPTH-WISE 1D CONVOLUTION
# ============================================================================

@differentiable("dwconv1d")
def dwconv1d(x: Tensor, weight: ParamLike, bias: Optional[ParamLike] = None,
             *, tape: Optional[Tape] = None) -> Tensor:
    """
    Depth-wise 1D convolution with symmetric zero padding (k-1)/2.

    out[b,c,l] = sum_j w[c,j] * x_padded[b,c,l+j] (+ bias[c])

    Args:
        x: [B, c, L]
        weight: [c, k], k odd
        bias: optional [c]

    Raises:
        ConfigurationError: If k is even
        ShapeError: If weight/bias channel counts differ from x
    """
    _require_rank(x, 3, "dwconv1d")
    w = _value(weight, tape)
    b = _value(bias, tape)
    _, c, length = x.shape
    if w.rank != 2 or w.shape[0] != c:
        raise ShapeError(f"dwconv1d weight must be [{c}, k] (got {w.shape})")
    k = w.shape[1]
    if k % 2 == 0:
        raise ConfigurationError(f"dwconv1d kernel size must be odd (got {k})")
    if b is not None:
        _require_shape(b, (c,), "dwconv1d bias")

    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    data = np.zeros(x.shape, dtype=np.result_type(x.data, w.data))
    for j in range(k):
        data += w.data[None, :, j, None] * xp[:, :, j:j + length]
    if b is not None:
        data += b.data[None, :, None]

    def backward(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.zeros(w.shape, dtype=g.dtype)
        for j in range(k):
            gxp[:, :, j:j + length] += g * w.data[None, :, j, None]
            gw[:, j] = (g * xp[:, :, j:j + length]).sum(axis=(0, 2))
        grads = [gxp[:, :, pad:pad + length].copy(), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("dwconv1d", inputs, data, backward, tape)


# ============================================================================
# NORMALIZATION
# ============================================================================

@differentiable("group_norm")
def group_norm(x: Tensor, groups: int, gamma: ParamLike, beta: ParamLike,
               eps: float = 1e-5, *, tape: Optional[Tape] = None) -> Tensor:
    """
    Group normalization over [B, C, L] with per-channel affine.

    Each (sample, group) slab of (C/groups)*L values is normalized with its
    own mean and population variance.

    Raises:
        ConfigurationError: If C is not divisible by groups or eps <= 0
    """
    _require_rank(x, 3, "group_norm")
    bsz, channels, length = x.shape
    if groups < 1 or channels % groups != 0:
        raise ConfigurationError(f"group_norm: {channels} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ConfigurationError(f"group_norm: eps must be positive (got {eps})")
    gam = _value(gamma, tape)
    bet = _value(beta, tape)
    _require_shape(gam, (channels,), "group_norm gamma")
    _require_shape(bet, (channels,), "group_norm beta")

    xg = x.data.reshape(bsz, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).reshape(x.shape)
    data = xhat * gam.data[None, :, None] + bet.data[None, :, None]

    def backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = (g * gam.data[None, :, None]).reshape(bsz, groups, -1)
        xh = xhat.reshape(bsz, groups, -1)
        gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return _emit("group_norm", (x, gam, bet), data, backward, tape)


@dataclass
class RunningStats:
    """Batch-norm running statistics, mutated in place in train mode."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


@differentiable("batch_norm1d")
def batch_norm1d(x: Tensor, gamma: ParamLike, beta: ParamLike, eps: float = 1e-5,
                 mode: str = "train", running: Optional[RunningStats] = None,
                 *, tape: Optional[Tape] = None) -> Tensor:
    """
    Per-channel batch normalization over [B, C, L].

    Train mode normalizes with statistics over the B*L values of each
    channel and folds them into running (unbiased variance, momentum
    running.momentum). Eval mode normalizes with running.

    Raises:
        DegenerateStatisticsError: If B*L < 2 in train mode
        ConfigurationError: For an unknown mode, eval without running
            statistics, or a tape in eval mode
    """
    _require_rank(x, 3, "batch_norm1d")
    bsz, channels, length = x.shape
    gam = _value(gamma, tape)
    bet = _value(beta, tape)
    _require_shape(gam, (channels,), "batch_norm1d gamma")
    _require_shape(bet, (channels,), "batch_norm1d beta")

    if mode == "eval":
        if running is None:
            raise ConfigurationError("batch_norm1d eval mode needs running statistics")
        if tape is not None:
            raise ConfigurationError("batch_norm1d records a backward pass only in train mode")
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean[None, :, None]) * inv[None, :, None]
        return Tensor(xhat * gam.data[None, :, None] + bet.data[None, :, None])
    if mode != "train":
        raise ConfigurationError(f"batch_norm1d mode must be 'train' or 'eval' (got '{mode}')")

    count = bsz * length
    if count < 2:
        raise DegenerateStatisticsError(
            f"batch_norm1d needs at least 2 values per channel in train mode (B*L={count})"
        )
    mean = x.data.mean(axis=(0, 2))
    centered = x.data - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    if running is not None:
        m = running.momentum
        running.mean[...] = (1.0 - m) * running.mean + m * mean
        running.var[...] = (1.0 - m) * running.var + m * var * count / (count - 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None]
    data = xhat * gam.data[None, :, None] + bet.data[None, :, None]

    def backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = g * gam.data[None, :, None]
        gx = inv[None, :, None] * (
            dxhat - dxhat.mean(axis=(0, 2), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
        )
        return gx, ggamma, gbeta

    return _emit("batch_norm1d", (x, gam, bet), data, backward, tape)


# ============================================================================
# ACTIVATIONS
# ============================================================================

def _sigmoid_values(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@differentiable("sigmoid")
def sigmoid(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise logistic function, evaluated without overflow."""
    s = _sigmoid_values(x.data)

    def backward(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", (x,), s, backward, tape)


@differentiable("softmax_lastdim")
def softmax_lastdim(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", (x,), s, backward, tape)


@differentiable("relu")
def relu(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0).astype(x.data.dtype), backward, tape)


# ============================================================================
# SPATIAL COMPRESSION
# ============================================================================

def adaptive_pool_bounds(n_in: int, n_out: int) -> List[Tuple[int, int]]:
    """Window [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)) for each output cell."""
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


@differentiable("adaptive_avg_pool2d")
def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int,
                        *, tape: Optional[Tape] = None) -> Tensor:
    """
    Average-pool [B,C,H,W] to [B,C,out_h,out_w] with adaptive windows.

    Raises:
        ConfigurationError: If an output extent exceeds the input extent
    """
    _require_rank(x, 4, "adaptive_avg_pool2d")
    bsz, channels, height, width = x.shape
    if not (1 <= out_h <= height and 1 <= out_w <= width):
        raise ConfigurationError(
            f"adaptive_avg_pool2d output ({out_h}, {out_w}) must fit input ({height}, {width})"
        )
    rows = adaptive_pool_bounds(height, out_h)
    cols = adaptive_pool_bounds(width, out_w)
    data = np.empty((bsz, channels, out_h, out_w), dtype=x.data.dtype)
    for i, (hs, he) in enumerate(rows):
        for j, (ws, we) in enumerate(cols):
            data[:, :, i, j] = x.data[:, :, hs:he, ws:we].sum(axis=(2, 3)) / ((he - hs) * (we - ws))

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, (hs, he) in enumerate(rows):
            for j, (ws, we) in enumerate(cols):
                gx[:, :, hs:he, ws:we] += (g[:, :, i, j] / ((he - hs) * (we - ws)))[:, :, None, None]
        return (gx,)

    return _emit("adaptive_avg_pool2d", (x,), data, backward, tape)


@differentiable("windowed_avg_pool2d")
def windowed_avg_pool2d(x: Tensor, kernel_h: int, kernel_w: int,
                        *, tape: Optional[Tape] = None) -> Tensor:
    """
    Non-overlapping average pooling (stride == kernel, trailing rows dropped).

    Raises:
        ConfigurationError: If a kernel extent exceeds the input extent
    """
    _require_rank(x, 4, "windowed_avg_pool2d")
    bsz, channels, height, width = x.shape
    if not (1 <= kernel_h <= height and 1 <= kernel_w <= width):
        raise ConfigurationError(
            f"windowed_avg_pool2d kernel ({kernel_h}, {kernel_w}) must fit input ({height}, {width})"
        )
    out_h, out_w = height // kernel_h, width // kernel_w
    area = kernel_h * kernel_w
    crop = x.data[:, :, :out_h * kernel_h, :out_w * kernel_w]
    data = crop.reshape(bsz, channels, out_h, kernel_h, out_w, kernel_w).sum(axis=(3, 5)) / area

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        spread = np.repeat(np.repeat(g / area, kernel_h, axis=2), kernel_w, axis=3)
        gx[:, :, :out_h * kernel_h, :out_w * kernel_w] = spread
        return (gx,)

    return _emit("windowed_avg_pool2d", (x,), data, backward, tape)


# ============================================================================
# PROJECTIONS AND MATRIX PRODUCTS
# ============================================================================

@differentiable("per_channel_affine")
def per_channel_affine(x: Tensor, weight: ParamLike, bias: Optional[ParamLike] = None,
                       *, tape: Optional[Tape] = None) -> Tensor:
    """out[b,c,n] = w[c] * x[b,c,n] + bias[c] (a kernel-1 depth-wise projection)."""
    _require_rank(x, 3, "per_channel_affine")
    channels = x.shape[1]
    w = _value(weight, tape)
    b = _value(bias, tape)
    _require_shape(w, (channels,), "per_channel_affine weight")
    data = x.data * w.data[None, :, None]
    if b is not None:
        _require_shape(b, (channels,), "per_channel_affine bias")
        data = data + b.data[None, :, None]

    def backward(g: np.ndarray):
        grads = [g * w.data[None, :, None], (g * x.data).sum(axis=(0, 2))]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("per_channel_affine", inputs, data, backward, tape)


@differentiable("batched_matmul")
def batched_matmul(a: Tensor, b: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """[B,M,P] @ [B,P,N] -> [B,M,N]."""
    _require_rank(a, 3, "batched_matmul")
    _require_rank(b, 3, "batched_matmul")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul: incompatible shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g: np.ndarray):
        return np.matmul(g, b.data.swapaxes(1, 2)), np.matmul(a.data.swapaxes(1, 2), g)

    return _emit("batched_matmul", (a, b), data, backward, tape)


@differentiable("transpose_last")
def transpose_last(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Swap the last two axes."""
    if x.rank < 2:
        raise ShapeError(f"transpose_last needs rank >= 2 (got {x.shape})")

    def backward(g: np.ndarray):
        return (np.ascontiguousarray(g.swapaxes(-1, -2)),)

    return _emit("transpose_last", (x,), x.data.swapaxes(-1, -2), backward, tape)


@differentiable("scale")
def scale(x: Tensor, factor: float, *, tape: Optional[Tape] = None) -> Tensor:
    """Multiply by a constant."""
    def backward(g: np.ndarray):
        return (g * factor,)

    return _emit("scale", (x,), x.data * factor, backward, tape)


@differentiable("reshape")
def reshape(x: Tensor, shape: Sequence[int], *, tape: Optional[Tape] = None) -> Tensor:
    """Row-major reshape; the element count must not change."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"Cannot reshape {x.shape} to {shape}")

    def backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), x.data.reshape(shape), backward, tape)


@differentiable("mean_lastdim")
def mean_lastdim(x: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Mean over the last axis: [..., N] -> [...]."""
    if x.rank < 2:
        raise ShapeError(f"mean_lastdim needs rank >= 2 (got {x.shape})")
    n = x.shape[-1]

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[..., None] / n, x.shape).copy(),)

    return _emit("mean_lastdim", (x,), x.data.sum(axis=-1) / n, backward, tape)


# ============================================================================
# GATING
# ============================================================================

@differentiable("broadcast_mul3")
def broadcast_mul3(x: Tensor, attn_row: Tensor, attn_col: Tensor,
                   *, tape: Optional[Tape] = None) -> Tensor:
    """
    out[b,c,h,w] = x[b,c,h,w] * attn_row[b,c,w] * attn_col[b,c,h]

    attn_row varies along W and broadcasts along H; attn_col varies along H
    and broadcasts along W.

    Raises:
        ShapeError: If either factor does not broadcast against x
    """
    _require_rank(x, 4, "broadcast_mul3")
    bsz, channels, height, width = x.shape
    if attn_row.shape != (bsz, channels, width) or attn_col.shape != (bsz, channels, height):
        raise ShapeError(
            f"broadcast_mul3: factors {attn_row.shape} and {attn_col.shape} do not broadcast "
            f"against {x.shape} (expected {(bsz, channels, width)} and {(bsz, channels, height)})"
        )
    row = attn_row.data[:, :, None, :]
    col = attn_col.data[:, :, :, None]
    data = x.data * row * col

    def backward(g: np.ndarray):
        return (g * row * col,
                (g * x.data * col).sum(axis=2),
                (g * x.data * row).sum(axis=3))

    return _emit("broadcast_mul3", (x, attn_row, attn_col), data, backward, tape)


@differentiable("channel_scale")
def channel_scale(x: Tensor, gate: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """out[b,c,h,w] = x[b,c,h,w] * gate[b,c]."""
    _require_rank(x, 4, "channel_scale")
    _require_shape(gate, x.shape[:2], "channel_scale gate")
    g4 = gate.data[:, :, None, None]

    def backward(g: np.ndarray):
        return g * g4, (g * x.data).sum(axis=(2, 3))

    return _emit("channel_scale", (x, gate), x.data * g4, backward, tape)


# ============================================================================
# CHANNEL SHUFFLE
# ============================================================================

def _shuffle(data: np.ndarray, groups: int) -> np.ndarray:
    bsz, channels = data.shape[:2]
    rest = data.shape[2:]
    grouped = data.reshape((bsz, groups, channels // groups) + rest)
    return np.ascontiguousarray(grouped.swapaxes(1, 2)).reshape(data.shape)


def _check_shuffle(x: Tensor, groups: int, op: str) -> None:
    if x.rank < 2:
        raise ShapeError(f"{op} needs a channel axis (got {x.shape})")
    if groups < 1 or x.shape[1] % groups != 0:
        raise ConfigurationError(f"{op}: {x.shape[1]} channels not divisible by {groups} groups")


@differentiable("channel_shuffle")
def channel_shuffle(x: Tensor, groups: int, *, tape: Optional[Tape] = None) -> Tensor:
    """(groups, C/groups) -> transpose -> flatten channel permutation."""
    _check_shuffle(x, groups, "channel_shuffle")
    inverse_groups = x.shape[1] // groups

    def backward(g: np.ndarray):
        return (_shuffle(g, inverse_groups),)

    return _emit("channel_shuffle", (x,), _shuffle(x.data, groups), backward, tape)


@differentiable("channel_unshuffle")
def channel_unshuffle(x: Tensor, groups: int, *, tape: Optional[Tape] = None) -> Tensor:
    """Inverse permutation of channel_shuffle(x, groups)."""
    _check_shuffle(x, groups, "channel_unshuffle")
    inverse_groups = x.shape[1] // groups

    def backward(g: np.ndarray):
        return (_shuffle(g, groups),)

    return _emit("channel_unshuffle", (x,), _shuffle(x.data, inverse_groups), backward, tape)


# ============================================================================
# BACKBONE OPS
# ============================================================================

@differentiable("conv2d")
def conv2d(x: Tensor, weight: ParamLike, bias: Optional[ParamLike] = None,
           stride: int = 1, padding: int = 0, *, tape: Optional[Tape] = None) -> Tensor:
    """
    Dense 2D convolution, [B,I,H,W] * [O,I,kh,kw] -> [B,O,H',W'].

    Raises:
        ShapeError: On channel mismatch or a kernel larger than the padded input
    """
    _require_rank(x, 4, "conv2d")
    w = _value(weight, tape)
    b = _value(bias, tape)
    if w.rank != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d weight {w.shape} does not match input {x.shape}")
    out_c, _, kh, kw = w.shape
    if b is not None:
        _require_shape(b, (out_c,), "conv2d bias")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d stride must be >= 1 and padding >= 0")
    height, width = x.shape[2:]
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than padded input {(height, width)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum("bihwkl,oikl->bohw", windows, w.data, optimize=True)
    if b is not None:
        data = data + b.data[None, :, None, None]
    out_h, out_w = data.shape[2:]

    def backward(g: np.ndarray):
        gw = np.einsum("bohw,bihwkl->oikl", g, windows, optimize=True)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                    j:j + stride * (out_w - 1) + 1:stride] += np.einsum(
                        "bohw,oi->bihw", g, w.data[:, :, i, j], optimize=True)
        grads = [gxp[:, :, padding:padding + height, padding:padding + width].copy(), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, data, backward, tape)


@differentiable("add")
def add(a: Tensor, b: Tensor, *, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise sum of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g: np.ndarray):
        return g, g

    return _emit("add", (a, b), a.data + b.data, backward, tape)


@differentiable("linear")
def linear(x: Tensor, weight: ParamLike, bias: Optional[ParamLike] = None,
           *, tape: Optional[Tape] = None) -> Tensor:
    """[B,F] @ [F,O] (+ bias[O])."""
    _require_rank(x, 2, "linear")
    w = _value(weight, tape)
    b = _value(bias, tape)
    if w.rank != 2 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"linear weight {w.shape} does not match input {x.shape}")
    data = x.data @ w.data
    if b is not None:
        _require_shape(b, (w.shape[1],), "linear bias")
        data = data + b.data[None, :]

    def backward(g: np.ndarray):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", inputs, data, backward, tape)


@differentiable("cross_entropy")
def cross_entropy(logits: Tensor, labels: np.ndarray, *, tape: Optional[Tape] = None) -> Tensor:
    """
    Mean softmax cross-entropy; returns a shape-(1,) tensor.

    Raises:
        ShapeError: If labels do not match the batch or fall outside [0, K)
    """
    _require_rank(logits, 2, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    bsz, num_classes = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({bsz},)")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(f"cross_entropy: labels must lie in [0, {num_classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(bsz)
    loss = (log_z - shifted[rows, labels]).mean()
    probs = np.exp(shifted - log_z[:, None])

    def backward(g: np.ndarray):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g[0] / bsz),)

    return _emit("cross_entropy", (logits,), np.array([loss], dtype=logits.data.dtype), backward, tape)
