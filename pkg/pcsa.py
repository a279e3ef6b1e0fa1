#!/usr/bin/env python3
"""
SCSA Engine - Channel Branch (PCSA)

Progressive channel-wise self-attention:

    x_s [B,C,H,W]
      -> compress to a small token grid (adaptive 7x7 by default)
      -> flatten to N tokens, project per channel: Q, K, V in [B,C,N]
      -> A = softmax(Q K^T / scale) over key channels,  X_attn = A V
      -> mean over N -> sigmoid -> per-channel gate on x_s

The attention is between channels; spatial positions are only the tokens
the similarities are measured over. The multi-head variant attends within
`heads` channel blocks and can channel-shuffle the result.

Parameter names under a prefix (default "pcsa"): {prefix}.q.weight,
{prefix}.q.bias, ... {prefix}.v.bias, and {prefix}.norm.gamma/.beta when
pre_norm is on.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Set, Tuple

import numpy as np

import ops
from config import FULL_ATTENTION_BUDGET
from exceptions import ShapeError
from models import PcsaConfig
from tensor import Parameter, ParamStore, Tape, Tensor

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

# (H, W, pooled_h, pooled_w) combinations already reported as clamped
_clamp_warned: Set[Tuple[int, int, int, int]] = set()


@dataclass
class PcsaParams:
    channels: int
    q_w: Parameter
    q_b: Parameter
    k_w: Parameter
    k_b: Parameter
    v_w: Parameter
    v_b: Parameter
    norm_gamma: Optional[Parameter] = None
    norm_beta: Optional[Parameter] = None

    def parameters(self) -> List[Parameter]:
        params = [self.q_w, self.q_b, self.k_w, self.k_b, self.v_w, self.v_b]
        if self.norm_gamma is not None:
            params += [self.norm_gamma, self.norm_beta]
        return params


def init_pcsa_params(store: ParamStore, channels: int, cfg: PcsaConfig,
                     prefix: str = "pcsa") -> PcsaParams:
    """
    Register PCSA parameters: identity projections (weight 1, bias 0).

    Raises:
        ConfigurationError: If heads does not divide channels
    """
    cfg.validate_for(channels)
    proj = {}
    for role in ("q", "k", "v"):
        proj[role] = (store.add(f"{prefix}.{role}.weight", np.ones(channels)),
                      store.add(f"{prefix}.{role}.bias", np.zeros(channels)))
    gamma = beta = None
    if cfg.pre_norm:
        gamma = store.add(f"{prefix}.norm.gamma", np.ones(channels))
        beta = store.add(f"{prefix}.norm.beta", np.zeros(channels))
    logger.debug(f"Initialized {prefix} for C={channels}: {cfg}")
    return PcsaParams(channels, *proj["q"], *proj["k"], *proj["v"], gamma, beta)


# ============================================================================
# COMPRESSION
# ============================================================================

def compressed_grid(height: int, width: int, cfg: PcsaConfig) -> Tuple[int, int]:
    """Token grid (H', W') the channel attention runs on."""
    if not cfg.progressive_compression:
        return height, width
    kh, kw = min(cfg.pooled_h, height), min(cfg.pooled_w, width)
    if cfg.pool_mode == "windowed":
        return height // kh, width // kw
    return kh, kw


def _compress(x: Tensor, cfg: PcsaConfig, tape: Optional[Tape]) -> Tensor:
    _, channels, height, width = x.shape
    if not cfg.progressive_compression:
        cost = channels * (height * width) ** 2
        if cost > FULL_ATTENTION_BUDGET:
            logger.warning(
                f"Attention without compression over {height}x{width} tokens at C={channels} "
                f"costs {cost:,} (budget {FULL_ATTENTION_BUDGET:,})"
            )
        return x
    kh, kw = min(cfg.pooled_h, height), min(cfg.pooled_w, width)
    key = (height, width, cfg.pooled_h, cfg.pooled_w)
    if (kh, kw) != (cfg.pooled_h, cfg.pooled_w) and key not in _clamp_warned:
        _clamp_warned.add(key)
        logger.warning(
            f"Feature map {height}x{width} is smaller than the {cfg.pooled_h}x{cfg.pooled_w} "
            f"pooling grid; clamping to {kh}x{kw}"
        )
    if cfg.pool_mode == "windowed":
        return ops.windowed_avg_pool2d(x, kh, kw, tape=tape)
    return ops.adaptive_avg_pool2d(x, kh, kw, tape=tape)


# ============================================================================
# ATTENTION
# ============================================================================

def _check(x: Tensor, params: PcsaParams, cfg: PcsaConfig) -> None:
    if x.rank != 4:
        raise ShapeError(f"PCSA expects [B,C,H,W] input (got {x.shape})")
    cfg.validate_for(x.shape[1])
    if x.shape[1] != params.channels:
        raise ShapeError(f"PCSA parameters are for C={params.channels}, input has C={x.shape[1]}")
    if cfg.pre_norm and params.norm_gamma is None:
        raise ShapeError("PCSA config has pre_norm on but the parameters carry no norm affine")


def _attend(x_s: Tensor, params: PcsaParams, cfg: PcsaConfig,
            tape: Optional[Tape]) -> Tuple[Tensor, Tensor]:
    """Return (A [B*heads, d, d], V [B*heads, d, N]) with d = C / heads."""
    _check(x_s, params, cfg)
    pooled = _compress(x_s, cfg, tape)
    bsz, channels, ph, pw = pooled.shape
    tokens = ph * pw
    seq = ops.reshape(pooled, (bsz, channels, tokens), tape=tape)
    if cfg.pre_norm:
        seq = ops.group_norm(seq, 1, params.norm_gamma, params.norm_beta, cfg.eps, tape=tape)

    q = ops.per_channel_affine(seq, params.q_w, params.q_b, tape=tape)
    k = ops.per_channel_affine(seq, params.k_w, params.k_b, tape=tape)
    v = ops.per_channel_affine(seq, params.v_w, params.v_b, tape=tape)

    heads = cfg.heads
    depth = channels // heads
    if heads > 1:
        q = ops.reshape(q, (bsz * heads, depth, tokens), tape=tape)
        k = ops.reshape(k, (bsz * heads, depth, tokens), tape=tape)
        v = ops.reshape(v, (bsz * heads, depth, tokens), tape=tape)

    scale = math.sqrt(depth) if cfg.scale_mode == "sqrt_C" else math.sqrt(tokens)
    logits = ops.scale(ops.batched_matmul(q, ops.transpose_last(k, tape=tape), tape=tape),
                       1.0 / scale, tape=tape)
    return ops.softmax_lastdim(logits, tape=tape), v


def channel_attention_matrix(x_s: Tensor, params: PcsaParams, cfg: PcsaConfig) -> Tensor:
    """
    Post-softmax channel attention, [B,C,C] or [B,heads,C/heads,C/heads].

    Every row sums to 1.
    """
    attn, _ = _attend(x_s, params, cfg, None)
    if cfg.heads == 1:
        return attn
    depth = x_s.shape[1] // cfg.heads
    return Tensor(attn.data.reshape(x_s.shape[0], cfg.heads, depth, depth))


def pcsa_forward(x_s: Tensor, params: PcsaParams, cfg: PcsaConfig,
                 tape: Optional[Tape] = None) -> Tensor:
    """
    Apply channel attention; the output has the shape of x_s.

    Raises:
        ConfigurationError: If heads does not divide C
        ShapeError: If x_s is not rank 4 or params belong to another width
    """
    attn, v = _attend(x_s, params, cfg, tape)
    mixed = ops.batched_matmul(attn, v, tape=tape)
    bsz, channels = x_s.shape[:2]
    if cfg.heads > 1:
        mixed = ops.reshape(mixed, (bsz, channels, mixed.shape[-1]), tape=tape)
        if cfg.shuffle:
            mixed = ops.channel_shuffle(mixed, cfg.heads, tape=tape)
    gate = ops.sigmoid(ops.mean_lastdim(mixed, tape=tape), tape=tape)
    return ops.channel_scale(x_s, gate, tape=tape)
