#!/usr/bin/env python3
"""
SCSA Engine - Spatial Branch (SMSA)

Shareable multi-semantic spatial attention:

    x [B,C,H,W]
      -> mean over H  -> X_H [B,C,W]      mean over W -> X_W [B,C,H]
      -> split each sequence into K sub-features of C/K channels
      -> depth-wise 1D conv, kernel k_i on sub-feature i
         (the same kernels serve both branches unless unshared)
      -> concat -> normalize (GN with K groups, or BN) -> sigmoid
      -> x * attn_h (varies along W) * attn_w (varies along H)

With gn_position='pre_conv' the normalization runs before the split.

Parameter names under a prefix (default "smsa"):
    {prefix}.conv.{i}.weight      [C/K, k_i]
    {prefix}.conv_w.{i}.weight    W-branch kernels, unshared only
    {prefix}.conv.{i}.bias        with conv_bias
    {prefix}.gn_h.gamma / .beta   or bn_h.* plus running_mean / running_var buffers
    {prefix}.gn_w.gamma / .beta   or bn_w.*
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

import ops
from exceptions import ShapeError
from models import SmsaConfig
from ops import RunningStats
from tensor import Parameter, ParamStore, Tape, Tensor

__version__ = "1.0.0"

logger = logging.getLogger(__name__)


@dataclass
class SmsaParams:
    """
    Typed view over the SMSA parameters of one module instance.

    When kernels are shared, conv_h and conv_w hold the same Parameter
    objects, so gradients from both branches accumulate into one grad.
    """
    channels: int
    conv_h: List[Parameter]
    conv_w: List[Parameter]
    bias_h: List[Optional[Parameter]]
    bias_w: List[Optional[Parameter]]
    norm_h: Tuple[Parameter, Parameter]
    norm_w: Tuple[Parameter, Parameter]
    running_h: Optional[RunningStats] = None
    running_w: Optional[RunningStats] = None

    def parameters(self) -> List[Parameter]:
        """Distinct parameters, in registration order."""
        seen, unique = set(), []
        for p in (*self.conv_h, *self.conv_w, *self.bias_h, *self.bias_w,
                  *self.norm_h, *self.norm_w):
            if p is not None and id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        return unique


def _kernels(store: ParamStore, name: str, cfg: SmsaConfig, width: int,
             rng: np.random.Generator) -> Tuple[List[Parameter], List[Optional[Parameter]]]:
    kernels, biases = [], []
    for i, k in enumerate(cfg.kernel_sizes):
        bound = 1.0 / np.sqrt(k)
        kernels.append(store.add(f"{name}.{i}.weight", rng.uniform(-bound, bound, size=(width, k))))
        biases.append(store.add(f"{name}.{i}.bias", np.zeros(width)) if cfg.conv_bias else None)
    return kernels, biases


def init_smsa_params(store: ParamStore, channels: int, cfg: SmsaConfig,
                     rng: np.random.Generator, prefix: str = "smsa") -> SmsaParams:
    """
    Register SMSA parameters for a host with `channels` channels.

    Kernels are drawn uniform in +-1/sqrt(k_i); norm affines start at
    gamma=1, beta=0 and BN running statistics at mean 0, variance 1.

    Raises:
        ConfigurationError: If channels is not divisible by k_groups
    """
    cfg.validate_for(channels)
    width = channels // cfg.k_groups
    conv_h, bias_h = _kernels(store, f"{prefix}.conv", cfg, width, rng)
    if cfg.conv_sharing == "shared":
        conv_w, bias_w = conv_h, bias_h
    else:
        conv_w, bias_w = _kernels(store, f"{prefix}.conv_w", cfg, width, rng)

    norm_params, running = {}, {}
    for branch in ("h", "w"):
        name = f"{prefix}.{cfg.norm}_{branch}"
        norm_params[branch] = (store.add(f"{name}.gamma", np.ones(channels)),
                               store.add(f"{name}.beta", np.zeros(channels)))
        if cfg.norm == "bn":
            running[branch] = RunningStats(
                mean=store.add_buffer(f"{name}.running_mean", np.zeros(channels)),
                var=store.add_buffer(f"{name}.running_var", np.ones(channels)),
                momentum=cfg.bn_momentum,
            )
    logger.debug(f"Initialized {prefix} for C={channels}: {cfg}")
    return SmsaParams(channels, conv_h, conv_w, bias_h, bias_w,
                      norm_params["h"], norm_params["w"],
                      running.get("h"), running.get("w"))


# ============================================================================
# FORWARD
# ============================================================================

def _normalize(seq: Tensor, affine: Tuple[Parameter, Parameter], running: Optional[RunningStats],
               cfg: SmsaConfig, tape: Optional[Tape], training: bool) -> Tensor:
    gamma, beta = affine
    if cfg.norm == "gn":
        return ops.group_norm(seq, cfg.k_groups, gamma, beta, cfg.eps, tape=tape)
    mode = "train" if training else "eval"
    return ops.batch_norm1d(seq, gamma, beta, cfg.eps, mode=mode, running=running, tape=tape)


def _branch(seq: Tensor, kernels: List[Parameter], biases: List[Optional[Parameter]],
            affine: Tuple[Parameter, Parameter], running: Optional[RunningStats],
            cfg: SmsaConfig, tape: Optional[Tape], training: bool) -> Tensor:
    if cfg.gn_position == "pre_conv":
        seq = _normalize(seq, affine, running, cfg, tape, training)
    parts = ops.channel_split(seq, cfg.k_groups, tape=tape)
    convolved = [ops.dwconv1d(part, w, b, tape=tape) for part, w, b in zip(parts, kernels, biases)]
    seq = ops.concat_channels(convolved, tape=tape)
    if cfg.gn_position == "post_conv":
        seq = _normalize(seq, affine, running, cfg, tape, training)
    if cfg.gate == "softmax":
        return ops.softmax_lastdim(seq, tape=tape)
    return ops.sigmoid(seq, tape=tape)


def _check(x: Tensor, params: SmsaParams, cfg: SmsaConfig) -> None:
    if x.rank != 4:
        raise ShapeError(f"SMSA expects [B,C,H,W] input (got {x.shape})")
    cfg.validate_for(x.shape[1])
    if x.shape[1] != params.channels:
        raise ShapeError(f"SMSA parameters are for C={params.channels}, input has C={x.shape[1]}")
    if len(params.conv_h) != cfg.k_groups:
        raise ShapeError(
            f"SMSA parameters hold {len(params.conv_h)} kernels, config expects {cfg.k_groups}"
        )


def smsa_attention_maps(x: Tensor, params: SmsaParams, cfg: SmsaConfig,
                        tape: Optional[Tape] = None, training: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Compute the two spatial attention maps.

    Returns:
        (attn_h [B,C,W], attn_w [B,C,H]): attn_h is derived from the
        height-pooled sequence and varies along W; attn_w varies along H.
    """
    _check(x, params, cfg)
    x_h = ops.avg_pool_over_height(x, tape=tape)
    x_w = ops.avg_pool_over_width(x, tape=tape)
    attn_h = _branch(x_h, params.conv_h, params.bias_h, params.norm_h, params.running_h,
                     cfg, tape, training)
    attn_w = _branch(x_w, params.conv_w, params.bias_w, params.norm_w, params.running_w,
                     cfg, tape, training)
    return attn_h, attn_w


def smsa_forward(x: Tensor, params: SmsaParams, cfg: SmsaConfig,
                 tape: Optional[Tape] = None, training: bool = True) -> Tensor:
    """
    Apply spatial attention; the output has the shape of x.

    Raises:
        ConfigurationError: If C is not divisible by k_groups
        ShapeError: If x is not rank 4 or params belong to another width
    """
    attn_h, attn_w = smsa_attention_maps(x, params, cfg, tape=tape, training=training)
    return ops.broadcast_mul3(x, attn_h, attn_w, tape=tape)
