#!/usr/bin/env python3
"""
SCSA Engine - Synergistic Composition

SCSA(x) = PCSA(SMSA(x)) by default. This module holds:

- init_scsa_params / scsa_forward: the serial composition, honouring the
  ordering and branch toggles of ScsaConfig
- ablation_registry / get_preset: the thirteen named design variants
- flop_estimate / compare_pooling_modes: the analytic multiply-accumulate
  model of one evaluation

FLOP CONVENTIONS:
=================
Counts are multiply-accumulates for one image, one per output element of
each stage. Activations and normalization statistics are not counted.
    decouple     (H + W) C                     directional pooling
    conv         sum_i k_i (H + W) C / K       depth-wise 1D kernels
    gating       2 H W C (spatial) + H W C (channel)
    compression  P^2 H' W' C + H' W' C         P^2 H' W' = H W when adaptive
    attention    H' W' C + H' W' C^2 / heads   projections + Q K^T
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from exceptions import ConfigurationError, ShapeError
from models import FlopBreakdown, PcsaConfig, ScsaConfig, SmsaConfig
from pcsa import PcsaParams, compressed_grid, init_pcsa_params, pcsa_forward
from smsa import SmsaParams, init_smsa_params, smsa_forward
from tensor import Parameter, ParamStore, Tape, Tensor

__version__ = "1.0.0"

logger = logging.getLogger(__name__)


# ============================================================================
# COMPOSITION
# ============================================================================

@dataclass
class ScsaParams:
    channels: int
    smsa: Optional[SmsaParams] = None
    pcsa: Optional[PcsaParams] = None

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        if self.smsa is not None:
            params += self.smsa.parameters()
        if self.pcsa is not None:
            params += self.pcsa.parameters()
        return params


def _prefixed(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def init_scsa_params(store: ParamStore, channels: int, cfg: ScsaConfig,
                     rng: np.random.Generator, prefix: str = "") -> ScsaParams:
    """
    Register the parameters of every enabled branch.

    Names are "smsa.*" and "pcsa.*", nested under prefix when one is given
    (e.g. "stage0.block1.attn.smsa.conv.0.weight").

    Raises:
        ConfigurationError: If a branch is incompatible with channels
    """
    cfg.validate_for(channels)
    params = ScsaParams(channels)
    if cfg.enable_smsa:
        params.smsa = init_smsa_params(store, channels, cfg.smsa, rng, _prefixed(prefix, "smsa"))
    if cfg.enable_pcsa:
        params.pcsa = init_pcsa_params(store, channels, cfg.pcsa, _prefixed(prefix, "pcsa"))
    return params


def scsa_forward(x: Tensor, params: ScsaParams, cfg: ScsaConfig,
                 tape: Optional[Tape] = None, training: bool = True) -> Tensor:
    """
    Apply the enabled branches in cfg.ordering.

    Raises:
        ConfigurationError: If cfg is invalid for the channel count
        ShapeError: If x is not rank 4 or an enabled branch has no parameters
    """
    if x.rank != 4:
        raise ShapeError(f"SCSA expects [B,C,H,W] input (got {x.shape})")
    cfg.validate_for(x.shape[1])
    if cfg.enable_smsa and params.smsa is None:
        raise ShapeError("SMSA is enabled but no SMSA parameters were initialized")
    if cfg.enable_pcsa and params.pcsa is None:
        raise ShapeError("PCSA is enabled but no PCSA parameters were initialized")

    stages = []
    if cfg.enable_smsa:
        stages.append(lambda t: smsa_forward(t, params.smsa, cfg.smsa, tape=tape, training=training))
    if cfg.enable_pcsa:
        stages.append(lambda t: pcsa_forward(t, params.pcsa, cfg.pcsa, tape=tape))
    if cfg.ordering == "pcsa_first":
        stages.reverse()
    for stage in stages:
        x = stage(x)
    return x


# ============================================================================
# ABLATION REGISTRY
# ============================================================================

@dataclass(frozen=True)
class AblationPreset:
    name: str
    description: str
    config: ScsaConfig


def ablation_registry() -> List[AblationPreset]:
    """The named design variants, baseline first. Names are stable CLI strings."""
    base = ScsaConfig()
    smsa, pcsa = base.smsa, base.pcsa
    return [
        AblationPreset("baseline", "SMSA then PCSA with all defaults", base),
        AblationPreset("wo-smsa", "channel branch only", replace(base, enable_smsa=False)),
        AblationPreset("wo-pcsa", "spatial branch only", replace(base, enable_pcsa=False)),
        AblationPreset("wo-pc", "channel attention over all H*W tokens",
                       replace(base, pcsa=replace(pcsa, progressive_compression=False))),
        AblationPreset("multihead-shuffle", "two attention heads with channel shuffle",
                       replace(base, pcsa=replace(pcsa, heads=2, shuffle=True))),
        AblationPreset("pcsa-prior", "PCSA before SMSA", replace(base, ordering="pcsa_first")),
        AblationPreset("gn-prior", "normalize before the 1D convolutions",
                       replace(base, smsa=replace(smsa, gn_position="pre_conv"))),
        AblationPreset("gn-to-bn", "batch norm instead of group norm",
                       replace(base, smsa=replace(smsa, norm="bn"))),
        AblationPreset("unshared", "separate kernels for the H and W branches",
                       replace(base, smsa=replace(smsa, conv_sharing="unshared"))),
        AblationPreset("scale-sqrt-hw", "attention logits scaled by sqrt(H'W')",
                       replace(base, pcsa=replace(pcsa, scale_mode="sqrt_HW"))),
        AblationPreset("g1-3", "one sub-feature, kernel 3",
                       replace(base, smsa=replace(smsa, k_groups=1, kernel_sizes=(3,)))),
        AblationPreset("g1-7", "one sub-feature, kernel 7",
                       replace(base, smsa=replace(smsa, k_groups=1, kernel_sizes=(7,)))),
        AblationPreset("g2-3-7", "two sub-features, kernels 3 and 7",
                       replace(base, smsa=replace(smsa, k_groups=2, kernel_sizes=(3, 7)))),
    ]


def preset_names() -> List[str]:
    return [p.name for p in ablation_registry()]


def get_preset(name: str) -> AblationPreset:
    """
    Raises:
        ConfigurationError: If name is not a registered preset (lists valid names)
    """
    for preset in ablation_registry():
        if preset.name == name:
            return preset
    raise ConfigurationError(f"Unknown preset '{name}'. Valid presets: {', '.join(preset_names())}")


# ============================================================================
# COMPLEXITY MODEL
# ============================================================================

def _smsa_flops(channels: int, height: int, width: int, cfg: SmsaConfig) -> Dict[str, int]:
    width_per_group = channels // cfg.k_groups
    return {
        "decouple": (height + width) * channels,
        "conv": sum(k * (height + width) * width_per_group for k in cfg.kernel_sizes),
        "gating": 2 * height * width * channels,
    }


def _pcsa_flops(channels: int, height: int, width: int, cfg: PcsaConfig) -> Dict[str, int]:
    th, tw = compressed_grid(height, width, cfg)
    tokens = th * tw
    compression = 0
    if cfg.progressive_compression:
        if cfg.pool_mode == "windowed":
            kh, kw = min(cfg.pooled_h, height), min(cfg.pooled_w, width)
            covered = (th * kh) * (tw * kw)
        else:
            covered = height * width
        compression = covered * channels + tokens * channels
    product = tokens * channels * (channels // cfg.heads)
    return {
        "gating": height * width * channels,
        "compression": compression,
        "attention": tokens * channels + product,
        "attention_product": product,
    }


def flop_estimate(channels: int, height: int, width: int, cfg: ScsaConfig) -> FlopBreakdown:
    """
    Multiply-accumulate count of one SCSA evaluation on a C x H x W map.

    Raises:
        ConfigurationError: If an extent is not positive or cfg does not fit C
    """
    if min(channels, height, width) < 1:
        raise ConfigurationError(f"Extents must be positive (got C={channels}, H={height}, W={width})")
    cfg.validate_for(channels)
    terms = {"decouple": 0, "conv": 0, "gating": 0, "compression": 0,
             "attention": 0, "attention_product": 0}
    if cfg.enable_smsa:
        for key, value in _smsa_flops(channels, height, width, cfg.smsa).items():
            terms[key] += value
    if cfg.enable_pcsa:
        for key, value in _pcsa_flops(channels, height, width, cfg.pcsa).items():
            terms[key] += value
    return FlopBreakdown(**terms)


def compare_pooling_modes(channels: int, height: int, width: int,
                          cfg: ScsaConfig) -> Dict[str, FlopBreakdown]:
    """FLOP model under both compression interpretations (adaptive and windowed)."""
    return {
        mode: flop_estimate(channels, height, width, replace(cfg, pcsa=replace(cfg.pcsa, pool_mode=mode)))
        for mode in ("adaptive", "windowed")
    }
