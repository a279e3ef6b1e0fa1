#!/usr/bin/env python3
"""
SCSA Engine - Configuration Module

Centralizes every default hyperparameter of the attention mechanism, the
gradient-check oracle, the toy training recipe and the benchmark. Model
dataclasses in models.py take their defaults from here, and the CLI's
--print-defaults flag renders them, so there is exactly one place where a
default value lives.

CONFIGURATION PHILOSOPHY:
=========================
Constants are annotated Final and validated once on import. Anything a user
may change per run belongs in a JSON config file (see models.CliConfig),
not here.

WHERE THE NUMBERS COME FROM:
============================
1. SPATIAL BRANCH (SMSA):
   - K = 4 sub-features with depth-wise 1D kernels 3, 5, 7 and 9.
   - Group normalization with K groups, eps 1e-5, affine initialized
     gamma=1, beta=0.
   - BN momentum 0.1 (only used by the GN->BN ablation).

2. CHANNEL BRANCH (PCSA):
   - Progressive compression to a 7x7 token grid.
   - Single head, attention logits scaled by sqrt(C).
   - Per-channel projections initialized to weight 1, bias 0.

3. TRAINING RECIPE:
   - SGD, momentum 0.9, weight decay 1e-4, initial learning rate 0.05,
     reduced tenfold at fixed milestones. The milestones are scaled down to
     a 20-epoch toy schedule (x0.1 at epochs 12 and 18).

4. GRADIENT CHECKING:
   - Central differences in 64-bit with step 1e-5; relative tolerance 1e-4
     for ops and modules, 1e-3 for the full SCSA composition.

VALIDATION AND INTEGRITY:
==========================
validate_configuration() runs on import. A failure raises RuntimeError with
the underlying message.
"""

import os
from typing import Final, Optional, Tuple

__version__ = "1.0.0"


# ============================================================================
# ENVIRONMENT
# ============================================================================

# Global seed override, honoured by the CLI and the harness
SEED_ENV_VAR: Final[str] = "SCSA_SEED"

# When set to "1", every op checks its output for NaN/Inf
DEBUG_CHECKS_ENV_VAR: Final[str] = "SCSA_DEBUG_CHECKS"

DEFAULT_SEED: Final[int] = 0


def debug_checks_enabled() -> bool:
    """Return True when per-op finite checks are switched on."""
    return os.environ.get(DEBUG_CHECKS_ENV_VAR, "0") == "1"


def seed_override() -> Optional[int]:
    """
    Read the global seed override from the environment.

    Returns:
        Optional[int]: The seed, or None when SCSA_SEED is unset

    Raises:
        ValueError: If SCSA_SEED is set but not an integer
    """
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer (got '{raw}')")


# ============================================================================
# TENSOR ENGINE
# ============================================================================

DTYPE_F64: Final[str] = "float64"
DTYPE_F32: Final[str] = "float32"
DEFAULT_DTYPE: Final[str] = DTYPE_F64
SUPPORTED_DTYPES: Final[Tuple[str, ...]] = (DTYPE_F64, DTYPE_F32)
MAX_RANK: Final[int] = 4

# Binary dump format
TENSOR_MAGIC: Final[bytes] = b"SCST"
CHECKPOINT_MAGIC: Final[bytes] = b"SCSK"
DTYPE_CODES: Final[dict] = {DTYPE_F64: 0, DTYPE_F32: 1}


# ============================================================================
# SMSA DEFAULTS
# ============================================================================

SMSA_K_GROUPS: Final[int] = 4
SMSA_KERNEL_SIZES: Final[Tuple[int, ...]] = (3, 5, 7, 9)
NORM_EPS: Final[float] = 1e-5
BN_MOMENTUM: Final[float] = 0.1

VALID_NORMS: Final[Tuple[str, ...]] = ("gn", "bn")
VALID_CONV_SHARING: Final[Tuple[str, ...]] = ("shared", "unshared")
VALID_GN_POSITIONS: Final[Tuple[str, ...]] = ("post_conv", "pre_conv")
VALID_SMSA_GATES: Final[Tuple[str, ...]] = ("sigmoid", "softmax")


# ============================================================================
# PCSA DEFAULTS
# ============================================================================

PCSA_POOLED_H: Final[int] = 7
PCSA_POOLED_W: Final[int] = 7
PCSA_HEADS: Final[int] = 1

VALID_SCALE_MODES: Final[Tuple[str, ...]] = ("sqrt_C", "sqrt_HW")
VALID_POOL_MODES: Final[Tuple[str, ...]] = ("adaptive", "windowed")

# Guard for the w/o-PC variant: warn when C * (H*W)^2 exceeds this
FULL_ATTENTION_BUDGET: Final[int] = 50_000_000


# ============================================================================
# SCSA DEFAULTS
# ============================================================================

VALID_ORDERINGS: Final[Tuple[str, ...]] = ("smsa_first", "pcsa_first")


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

GRADCHECK_STEP: Final[float] = 1e-5
GRADCHECK_TOL: Final[float] = 1e-4
GRADCHECK_TOL_SCSA: Final[float] = 1e-3
GRADCHECK_DENOM_FLOOR: Final[float] = 1e-8


# ============================================================================
# HARNESS: DATASET
# ============================================================================

DATASET_NUM_CLASSES: Final[int] = 4
DATASET_SAMPLES_PER_CLASS: Final[int] = 64
DATASET_IMAGE_SIZE: Final[Tuple[int, int, int]] = (3, 32, 32)
DATASET_BLOB_SCALES: Final[Tuple[float, ...]] = (1.0, 2.0, 3.0, 4.5)
DATASET_NOISE_SIGMA: Final[float] = 0.1
DATASET_TRAIN_FRACTION: Final[float] = 0.8
DATASET_SIGNAL_AMPLITUDE: Final[float] = 1.0
DATASET_DISTRACTOR_AMPLITUDE: Final[float] = 0.3


# ============================================================================
# HARNESS: TRAINING
# ============================================================================

TRAIN_LR: Final[float] = 0.05
TRAIN_MOMENTUM: Final[float] = 0.9
TRAIN_WEIGHT_DECAY: Final[float] = 1e-4
TRAIN_EPOCHS: Final[int] = 20
TRAIN_BATCH_SIZE: Final[int] = 32
TRAIN_MILESTONES: Final[Tuple[int, ...]] = (12, 18)
TRAIN_GAMMA: Final[float] = 0.1
TRAIN_EXP_DECAY: Final[float] = 0.98
# linear ramp to TRAIN_LR over the first epochs; 0 disables
TRAIN_WARMUP_EPOCHS: Final[int] = 3
# global L2 bound on the gradient of every step; 0 disables
TRAIN_GRAD_CLIP: Final[float] = 5.0
VALID_SCHEDULES: Final[Tuple[str, ...]] = ("step", "exponential")


# ============================================================================
# HARNESS: BACKBONE
# ============================================================================

BACKBONE_STEM_CHANNELS: Final[int] = 16
BACKBONE_STAGE_CHANNELS: Final[Tuple[int, ...]] = (16, 32)
BACKBONE_BLOCKS_PER_STAGE: Final[int] = 2
# Scale applied to the last convolution of every residual block at init
BACKBONE_RESIDUAL_INIT_SCALE: Final[float] = 0.1
# extra gain on the final convolution of blocks that carry SCSA; the two
# sigmoid gates start near 0.5 each
BACKBONE_ATTENTION_INIT_GAIN: Final[float] = 4.0


# ============================================================================
# HARNESS: BENCHMARK
# ============================================================================

BENCH_REPEATS: Final[int] = 5
BENCH_WARMUP: Final[int] = 2
BENCH_BATCH: Final[int] = 32
BENCH_CSV_HEADER: Final[Tuple[str, ...]] = ("preset", "C", "H", "W", "median_ms", "flops")


# ============================================================================
# CONFIGURATION VALIDATION
# ============================================================================

def validate_configuration() -> None:
    """
    Validate internal consistency of the defaults.

    Raises:
        ValueError: If any default violates a documented invariant
        TypeError: If a constant has the wrong type
    """
    if len(SMSA_KERNEL_SIZES) != SMSA_K_GROUPS:
        raise ValueError(
            f"SMSA_KERNEL_SIZES must have SMSA_K_GROUPS={SMSA_K_GROUPS} entries "
            f"(got {len(SMSA_KERNEL_SIZES)})"
        )
    for k in SMSA_KERNEL_SIZES:
        if not isinstance(k, int):
            raise TypeError(f"Kernel sizes must be int, got {type(k).__name__}")
        if k % 2 == 0 or k < 1:
            raise ValueError(f"Kernel sizes must be odd and positive (got {k})")

    if NORM_EPS <= 0:
        raise ValueError(f"NORM_EPS must be positive (got {NORM_EPS})")
    if not (0.0 <= BN_MOMENTUM <= 1.0):
        raise ValueError(f"BN_MOMENTUM must be in [0, 1] (got {BN_MOMENTUM})")

    if PCSA_POOLED_H < 1 or PCSA_POOLED_W < 1:
        raise ValueError("Pooled extents must be positive")
    if PCSA_HEADS < 1:
        raise ValueError(f"PCSA_HEADS must be positive (got {PCSA_HEADS})")

    if not (0.0 < GRADCHECK_STEP < 1e-2):
        raise ValueError(f"GRADCHECK_STEP looks wrong (got {GRADCHECK_STEP})")
    if GRADCHECK_TOL <= 0 or GRADCHECK_TOL_SCSA <= 0:
        raise ValueError("Gradcheck tolerances must be positive")

    if len(DATASET_BLOB_SCALES) != DATASET_NUM_CLASSES:
        raise ValueError(
            f"DATASET_BLOB_SCALES needs one radius per class "
            f"({DATASET_NUM_CLASSES}), got {len(DATASET_BLOB_SCALES)}"
        )
    if not (0.0 < DATASET_TRAIN_FRACTION < 1.0):
        raise ValueError("DATASET_TRAIN_FRACTION must be in (0, 1)")

    if TRAIN_LR <= 0:
        raise ValueError(f"TRAIN_LR must be positive (got {TRAIN_LR})")
    if not (0.0 <= TRAIN_MOMENTUM < 1.0):
        raise ValueError(f"TRAIN_MOMENTUM must be in [0, 1) (got {TRAIN_MOMENTUM})")
    if list(TRAIN_MILESTONES) != sorted(TRAIN_MILESTONES):
        raise ValueError("TRAIN_MILESTONES must be ascending")
    if TRAIN_WARMUP_EPOCHS < 0 or TRAIN_WARMUP_EPOCHS >= TRAIN_EPOCHS:
        raise ValueError(f"TRAIN_WARMUP_EPOCHS must be in [0, {TRAIN_EPOCHS}) (got {TRAIN_WARMUP_EPOCHS})")
    if TRAIN_GRAD_CLIP < 0:
        raise ValueError(f"TRAIN_GRAD_CLIP must be >= 0 (got {TRAIN_GRAD_CLIP})")
    if BACKBONE_ATTENTION_INIT_GAIN <= 0:
        raise ValueError("BACKBONE_ATTENTION_INIT_GAIN must be positive")

    for channels in BACKBONE_STAGE_CHANNELS:
        if channels % SMSA_K_GROUPS != 0:
            raise ValueError(
                f"Backbone stage width {channels} is not divisible by K={SMSA_K_GROUPS}"
            )

    if BENCH_REPEATS < 5 or BENCH_WARMUP < 2:
        raise ValueError("Benchmark needs at least 5 timed repetitions and 2 warm-ups")
    if BENCH_BATCH < 1:
        raise ValueError(f"BENCH_BATCH must be >= 1 (got {BENCH_BATCH})")


# ============================================================================
# MODULE INITIALIZATION
# ============================================================================

try:
    validate_configuration()
except (ValueError, TypeError) as e:
    raise RuntimeError(
        f"Configuration validation failed: {e}\n"
        f"Please check config.py for errors."
    ) from e


# ============================================================================
# SUMMARY FOR QUICK REFERENCE
# ============================================================================

def print_config_summary() -> str:
    """
    Generate a human-readable summary of the built-in defaults.

    Returns:
        str: Formatted summary
    """
    lines = [
        "SCSA Engine Default Configuration",
        "=" * 60,
        "",
        "Spatial branch (SMSA):",
        "-" * 60,
        f"  Sub-features K: {SMSA_K_GROUPS}",
        f"  Kernel sizes: {', '.join(str(k) for k in SMSA_KERNEL_SIZES)}",
        f"  Norm eps: {NORM_EPS:g}   BN momentum: {BN_MOMENTUM:g}",
        "",
        "Channel branch (PCSA):",
        "-" * 60,
        f"  Pooled grid: {PCSA_POOLED_H}x{PCSA_POOLED_W}",
        f"  Heads: {PCSA_HEADS}",
        "",
        "Gradient checking:",
        "-" * 60,
        f"  Step: {GRADCHECK_STEP:g}   Tol: {GRADCHECK_TOL:g}   Tol (SCSA): {GRADCHECK_TOL_SCSA:g}",
        "",
        "Training:",
        "-" * 60,
        f"  LR: {TRAIN_LR:g}   Momentum: {TRAIN_MOMENTUM:g}   Weight decay: {TRAIN_WEIGHT_DECAY:g}",
        f"  Epochs: {TRAIN_EPOCHS}   Batch: {TRAIN_BATCH_SIZE}   "
        f"Milestones: {', '.join(str(m) for m in TRAIN_MILESTONES)}",
        f"  Warm-up epochs: {TRAIN_WARMUP_EPOCHS}   Gradient clip: {TRAIN_GRAD_CLIP:g}",
        "",
        "Benchmark:",
        "-" * 60,
        f"  Repeats: {BENCH_REPEATS}   Warm-up: {BENCH_WARMUP}   Batch: {BENCH_BATCH}",
        "=" * 60,
    ]
    return "\n".join(lines)


if __name__ == "__main__":
    print(print_config_summary())
