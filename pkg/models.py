#!/usr/bin/env python3
"""
SCSA Engine - Data Models Module

Structured, immutable configuration objects for the attention mechanism and
the desk-scale harness:

- SmsaConfig / PcsaConfig / ScsaConfig: every hyperparameter and ablation
  toggle of the mechanism
- FlopBreakdown: multiply-accumulate counts per pipeline stage
- SyntheticDatasetSpec / TrainSpec / BackboneSpec: the harness recipe
- CliConfig: the JSON configuration file, one section per object above

All models validate in __post_init__ and raise ConfigurationError carrying
the dotted key path of the offending field. from_dict() is strict: unknown
keys are rejected, and from_dict(to_dict(c)) == c for every model.
"""

from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Sequence, Tuple

import config
from exceptions import ConfigurationError

__version__ = "1.0.0"


# ============================================================================
# FIELD VALIDATION HELPERS
# ============================================================================

def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _set(obj: Any, name: str, value: Any) -> None:
    object.__setattr__(obj, name, value)


def _count(obj: Any, name: str, minimum: int = 1) -> None:
    value = getattr(obj, name)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigurationError(f"must be an integer >= {minimum} (got {value!r})", name)


def _real(obj: Any, name: str, low: Optional[float] = None, high: Optional[float] = None,
          low_open: bool = False, high_open: bool = False) -> None:
    value = getattr(obj, name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"must be a number (got {value!r})", name)
    value = float(value)
    if low is not None and (value < low or (low_open and value == low)):
        raise ConfigurationError(f"must be {'>' if low_open else '>='} {low:g} (got {value:g})", name)
    if high is not None and (value > high or (high_open and value == high)):
        raise ConfigurationError(f"must be {'<' if high_open else '<='} {high:g} (got {value:g})", name)
    _set(obj, name, value)


def _flag(obj: Any, name: str) -> None:
    if not isinstance(getattr(obj, name), bool):
        raise ConfigurationError(f"must be true or false (got {getattr(obj, name)!r})", name)


def _choice(obj: Any, name: str, options: Sequence[str]) -> None:
    value = getattr(obj, name)
    if value not in options:
        raise ConfigurationError(
            f"must be one of {', '.join(options)} (got {value!r})", name
        )


def _counts(obj: Any, name: str, minimum: int = 1, allow_empty: bool = False) -> None:
    value = getattr(obj, name)
    if not isinstance(value, (list, tuple)) or (not value and not allow_empty):
        raise ConfigurationError(f"must be a list of integers (got {value!r})", name)
    for item in value:
        if isinstance(item, bool) or not isinstance(item, int) or item < minimum:
            raise ConfigurationError(f"entries must be integers >= {minimum} (got {item!r})", name)
    _set(obj, name, tuple(value))


def _reals(obj: Any, name: str) -> None:
    value = getattr(obj, name)
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigurationError(f"must be a non-empty list of numbers (got {value!r})", name)
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)) or item <= 0:
            raise ConfigurationError(f"entries must be positive numbers (got {item!r})", name)
    _set(obj, name, tuple(float(v) for v in value))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _build(cls: type, data: Any, path: str, nested: Optional[Dict[str, type]] = None):
    """Strictly construct cls from a JSON object, nesting key paths under path."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected a JSON object (got {type(data).__name__})", path or None)
    nested = nested or {}
    known = [f.name for f in fields(cls)]
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(
                f"unknown key (valid keys: {', '.join(known)})", _join(path, key)
            )
        if key in nested:
            value = nested[key].from_dict(value, _join(path, key))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise e.under(path) from None


# ============================================================================
# ATTENTION CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class SmsaConfig:
    """
    Spatial branch configuration.

    Attributes:
        k_groups (int): Number of sub-features K the pooled sequences are split into
        kernel_sizes (Tuple[int, ...]): One odd 1D kernel size per sub-feature
        norm (str): 'gn' (group norm, K groups) or 'bn' (batch norm ablation)
        conv_sharing (str): 'shared' kernels across the H and W branches, or 'unshared'
        gn_position (str): 'post_conv' (default) or 'pre_conv' (normalize before convolving)
        gate (str): 'sigmoid' (default) or 'softmax' along each sequence
        conv_bias (bool): Give each depth-wise convolution a bias (default off)
        eps (float): Normalization epsilon
        bn_momentum (float): Running-statistics momentum for the BN ablation

    Raises:
        ConfigurationError: If kernel_sizes does not match k_groups or a kernel is even

    Examples:
        >>> SmsaConfig(k_groups=2, kernel_sizes=(3, 7))
        >>> SmsaConfig(k_groups=2, kernel_sizes=(3,))
        ConfigurationError: kernel_sizes: must have k_groups=2 entries (got 1)
    """
    k_groups: int = config.SMSA_K_GROUPS
    kernel_sizes: Tuple[int, ...] = config.SMSA_KERNEL_SIZES
    norm: str = "gn"
    conv_sharing: str = "shared"
    gn_position: str = "post_conv"
    gate: str = "sigmoid"
    conv_bias: bool = False
    eps: float = config.NORM_EPS
    bn_momentum: float = config.BN_MOMENTUM

    def __post_init__(self):
        _count(self, "k_groups")
        _counts(self, "kernel_sizes")
        if len(self.kernel_sizes) != self.k_groups:
            raise ConfigurationError(
                f"must have k_groups={self.k_groups} entries (got {len(self.kernel_sizes)})",
                "kernel_sizes",
            )
        for k in self.kernel_sizes:
            if k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd (got {k})", "kernel_sizes")
        _choice(self, "norm", config.VALID_NORMS)
        _choice(self, "conv_sharing", config.VALID_CONV_SHARING)
        _choice(self, "gn_position", config.VALID_GN_POSITIONS)
        _choice(self, "gate", config.VALID_SMSA_GATES)
        _flag(self, "conv_bias")
        _real(self, "eps", low=0.0, low_open=True)
        _real(self, "bn_momentum", low=0.0, high=1.0)

    def validate_for(self, channels: int) -> None:
        """
        Raises:
            ConfigurationError: If channels is not divisible by k_groups
        """
        if channels % self.k_groups != 0:
            raise ConfigurationError(
                f"channel count {channels} is not divisible by k_groups={self.k_groups}",
                "k_groups",
            )

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "SmsaConfig":
        return _build(cls, data, path)

    def __str__(self) -> str:
        kernels = ",".join(str(k) for k in self.kernel_sizes)
        return (f"SMSA(K={self.k_groups}, kernels=({kernels}), norm={self.norm}, "
                f"{self.conv_sharing}, {self.gn_position}, gate={self.gate})")


@dataclass(frozen=True)
class PcsaConfig:
    """
    Channel branch configuration.

    Attributes:
        pooled_h, pooled_w (int): Token grid after progressive compression
        scale_mode (str): 'sqrt_C' (default) or 'sqrt_HW' attention logit scaling
        heads (int): Channel blocks attended independently
        shuffle (bool): Channel-shuffle the multi-head output (needs heads > 1)
        progressive_compression (bool): Off attends over all H*W tokens
        pool_mode (str): 'adaptive' (to a fixed grid) or 'windowed' (kernel = stride)
        pre_norm (bool): Single-group GN on the compressed map before projection
        eps (float): Epsilon of the pre-norm
    """
    pooled_h: int = config.PCSA_POOLED_H
    pooled_w: int = config.PCSA_POOLED_W
    scale_mode: str = "sqrt_C"
    heads: int = config.PCSA_HEADS
    shuffle: bool = False
    progressive_compression: bool = True
    pool_mode: str = "adaptive"
    pre_norm: bool = False
    eps: float = config.NORM_EPS

    def __post_init__(self):
        _count(self, "pooled_h")
        _count(self, "pooled_w")
        _choice(self, "scale_mode", config.VALID_SCALE_MODES)
        _count(self, "heads")
        _flag(self, "shuffle")
        _flag(self, "progressive_compression")
        _choice(self, "pool_mode", config.VALID_POOL_MODES)
        _flag(self, "pre_norm")
        _real(self, "eps", low=0.0, low_open=True)
        if self.shuffle and self.heads < 2:
            raise ConfigurationError("shuffle requires heads > 1", "shuffle")

    def validate_for(self, channels: int) -> None:
        """
        Raises:
            ConfigurationError: If heads does not divide channels
        """
        if channels % self.heads != 0:
            raise ConfigurationError(
                f"heads={self.heads} does not divide channel count {channels}", "heads"
            )

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "PcsaConfig":
        return _build(cls, data, path)

    def __str__(self) -> str:
        grid = f"{self.pooled_h}x{self.pooled_w}" if self.progressive_compression else "full"
        return (f"PCSA(pool={grid}/{self.pool_mode}, scale={self.scale_mode}, "
                f"heads={self.heads}{', shuffle' if self.shuffle else ''})")


@dataclass(frozen=True)
class ScsaConfig:
    """
    Serial composition of the two branches plus the ablation toggles.

    Raises:
        ConfigurationError: If both branches are disabled

    Examples:
        >>> ScsaConfig()                      # baseline: SMSA then PCSA
        >>> ScsaConfig(enable_smsa=False, enable_pcsa=False)
        ConfigurationError: enable_pcsa: at least one of enable_smsa/enable_pcsa must be on
    """
    smsa: SmsaConfig = field(default_factory=SmsaConfig)
    pcsa: PcsaConfig = field(default_factory=PcsaConfig)
    ordering: str = "smsa_first"
    enable_smsa: bool = True
    enable_pcsa: bool = True

    def __post_init__(self):
        if not isinstance(self.smsa, SmsaConfig):
            raise ConfigurationError("must be an SMSA configuration", "smsa")
        if not isinstance(self.pcsa, PcsaConfig):
            raise ConfigurationError("must be a PCSA configuration", "pcsa")
        _choice(self, "ordering", config.VALID_ORDERINGS)
        _flag(self, "enable_smsa")
        _flag(self, "enable_pcsa")
        if not (self.enable_smsa or self.enable_pcsa):
            raise ConfigurationError(
                "at least one of enable_smsa/enable_pcsa must be on", "enable_pcsa"
            )

    def validate_for(self, channels: int) -> None:
        """Check the enabled branches against a host channel count."""
        try:
            if self.enable_smsa:
                self.smsa.validate_for(channels)
        except ConfigurationError as e:
            raise e.under("smsa") from None
        try:
            if self.enable_pcsa:
                self.pcsa.validate_for(channels)
        except ConfigurationError as e:
            raise e.under("pcsa") from None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "smsa": self.smsa.to_dict(),
            "pcsa": self.pcsa.to_dict(),
            "ordering": self.ordering,
            "enable_smsa": self.enable_smsa,
            "enable_pcsa": self.enable_pcsa,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "ScsaConfig":
        return _build(cls, data, path, nested={"smsa": SmsaConfig, "pcsa": PcsaConfig})

    def __str__(self) -> str:
        parts = []
        if self.enable_smsa:
            parts.append(str(self.smsa))
        if self.enable_pcsa:
            parts.append(str(self.pcsa))
        if self.ordering == "pcsa_first":
            parts.reverse()
        return " -> ".join(parts)


# ============================================================================
# COMPLEXITY MODEL RESULT
# ============================================================================

@dataclass(frozen=True)
class FlopBreakdown:
    """
    Multiply-accumulate counts of one SCSA evaluation (batch of one).

    attention includes attention_product (the C^2 N term of the
    channel-similarity product); attention_product is reported separately so
    the constant part of the complexity is visible.
    """
    decouple: int
    conv: int
    gating: int
    compression: int
    attention: int
    attention_product: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"must be non-negative (got {getattr(self, f.name)})", f.name)
        if self.attention_product > self.attention:
            raise ConfigurationError("cannot exceed attention", "attention_product")

    @property
    def total(self) -> int:
        return self.decouple + self.conv + self.gating + self.compression + self.attention

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["total"] = self.total
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "FlopBreakdown":
        data = {k: v for k, v in data.items() if k != "total"}
        return _build(cls, data, path)

    def __str__(self) -> str:
        return (f"FLOPs(total={self.total:,}: decouple={self.decouple:,}, conv={self.conv:,}, "
                f"gating={self.gating:,}, compression={self.compression:,}, "
                f"attention={self.attention:,})")


# ============================================================================
# HARNESS SPECIFICATIONS
# ============================================================================

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """
    Multi-scale blob classification dataset.

    Class c images contain one Gaussian blob of radius blob_scales[c] at
    signal_amplitude, `distractors` blobs at other radii with
    distractor_amplitude, and additive Gaussian noise.

    Raises:
        ConfigurationError: If a radius is not smaller than the image
    """
    seed: int = config.DEFAULT_SEED
    num_classes: int = config.DATASET_NUM_CLASSES
    samples_per_class: int = config.DATASET_SAMPLES_PER_CLASS
    image_size: Tuple[int, ...] = config.DATASET_IMAGE_SIZE
    blob_scales: Tuple[float, ...] = config.DATASET_BLOB_SCALES
    noise_sigma: float = config.DATASET_NOISE_SIGMA
    signal_amplitude: float = config.DATASET_SIGNAL_AMPLITUDE
    distractor_amplitude: float = config.DATASET_DISTRACTOR_AMPLITUDE
    distractors: int = 2
    train_fraction: float = config.DATASET_TRAIN_FRACTION

    def __post_init__(self):
        _count(self, "seed", minimum=0)
        _count(self, "num_classes", minimum=2)
        _count(self, "samples_per_class", minimum=2)
        _counts(self, "image_size")
        if len(self.image_size) != 3:
            raise ConfigurationError(
                f"must be [channels, height, width] (got {list(self.image_size)})", "image_size"
            )
        _reals(self, "blob_scales")
        if len(self.blob_scales) != self.num_classes:
            raise ConfigurationError(
                f"needs one radius per class ({self.num_classes}), got {len(self.blob_scales)}",
                "blob_scales",
            )
        smallest = min(self.image_size[1:])
        for radius in self.blob_scales:
            if radius >= smallest:
                raise ConfigurationError(
                    f"blob radius {radius:g} must be smaller than the image size {smallest}",
                    "blob_scales",
                )
        _real(self, "noise_sigma", low=0.0)
        _real(self, "signal_amplitude", low=0.0, low_open=True)
        _real(self, "distractor_amplitude", low=0.0)
        _count(self, "distractors", minimum=0)
        _real(self, "train_fraction", low=0.0, high=1.0, low_open=True, high_open=True)
        train_per_class = int(round(self.samples_per_class * self.train_fraction))
        if not (1 <= train_per_class < self.samples_per_class):
            raise ConfigurationError(
                "must leave at least one training and one validation sample per class",
                "train_fraction",
            )

    @property
    def train_per_class(self) -> int:
        return int(round(self.samples_per_class * self.train_fraction))

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "SyntheticDatasetSpec":
        return _build(cls, data, path)


@dataclass(frozen=True)
class TrainSpec:
    """
    SGD recipe for the toy backbone.

    lr may be 0 (a frozen run that only measures the loss); every other
    value must be positive. warmup_epochs = 0 and grad_clip = 0 turn the
    ramp and the clipping off.
    """
    lr: float = config.TRAIN_LR
    momentum: float = config.TRAIN_MOMENTUM
    weight_decay: float = config.TRAIN_WEIGHT_DECAY
    milestones: Tuple[int, ...] = config.TRAIN_MILESTONES
    gamma: float = config.TRAIN_GAMMA
    schedule: str = "step"
    warmup_epochs: int = config.TRAIN_WARMUP_EPOCHS
    grad_clip: float = config.TRAIN_GRAD_CLIP
    batch_size: int = config.TRAIN_BATCH_SIZE
    epochs: int = config.TRAIN_EPOCHS
    seed: int = config.DEFAULT_SEED
    eval_workers: int = 1

    def __post_init__(self):
        _real(self, "lr", low=0.0)
        _real(self, "momentum", low=0.0, high=1.0, high_open=True)
        _real(self, "weight_decay", low=0.0)
        _counts(self, "milestones", allow_empty=True)
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigurationError("must be strictly ascending", "milestones")
        _real(self, "gamma", low=0.0, high=1.0, low_open=True)
        _choice(self, "schedule", config.VALID_SCHEDULES)
        _count(self, "warmup_epochs", minimum=0)
        _real(self, "grad_clip", low=0.0)
        _count(self, "batch_size")
        _count(self, "epochs")
        _count(self, "seed", minimum=0)
        _count(self, "eval_workers")

    def learning_rate(self, epoch: int) -> float:
        """
        Learning rate for a zero-based epoch index.

        The first warmup_epochs epochs ramp linearly towards the scheduled
        rate: epoch e < warmup_epochs runs at (e + 1) / (warmup_epochs + 1)
        of it.
        """
        if self.schedule == "exponential":
            rate = self.lr * (config.TRAIN_EXP_DECAY ** epoch)
        else:
            drops = sum(1 for m in self.milestones if epoch >= m)
            rate = self.lr * (self.gamma ** drops)
        if epoch < self.warmup_epochs:
            rate *= (epoch + 1) / (self.warmup_epochs + 1)
        return rate

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "TrainSpec":
        return _build(cls, data, path)


@dataclass(frozen=True)
class BackboneSpec:
    """
    Tiny residual network description.

    attention is 'scsa' (insert SCSA after the last convolution of every
    residual block, before the addition) or 'none'. The SCSA configuration
    itself comes from the top-level scsa section.
    """
    in_channels: int = config.DATASET_IMAGE_SIZE[0]
    num_classes: int = config.DATASET_NUM_CLASSES
    stem_channels: int = config.BACKBONE_STEM_CHANNELS
    stage_channels: Tuple[int, ...] = config.BACKBONE_STAGE_CHANNELS
    blocks_per_stage: int = config.BACKBONE_BLOCKS_PER_STAGE
    attention: str = "scsa"

    def __post_init__(self):
        _count(self, "in_channels")
        _count(self, "num_classes", minimum=2)
        _count(self, "stem_channels")
        _counts(self, "stage_channels")
        _count(self, "blocks_per_stage")
        _choice(self, "attention", ("scsa", "none"))

    def validate_attention(self, scsa: ScsaConfig) -> None:
        """
        Raises:
            ConfigurationError: If a stage width is incompatible with scsa
        """
        if self.attention == "none":
            return
        for width in self.stage_channels:
            try:
                scsa.validate_for(width)
            except ConfigurationError as e:
                raise ConfigurationError(
                    f"stage width {width} is incompatible with the SCSA config ({e})",
                    "stage_channels",
                ) from None

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "BackboneSpec":
        return _build(cls, data, path)


# ============================================================================
# CLI CONFIGURATION FILE
# ============================================================================

@dataclass(frozen=True)
class CliConfig:
    """
    The JSON configuration file accepted by the CLI.

    Every section and key is optional; omitted values take the defaults from
    config.py. Cross-section checks (dataset vs backbone, backbone vs SCSA)
    run here so a bad file fails before any work starts.

    Examples:
        >>> cfg = CliConfig.from_dict({"scsa": {"pcsa": {"heads": 2, "shuffle": True}}})
        >>> CliConfig.from_dict({"scsa": {"pcsa": {"head": 2}}})
        ConfigurationError: scsa.pcsa.head: unknown key (valid keys: ...)
    """
    scsa: ScsaConfig = field(default_factory=ScsaConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if self.dataset.image_size[0] != self.backbone.in_channels:
            raise ConfigurationError(
                f"must match dataset.image_size channels ({self.dataset.image_size[0]})",
                "backbone.in_channels",
            )
        if self.dataset.num_classes != self.backbone.num_classes:
            raise ConfigurationError(
                f"must match dataset.num_classes ({self.dataset.num_classes})",
                "backbone.num_classes",
            )
        try:
            self.backbone.validate_attention(self.scsa)
        except ConfigurationError as e:
            raise e.under("backbone") from None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scsa": self.scsa.to_dict(),
            "train": self.train.to_dict(),
            "dataset": self.dataset.to_dict(),
            "backbone": self.backbone.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "") -> "CliConfig":
        return _build(cls, data, path, nested={
            "scsa": ScsaConfig,
            "train": TrainSpec,
            "dataset": SyntheticDatasetSpec,
            "backbone": BackboneSpec,
        })


if __name__ == "__main__":
    import json
    print(json.dumps(CliConfig().to_dict(), indent=2))
