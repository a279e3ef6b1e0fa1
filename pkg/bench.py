#!/usr/bin/env python3
"""
SCSA Engine - Benchmark

Times scsa_forward (inference, no tape) over a sweep of feature-map sizes
and pairs each point with the FLOP model:

    sweep "C=16;HW=28,56,112"          -> 3 points, preset baseline
    sweep "preset=baseline,wo-pcsa;C=16;H=28;W=28,56"

Keys: preset, C, H, W, HW (sets H and W together). Values are
comma-separated; the sweep is their cartesian product. Each point is timed
as the median of BENCH_REPEATS runs after BENCH_WARMUP warm-up runs.
"""

import itertools
import logging
import statistics
import time
from dataclasses import dataclass
from typing import Dict, List, Sequence

from config import BENCH_BATCH, BENCH_REPEATS, BENCH_WARMUP, DTYPE_F32
from exceptions import ConfigurationError
from scsa import flop_estimate, get_preset, init_scsa_params, scsa_forward
from tensor import ParamStore, Tensor, make_rng

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

_SWEEP_KEYS = ("preset", "C", "H", "W", "HW")


@dataclass(frozen=True)
class SweepPoint:
    preset: str
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class BenchRow:
    """One CSV row; images_per_sec is derived from median_ms and the batch."""
    preset: str
    channels: int
    height: int
    width: int
    median_ms: float
    flops: int
    images_per_sec: float

    def csv_fields(self) -> List[str]:
        return [self.preset, str(self.channels), str(self.height), str(self.width),
                f"{self.median_ms:.4f}", str(self.flops)]


def parse_sweep(text: str, default_preset: str = "baseline") -> List[SweepPoint]:
    """
    Parse a sweep string into points.

    Raises:
        ConfigurationError: On unknown keys, non-integer extents, a missing C
            or spatial size, or an unknown preset
    """
    values: Dict[str, List[str]] = {}
    for item in filter(None, (part.strip() for part in text.split(";"))):
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in _SWEEP_KEYS:
            raise ConfigurationError(
                f"Bad sweep item '{item}'; expected key=v1,v2 with key in {', '.join(_SWEEP_KEYS)}"
            )
        values[key] = [v.strip() for v in raw.split(",") if v.strip()]
        if not values[key]:
            raise ConfigurationError(f"Sweep key '{key}' has no values")

    def extents(key: str) -> List[int]:
        try:
            parsed = [int(v) for v in values[key]]
        except ValueError:
            raise ConfigurationError(f"Sweep key '{key}' needs integers (got {values[key]})")
        if min(parsed) < 1:
            raise ConfigurationError(f"Sweep key '{key}' needs positive extents (got {parsed})")
        return parsed

    if "C" not in values:
        raise ConfigurationError("Sweep needs C=...")
    presets = values.get("preset", [default_preset])
    for name in presets:
        get_preset(name)
    channels = extents("C")

    if "HW" in values:
        if "H" in values or "W" in values:
            raise ConfigurationError("Sweep cannot combine HW with H or W")
        spatial = [(s, s) for s in extents("HW")]
    elif "H" in values and "W" in values:
        spatial = list(itertools.product(extents("H"), extents("W")))
    else:
        raise ConfigurationError("Sweep needs HW=... or both H=... and W=...")

    return [SweepPoint(p, c, h, w) for p, c, (h, w) in itertools.product(presets, channels, spatial)]


def time_point(point: SweepPoint, repeats: int = BENCH_REPEATS, warmup: int = BENCH_WARMUP,
               batch: int = BENCH_BATCH, dtype: str = DTYPE_F32, seed: int = 0) -> BenchRow:
    """Median wall-clock of one inference pass at point."""
    cfg = get_preset(point.preset).config
    rng = make_rng(seed)
    store = ParamStore()
    params = init_scsa_params(store, point.channels, cfg, rng)
    store.cast(dtype)
    x = Tensor(rng.standard_normal((batch, point.channels, point.height, point.width)), dtype=dtype)

    for _ in range(warmup):
        scsa_forward(x, params, cfg, training=False)
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        scsa_forward(x, params, cfg, training=False)
        samples.append(time.perf_counter() - started)

    median_s = statistics.median(samples)
    flops = flop_estimate(point.channels, point.height, point.width, cfg).total
    row = BenchRow(point.preset, point.channels, point.height, point.width,
                   median_s * 1e3, flops, batch / median_s if median_s > 0 else float("inf"))
    logger.info(
        f"{point.preset} C={point.channels} {point.height}x{point.width}: "
        f"{row.median_ms:.3f} ms, {row.images_per_sec:.1f} imgs/s, {flops:,} MACs"
    )
    return row


def bench(points: Sequence[SweepPoint], repeats: int = BENCH_REPEATS, warmup: int = BENCH_WARMUP,
          batch: int = BENCH_BATCH, dtype: str = DTYPE_F32, seed: int = 0) -> List[BenchRow]:
    """
    Time every sweep point in order.

    Each timed call runs a batch of images so per-op interpreter overhead stays
    small next to the arithmetic and the timings scale with H*W.

    Raises:
        ConfigurationError: If repeats < 5, warmup < 2, batch < 1 or a preset does not fit a point
    """
    if batch < 1:
        raise ConfigurationError(f"Benchmark batch must be >= 1 (got {batch})")
    if repeats < BENCH_REPEATS or warmup < BENCH_WARMUP:
        raise ConfigurationError(
            f"Benchmark needs at least {BENCH_REPEATS} timed runs and {BENCH_WARMUP} warm-ups"
        )
    return [time_point(p, repeats, warmup, batch, dtype, seed) for p in points]


