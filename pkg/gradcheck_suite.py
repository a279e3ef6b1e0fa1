#!/usr/bin/env python3
"""
SCSA Engine - Gradient-Check Suite

Runs every gradient check the engine defines:

    op.<name>      one check per differentiable op, over three input shapes
    smsa.<variant> SMSA end to end (B=2, C=8, H=6, W=5)
    pcsa.<variant> PCSA end to end (B=2, C=6, H=W=7)
    scsa.<preset>  every ablation preset (B=2, C=8, H=W=12, tol 1e-3)

Op coverage is mechanical: every name in ops.DIFFERENTIABLE_OPS must have a
check, otherwise the suite reports a failing "coverage" entry.

Parameters of the module checks are perturbed away from their initial
values (gamma=1, beta=0, identity projections) so that no gradient is
trivially zero or symmetric.
"""

import fnmatch
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import ops
from config import GRADCHECK_STEP, GRADCHECK_TOL, GRADCHECK_TOL_SCSA
from gradcheck import GradcheckReport, finite_diff_gradcheck
from models import PcsaConfig, SmsaConfig
from ops import DIFFERENTIABLE_OPS
from pcsa import init_pcsa_params, pcsa_forward
from scsa import ablation_registry, init_scsa_params, scsa_forward
from smsa import init_smsa_params, smsa_forward
from tensor import Parameter, ParamStore, Tensor, make_rng

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

# A check builder returns (f, inputs, params) for a given shape index
Problem = Tuple[Callable, List[Tensor], List[Parameter]]
Builder = Callable[[np.random.Generator, int], Problem]

RANK3_SHAPES: Tuple[Tuple[int, int, int], ...] = ((1, 2, 5), (2, 4, 7), (3, 6, 4))
RANK4_SHAPES: Tuple[Tuple[int, int, int, int], ...] = ((1, 2, 3, 4), (2, 4, 5, 5), (2, 2, 7, 6))

# Coordinates checked per target in the preset sweep
SCSA_MAX_COORDS = 48


@dataclass(frozen=True)
class GradcheckCase:
    """
    One named check.

    Attributes:
        name: "op.<op>", "smsa.<variant>", "pcsa.<variant>" or "scsa.<preset>"
        op: Registry name the check covers (op checks only)
        tol: Default tolerance
        shapes: How many input shapes the builder provides
        max_coords: Per-target coordinate cap (None checks every coordinate)
    """
    name: str
    builder: Builder
    tol: float = GRADCHECK_TOL
    op: Optional[str] = None
    shapes: int = 1
    max_coords: Optional[int] = None


@dataclass(frozen=True)
class SuiteReport:
    results: Tuple[GradcheckReport, ...]
    missing_ops: Tuple[str, ...] = field(default_factory=tuple)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results) and not self.missing_ops

    @property
    def failures(self) -> List[GradcheckReport]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "results": [r.to_dict() for r in self.results],
            "missing_ops": list(self.missing_ops),
        }


# ============================================================================
# RANDOM INPUT HELPERS
# ============================================================================

def _rand(rng: np.random.Generator, shape: Sequence[int]) -> Tensor:
    return Tensor(rng.standard_normal(tuple(shape)))


def _away_from_zero(rng: np.random.Generator, shape: Sequence[int]) -> Tensor:
    """Values with |x| >= 0.1 so kinks (relu) are never within a step."""
    mag = 0.1 + rng.random(tuple(shape))
    return Tensor(np.where(rng.random(tuple(shape)) < 0.5, -mag, mag))


def _param(rng: np.random.Generator, name: str, shape: Sequence[int], center: float = 0.0) -> Parameter:
    return Parameter(name, center + 0.5 * rng.standard_normal(tuple(shape)))


def _perturb(params: Sequence[Parameter], rng: np.random.Generator, amount: float = 0.2) -> None:
    for p in params:
        p.value = Tensor(p.value.data + amount * rng.standard_normal(p.shape))
        p.grad = Tensor(np.zeros_like(p.value.data))


# ============================================================================
# OP CHECKS
# ============================================================================

def _unary(op: Callable, shapes: Sequence[Tuple[int, ...]], away: bool = False) -> Builder:
    def build(rng: np.random.Generator, i: int) -> Problem:
        if away:
            x = _away_from_zero(rng, shapes[i])
        else:
            x = _rand(rng, shapes[i])
        return (lambda inputs, tape: op(inputs[0], tape=tape)), [x], []
    return build


def _build_channel_split(rng, i):
    x = _rand(rng, RANK3_SHAPES[i])
    return (lambda inputs, tape: ops.channel_split(inputs[0], 2, tape=tape)[-1]), [x], []


def _build_concat(rng, i):
    b, c, l = RANK3_SHAPES[i]
    a, x = _rand(rng, (b, c, l)), _rand(rng, (b, c + 1, l))
    return (lambda inputs, tape: ops.concat_channels(inputs, tape=tape)), [a, x], []


def _build_dwconv1d(rng, i):
    b, c, l = RANK3_SHAPES[i]
    k = (3, 5, 7)[i]
    x = _rand(rng, (b, c, l))
    w, bias = _param(rng, "w", (c, k)), _param(rng, "bias", (c,))
    return (lambda inputs, tape: ops.dwconv1d(inputs[0], w, bias, tape=tape)), [x], [w, bias]


def _build_group_norm(rng, i):
    x = _rand(rng, RANK3_SHAPES[i])
    c = x.shape[1]
    gamma, beta = _param(rng, "gamma", (c,), 1.0), _param(rng, "beta", (c,))
    return (lambda inputs, tape: ops.group_norm(inputs[0], 2, gamma, beta, tape=tape)), [x], [gamma, beta]


def _build_batch_norm1d(rng, i):
    x = _rand(rng, RANK3_SHAPES[i])
    c = x.shape[1]
    gamma, beta = _param(rng, "gamma", (c,), 1.0), _param(rng, "beta", (c,))
    return ((lambda inputs, tape: ops.batch_norm1d(inputs[0], gamma, beta, mode="train", tape=tape)),
            [x], [gamma, beta])


def _build_adaptive_pool(rng, i):
    x = _rand(rng, RANK4_SHAPES[i])
    return (lambda inputs, tape: ops.adaptive_avg_pool2d(inputs[0], 2, 3, tape=tape)), [x], []


def _build_windowed_pool(rng, i):
    x = _rand(rng, RANK4_SHAPES[i])
    return (lambda inputs, tape: ops.windowed_avg_pool2d(inputs[0], 2, 2, tape=tape)), [x], []


def _build_affine(rng, i):
    x = _rand(rng, RANK3_SHAPES[i])
    c = x.shape[1]
    w, b = _param(rng, "w", (c,), 1.0), _param(rng, "b", (c,))
    return (lambda inputs, tape: ops.per_channel_affine(inputs[0], w, b, tape=tape)), [x], [w, b]


def _build_matmul(rng, i):
    b, m, p = RANK3_SHAPES[i]
    return ((lambda inputs, tape: ops.batched_matmul(inputs[0], inputs[1], tape=tape)),
            [_rand(rng, (b, m, p)), _rand(rng, (b, p, 3))], [])


def _build_scale(rng, i):
    x = _rand(rng, RANK3_SHAPES[i])
    return (lambda inputs, tape: ops.scale(inputs[0], -0.7, tape=tape)), [x], []


def _build_reshape(rng, i):
    x = _rand(rng, RANK4_SHAPES[i])
    b, c, h, w = x.shape
    return (lambda inputs, tape: ops.reshape(inputs[0], (b, c, h * w), tape=tape)), [x], []


def _build_broadcast_mul3(rng, i):
    b, c, h, w = RANK4_SHAPES[i]
    return ((lambda inputs, tape: ops.broadcast_mul3(inputs[0], inputs[1], inputs[2], tape=tape)),
            [_rand(rng, (b, c, h, w)), _rand(rng, (b, c, w)), _rand(rng, (b, c, h))], [])


def _build_channel_scale(rng, i):
    b, c, h, w = RANK4_SHAPES[i]
    return ((lambda inputs, tape: ops.channel_scale(inputs[0], inputs[1], tape=tape)),
            [_rand(rng, (b, c, h, w)), _rand(rng, (b, c))], [])


def _build_shuffle(op: Callable) -> Builder:
    def build(rng, i):
        x = _rand(rng, RANK3_SHAPES[i])
        return (lambda inputs, tape: op(inputs[0], 2, tape=tape)), [x], []
    return build


def _build_conv2d(rng, i):
    b, c, h, w = RANK4_SHAPES[i]
    stride = (1, 2, 1)[i]
    x = _rand(rng, (b, c, h, w))
    weight, bias = _param(rng, "weight", (3, c, 3, 3)), _param(rng, "bias", (3,))
    return ((lambda inputs, tape: ops.conv2d(inputs[0], weight, bias, stride=stride, padding=1, tape=tape)),
            [x], [weight, bias])


def _build_add(rng, i):
    shape = RANK4_SHAPES[i]
    return (lambda inputs, tape: ops.add(inputs[0], inputs[1], tape=tape)), [_rand(rng, shape), _rand(rng, shape)], []


def _build_linear(rng, i):
    bsz, feat = ((1, 3), (2, 5), (4, 2))[i]
    w, bias = _param(rng, "w", (feat, 3)), _param(rng, "bias", (3,))
    return (lambda inputs, tape: ops.linear(inputs[0], w, bias, tape=tape)), [_rand(rng, (bsz, feat))], [w, bias]


def _build_cross_entropy(rng, i):
    bsz, classes = ((1, 3), (4, 4), (6, 2))[i]
    labels = rng.integers(0, classes, size=bsz)
    return ((lambda inputs, tape: ops.cross_entropy(inputs[0], labels, tape=tape)),
            [_rand(rng, (bsz, classes))], [])


_OP_BUILDERS: Dict[str, Builder] = {
    "avg_pool_over_height": _unary(ops.avg_pool_over_height, RANK4_SHAPES),
    "avg_pool_over_width": _unary(ops.avg_pool_over_width, RANK4_SHAPES),
    "channel_split": _build_channel_split,
    "concat_channels": _build_concat,
    "dwconv1d": _build_dwconv1d,
    "group_norm": _build_group_norm,
    "batch_norm1d": _build_batch_norm1d,
    "sigmoid": _unary(ops.sigmoid, RANK3_SHAPES),
    "softmax_lastdim": _unary(ops.softmax_lastdim, RANK3_SHAPES),
    "relu": _unary(ops.relu, RANK4_SHAPES, away=True),
    "adaptive_avg_pool2d": _build_adaptive_pool,
    "windowed_avg_pool2d": _build_windowed_pool,
    "per_channel_affine": _build_affine,
    "batched_matmul": _build_matmul,
    "transpose_last": _unary(ops.transpose_last, RANK3_SHAPES),
    "scale": _build_scale,
    "reshape": _build_reshape,
    "mean_lastdim": _unary(ops.mean_lastdim, RANK3_SHAPES),
    "broadcast_mul3": _build_broadcast_mul3,
    "channel_scale": _build_channel_scale,
    "channel_shuffle": _build_shuffle(ops.channel_shuffle),
    "channel_unshuffle": _build_shuffle(ops.channel_unshuffle),
    "conv2d": _build_conv2d,
    "add": _build_add,
    "linear": _build_linear,
    "cross_entropy": _build_cross_entropy,
}


# ============================================================================
# MODULE CHECKS
# ============================================================================

SMSA_VARIANTS: Dict[str, SmsaConfig] = {
    "default": SmsaConfig(),
    "bn": SmsaConfig(norm="bn"),
    "unshared": SmsaConfig(conv_sharing="unshared"),
    "pre_conv": SmsaConfig(gn_position="pre_conv"),
    "g1-3": SmsaConfig(k_groups=1, kernel_sizes=(3,)),
    "g2-3-7": SmsaConfig(k_groups=2, kernel_sizes=(3, 7)),
}

PCSA_VARIANTS: Dict[str, PcsaConfig] = {
    "default": PcsaConfig(),
    "sqrt_hw": PcsaConfig(scale_mode="sqrt_HW"),
    "heads2-shuffle": PcsaConfig(heads=2, shuffle=True),
    "wo-pc": PcsaConfig(progressive_compression=False),
}


def _smsa_builder(cfg: SmsaConfig) -> Builder:
    def build(rng, i):
        store = ParamStore()
        params = init_smsa_params(store, 8, cfg, rng)
        _perturb(list(store), rng)
        x = _rand(rng, (2, 8, 6, 5))
        return (lambda inputs, tape: smsa_forward(inputs[0], params, cfg, tape=tape)), [x], list(store)
    return build


def _pcsa_builder(cfg: PcsaConfig) -> Builder:
    def build(rng, i):
        store = ParamStore()
        params = init_pcsa_params(store, 6, cfg)
        _perturb(list(store), rng, amount=0.3)
        x = _rand(rng, (2, 6, 7, 7))
        return (lambda inputs, tape: pcsa_forward(inputs[0], params, cfg, tape=tape)), [x], list(store)
    return build


def _scsa_builder(cfg) -> Builder:
    def build(rng, i):
        store = ParamStore()
        params = init_scsa_params(store, 8, cfg, rng)
        _perturb(list(store), rng)
        x = _rand(rng, (2, 8, 12, 12))
        return (lambda inputs, tape: scsa_forward(inputs[0], params, cfg, tape=tape)), [x], list(store)
    return build


def build_cases() -> List[GradcheckCase]:
    """Every check the suite knows, op checks first."""
    cases = [GradcheckCase(f"op.{name}", builder, op=name, shapes=3)
             for name, builder in _OP_BUILDERS.items()]
    cases += [GradcheckCase(f"smsa.{name}", _smsa_builder(cfg)) for name, cfg in SMSA_VARIANTS.items()]
    cases += [GradcheckCase(f"pcsa.{name}", _pcsa_builder(cfg)) for name, cfg in PCSA_VARIANTS.items()]
    cases += [GradcheckCase(f"scsa.{p.name}", _scsa_builder(p.config), tol=GRADCHECK_TOL_SCSA,
                            max_coords=SCSA_MAX_COORDS)
              for p in ablation_registry()]
    return cases


def missing_op_checks(cases: Sequence[GradcheckCase]) -> List[str]:
    """Registered differentiable ops that no case covers."""
    covered = {c.op for c in cases if c.op}
    return sorted(set(DIFFERENTIABLE_OPS) - covered)


def _matches(name: str, pattern: Optional[str]) -> bool:
    if not pattern:
        return True
    if any(ch in pattern for ch in "*?["):
        return fnmatch.fnmatchcase(name, pattern)
    return pattern in name


def run_case(case: GradcheckCase, seed: int, tol: Optional[float] = None) -> GradcheckReport:
    """Run one case over all of its shapes with a case-local seeded generator."""
    rng = make_rng(seed)
    reports = []
    for i in range(case.shapes):
        f, inputs, params = case.builder(rng, i)
        reports.append(finite_diff_gradcheck(
            f, inputs, params, h=GRADCHECK_STEP, tol=case.tol if tol is None else tol,
            seed=seed + i, max_coords=case.max_coords, name=case.name,
        ))
    return GradcheckReport.combine(case.name, reports)


def run_gradcheck_suite(tol: Optional[float] = None, seed: int = 0, pattern: Optional[str] = None,
                        corrupt_op: Optional[str] = None,
                        cases: Optional[Sequence[GradcheckCase]] = None) -> SuiteReport:
    """
    Run every matching check.

    Args:
        tol: Override every case's tolerance
        seed: Seed for inputs, parameters and cotangents
        pattern: Substring (or glob with * ? [) selecting case names
        corrupt_op: Run with that op's backward scaled by 1.1 (negative control)
        cases: Alternative case list (defaults to build_cases())

    Returns:
        SuiteReport: Per-check results; missing_ops lists uncovered ops
    """
    cases = list(cases) if cases is not None else build_cases()
    missing = tuple(missing_op_checks(cases))
    selected = [c for c in cases if _matches(c.name, pattern)]
    logger.info(f"Running {len(selected)} of {len(cases)} gradient checks (seed={seed})")

    started = time.perf_counter()
    results = []
    guard = ops.corrupted_backward(corrupt_op) if corrupt_op else nullcontext()
    with guard:
        for case in selected:
            report = run_case(case, seed, tol)
            (logger.debug if report.passed else logger.warning)(str(report))
            results.append(report)
    elapsed = time.perf_counter() - started

    if missing:
        logger.error(f"Ops without a gradient check: {', '.join(missing)}")
    suite = SuiteReport(tuple(results), missing, elapsed)
    logger.info(
        f"Gradcheck suite: {len(results) - len(suite.failures)}/{len(results)} passed "
        f"in {elapsed:.1f}s"
    )
    return suite
