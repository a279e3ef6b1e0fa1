#!/usr/bin/env python3
"""
SCSA Engine - Trainer

Mini-batch SGD with momentum and weight decay on the tiny backbone:

    v <- momentum * v + (grad + weight_decay * w)
    w <- w - lr * v

The learning rate follows TrainSpec.learning_rate (a linear warm-up, then
x gamma at milestones or exponential decay). Before each step the joint
gradient norm is clipped to TrainSpec.grad_clip. Every epoch reshuffles
the training set from the seeded generator and appends one record to the
log:

    {"epoch": 1, "train_loss": 1.3712, "val_acc": 0.4231}

The training loop is single-threaded and accumulates in a fixed order, so a
run is bit-reproducible for a given seed. Validation may be split over
eval_workers threads; it is a pure forward pass.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, TextIO, Tuple, Union

import numpy as np

import ops
from backbone import TinyResNet
from dataset import ImageSet
from exceptions import DivergenceError
from models import BackboneSpec, ScsaConfig, TrainSpec
from tensor import ParamStore, Tape, Tensor, make_rng, save_checkpoint

__version__ = "1.0.0"

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpochRecord:
    """One line of the training log (epoch is 1-based)."""
    epoch: int
    train_loss: float
    val_acc: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "EpochRecord":
        data = json.loads(line)
        return cls(int(data["epoch"]), float(data["train_loss"]), float(data["val_acc"]))


@dataclass
class TrainingResult:
    records: List[EpochRecord] = field(default_factory=list)
    model: Optional[TinyResNet] = None

    @property
    def final_val_acc(self) -> float:
        return self.records[-1].val_acc if self.records else 0.0

    def losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def decreasing_epochs(self) -> int:
        """Epochs (after the first) whose train loss is below the previous epoch's."""
        losses = self.losses()
        return sum(1 for prev, cur in zip(losses, losses[1:]) if cur < prev)


class SgdMomentum:
    """SGD with heavy-ball momentum and L2 weight decay over a ParamStore."""

    def __init__(self, store: ParamStore, momentum: float, weight_decay: float):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.value.data) for p in store}

    def step(self, lr: float) -> None:
        for param in self.store:
            grad = param.grad.data + self.weight_decay * param.value.data
            buf = self.velocity[param.name]
            buf *= self.momentum
            buf += grad
            param.value = Tensor(param.value.data - lr * buf)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """
    Rescale every gradient in store so their joint L2 norm is at most max_norm.

    Returns the norm before clipping. max_norm = 0 leaves the gradients alone.
    """
    norm = float(np.sqrt(sum(float(np.sum(p.grad.data * p.grad.data)) for p in store)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for param in store:
            param.grad.data[...] *= scale
    return norm


def evaluate(model: TinyResNet, data: ImageSet, batch_size: int, workers: int = 1) -> float:
    """Accuracy of model on data, optionally spread over worker threads."""
    starts = list(range(0, len(data), batch_size))

    def correct(start: int) -> int:
        images = data.images[start:start + batch_size]
        return int((model.predict(images) == data.labels[start:start + batch_size]).sum())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(correct, starts))
    else:
        hits = sum(correct(s) for s in starts)
    return hits / len(data)


def train(backbone: BackboneSpec, scsa_cfg: ScsaConfig, data: Tuple[ImageSet, ImageSet],
          spec: TrainSpec, log_stream: Optional[TextIO] = None,
          checkpoint_path: Optional[Union[str, Path]] = None) -> TrainingResult:
    """
    Train the backbone from a seeded initialization.

    Args:
        backbone: Architecture; attention='none' gives the baseline network
        scsa_cfg: SCSA configuration used in every block when attention='scsa'
        data: (train, val) image sets
        spec: Optimizer, schedule and seed
        log_stream: Receives one JSON line per epoch
        checkpoint_path: Final parameters are saved here when given

    Returns:
        TrainingResult: Per-epoch records and the trained model

    Raises:
        DivergenceError: If a batch loss becomes NaN or infinite
        ConfigurationError: If the backbone is incompatible with scsa_cfg
    """
    train_set, val_set = data
    rng = make_rng(spec.seed)
    model = TinyResNet(backbone, scsa_cfg, rng)
    optimizer = SgdMomentum(model.store, spec.momentum, spec.weight_decay)
    result = TrainingResult(model=model)

    n = len(train_set)
    for epoch in range(spec.epochs):
        lr = spec.learning_rate(epoch)
        order = rng.permutation(n)
        total = 0.0
        clipped = 0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            model.store.zero_grad()
            tape = Tape()
            logits = model.forward(Tensor(train_set.images[idx]), tape=tape, training=True)
            loss = ops.cross_entropy(logits, train_set.labels[idx], tape=tape)
            value = float(loss.data[0])
            if not np.isfinite(value):
                raise DivergenceError(epoch + 1, value)
            tape.backward(loss)
            norm = clip_grad_norm(model.store, spec.grad_clip)
            if spec.grad_clip > 0 and norm > spec.grad_clip:
                clipped += 1
            optimizer.step(lr)
            total += value * len(idx)

        record = EpochRecord(epoch + 1, total / n,
                             evaluate(model, val_set, spec.batch_size, spec.eval_workers))
        result.records.append(record)
        logger.info(
            f"Epoch {record.epoch}/{spec.epochs}: lr={lr:g} train_loss={record.train_loss:.4f} "
            f"val_acc={record.val_acc:.4f}"
        )
        if clipped:
            logger.debug(f"Epoch {record.epoch}: clipped {clipped} gradient step(s) to norm {spec.grad_clip:g}")
        if log_stream is not None:
            log_stream.write(record.to_json() + "\n")
            log_stream.flush()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.store)
    return result
