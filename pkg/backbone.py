#!/usr/bin/env python3
"""
SCSA Engine - Tiny Residual Backbone

    stem      3x3 conv, stride 2, ReLU
    stage s   blocks_per_stage residual blocks of stage_channels[s] channels;
              the first block of every stage after the first has stride 2
    block     conv3x3 -> ReLU -> conv3x3 -> [SCSA] -> + shortcut -> ReLU
    head      global average pool -> linear

SCSA sits after the block's final convolution and before the residual
addition. Shortcuts are identity unless the stride or width changes, in
which case a 1x1 projection is used.

Convolutions use He-uniform initialization; the final convolution of each
block is additionally scaled by BACKBONE_RESIDUAL_INIT_SCALE, and by
BACKBONE_ATTENTION_INIT_GAIN when SCSA follows it, so the residual branch
starts at about the same magnitude with or without attention.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

import ops
from config import BACKBONE_ATTENTION_INIT_GAIN, BACKBONE_RESIDUAL_INIT_SCALE
from models import BackboneSpec, ScsaConfig
from scsa import ScsaParams, init_scsa_params, scsa_forward
from tensor import Parameter, ParamStore, Tape, Tensor

__version__ = "1.0.0"

logger = logging.getLogger(__name__)


@dataclass
class _Block:
    name: str
    stride: int
    conv1: Parameter
    bias1: Parameter
    conv2: Parameter
    bias2: Parameter
    shortcut: Optional[Parameter] = None
    shortcut_bias: Optional[Parameter] = None
    attention: Optional[ScsaParams] = None


def _he_uniform(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_c * k * k))
    return rng.uniform(-bound, bound, size=(out_c, in_c, k, k))


class TinyResNet:
    """
    Residual classifier with optional SCSA in every block.

    Attributes:
        store (ParamStore): Every parameter and buffer of the network
        spec (BackboneSpec): Architecture description
        scsa_cfg (ScsaConfig): Attention configuration (unused when attention='none')

    Raises:
        ConfigurationError: If a stage width is incompatible with scsa_cfg
    """

    def __init__(self, spec: BackboneSpec, scsa_cfg: ScsaConfig, rng: np.random.Generator):
        spec.validate_attention(scsa_cfg)
        self.spec = spec
        self.scsa_cfg = scsa_cfg
        self.store = ParamStore()
        store = self.store

        self.stem = store.add("stem.weight", _he_uniform(rng, spec.stem_channels, spec.in_channels, 3))
        self.stem_bias = store.add("stem.bias", np.zeros(spec.stem_channels))

        residual_scale = BACKBONE_RESIDUAL_INIT_SCALE
        if spec.attention == "scsa":
            residual_scale *= BACKBONE_ATTENTION_INIT_GAIN
        self.blocks: List[_Block] = []
        in_c = spec.stem_channels
        for s, width in enumerate(spec.stage_channels):
            for b in range(spec.blocks_per_stage):
                name = f"stage{s}.block{b}"
                stride = 2 if (s > 0 and b == 0) else 1
                block = _Block(
                    name=name,
                    stride=stride,
                    conv1=store.add(f"{name}.conv1.weight", _he_uniform(rng, width, in_c, 3)),
                    bias1=store.add(f"{name}.conv1.bias", np.zeros(width)),
                    conv2=store.add(
                        f"{name}.conv2.weight",
                        residual_scale * _he_uniform(rng, width, width, 3),
                    ),
                    bias2=store.add(f"{name}.conv2.bias", np.zeros(width)),
                )
                if stride != 1 or in_c != width:
                    block.shortcut = store.add(f"{name}.shortcut.weight", _he_uniform(rng, width, in_c, 1))
                    block.shortcut_bias = store.add(f"{name}.shortcut.bias", np.zeros(width))
                if spec.attention == "scsa":
                    block.attention = init_scsa_params(store, width, scsa_cfg, rng, prefix=f"{name}.attn")
                self.blocks.append(block)
                in_c = width

        bound = 1.0 / np.sqrt(in_c)
        self.head = store.add("head.weight", rng.uniform(-bound, bound, size=(in_c, spec.num_classes)))
        self.head_bias = store.add("head.bias", np.zeros(spec.num_classes))
        logger.info(
            f"Built backbone ({spec.attention}): {len(self.blocks)} blocks, "
            f"{store.num_elements():,} parameters"
        )

    def forward(self, images: Tensor, tape: Optional[Tape] = None, training: bool = True) -> Tensor:
        """Logits [B, num_classes] for images [B, in_channels, H, W]."""
        x = ops.relu(ops.conv2d(images, self.stem, self.stem_bias, stride=2, padding=1, tape=tape), tape=tape)
        for block in self.blocks:
            h = ops.relu(ops.conv2d(x, block.conv1, block.bias1, stride=block.stride, padding=1, tape=tape),
                         tape=tape)
            h = ops.conv2d(h, block.conv2, block.bias2, stride=1, padding=1, tape=tape)
            if block.attention is not None:
                h = scsa_forward(h, block.attention, self.scsa_cfg, tape=tape, training=training)
            if block.shortcut is not None:
                skip = ops.conv2d(x, block.shortcut, block.shortcut_bias, stride=block.stride, tape=tape)
            else:
                skip = x
            x = ops.relu(ops.add(h, skip, tape=tape), tape=tape)

        bsz, channels, height, width = x.shape
        pooled = ops.mean_lastdim(ops.reshape(x, (bsz, channels, height * width), tape=tape), tape=tape)
        return ops.linear(pooled, self.head, self.head_bias, tape=tape)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Class predictions in eval mode, no tape."""
        logits = self.forward(Tensor(images), tape=None, training=False)
        return np.argmax(logits.data, axis=1)
