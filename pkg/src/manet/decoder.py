"""Top-down multiscale decoder producing full-resolution class logits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .functional import conv2d, gelu, upsample_bilinear
from .nn import Module, he_normal
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DecoderConfig:
    num_classes: int = 6
    width: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")


class Decoder(Module):
    """FPN-style decoder.

    Starting at 1/32: upsample x2, add the 1x1-projected finer level, 3x3 conv
    + GELU; after reaching 1/4, classify with a 1x1 conv and upsample x4.
    """

    def __init__(self, in_channels: Sequence[int], cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError(f"decoder needs 4 input levels, got {len(in_channels)}")
        self.cfg = cfg
        self.in_channels = tuple(in_channels)
        d = cfg.width
        for i, ch in enumerate(in_channels):
            self.add_param(f"lateral.{i}.weight", he_normal(rng, (d, ch, 1, 1), ch))
            self.add_param(f"lateral.{i}.bias", np.zeros(d))
        for i in range(3):
            self.add_param(f"smooth.{i}.weight", he_normal(rng, (d, d, 3, 3), 9 * d))
            self.add_param(f"smooth.{i}.bias", np.zeros(d))
        self.add_param("classifier.weight", he_normal(rng, (cfg.num_classes, d, 1, 1), d))
        self.add_param("classifier.bias", np.zeros(cfg.num_classes))

    def _conv(self, name: str, x: Tensor, pad: int = 0) -> Tensor:
        return conv2d(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"], pad=pad)

    def __call__(self, feats: Sequence[Tensor], height: int, width: int) -> Tensor:
        return decode(self, feats, height, width)


def decode(dec: Decoder, feats: Sequence[Tensor], height: int, width: int) -> Tensor:
    """[F_f^1..F_f^4] at strides 4, 8, 16, 32 -> logits (N, K, height, width)."""
    if len(feats) != 4:
        raise ShapeError(f"decoder expects 4 levels, got {len(feats)}")
    for i, f in enumerate(feats):
        stride = 4 * 2 ** i
        expect = (dec.in_channels[i], height // stride, width // stride)
        if f.ndim != 4 or tuple(f.shape[1:]) != expect:
            raise ShapeError(f"level {i} has shape {f.shape}, expected (N, {expect[0]}, {expect[1]}, {expect[2]})")
    p = dec._conv("lateral.3", feats[3])
    for i in (2, 1, 0):
        p = upsample_bilinear(p, 2) + dec._conv(f"lateral.{i}", feats[i])
        p = gelu(dec._conv(f"smooth.{i}", p, pad=1))
    # 1x1 projection and bilinear upsampling commute (both linear, weights sum to 1),
    # so classify at 1/4 scale and upsample the K-channel map
    logits = dec._conv("classifier", p)
    return upsample_bilinear(logits, 4)


def decoder_param_count(in_channels: Sequence[int], cfg: DecoderConfig) -> int:
    d = cfg.width
    return sum(d * ch + d for ch in in_channels) + 3 * (9 * d * d + d) + cfg.num_classes * (d + 1)
