"""Deep Fusion Module: per-modality feature pyramids fused scale-by-scale with SE gates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .functional import (avg_pool2, channel_layer_norm, conv2d, deconv2d, gelu, global_avg_pool,
                         relu, sigmoid, upsample_bilinear)
from .nn import Module, he_normal, trunc_normal
from .tensor import ShapeError, Tensor, reshape

SCALES = (4, 8, 16, 32)  # output stride of each pyramid level
SE_REDUCTION = 4


@dataclass(frozen=True)
class PyramidConfig:
    embed_dim: int
    channels: Tuple[int, int, int, int]

    @classmethod
    def default(cls, embed_dim: int) -> "PyramidConfig":
        c = embed_dim
        return cls(c, (max(1, c // 4), max(1, c // 2), c, c))

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError(f"pyramid needs exactly 4 channel counts, got {self.channels}")


def tokens_to_map(f: Tensor) -> Tensor:
    """(N, h, w, c) or (h, w, c) tokens -> (N, c, h, w) map."""
    if f.ndim == 3:
        f = reshape(f, (1,) + f.shape)
    return f.transpose(0, 3, 1, 2)


class Pyramid(Module):
    """Expands the 1/16 token grid to 1/4, 1/8, 1/16 and 1/32 maps."""

    def __init__(self, cfg: PyramidConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.embed_dim
        c1, c2, c3, c4 = cfg.channels
        self.cfg = cfg
        self.up4_w = self.add_param("up4.weight", he_normal(rng, (c, c1, 4, 4), c))
        self.up4_b = self.add_param("up4.bias", np.zeros(c1))
        self.up4_g = self.add_param("up4.norm_gamma", np.ones(c1))
        self.up4_n = self.add_param("up4.norm_beta", np.zeros(c1))
        self.up2_w = self.add_param("up2.weight", he_normal(rng, (c, c2, 2, 2), c))
        self.up2_b = self.add_param("up2.bias", np.zeros(c2))
        self.up2_g = self.add_param("up2.norm_gamma", np.ones(c2))
        self.up2_n = self.add_param("up2.norm_beta", np.zeros(c2))
        self.same_w = self.add_param("same.weight", he_normal(rng, (c3, c, 1, 1), c))
        self.same_b = self.add_param("same.bias", np.zeros(c3))
        self.down_w = self.add_param("down.weight", he_normal(rng, (c4, c, 2, 2), 4 * c))
        self.down_b = self.add_param("down.bias", np.zeros(c4))

    def __call__(self, f: Tensor) -> List[Tensor]:
        m = tokens_to_map(f)
        h, w = m.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"pyramid input grid {h}x{w} must have even extents to downsample")
        if m.shape[1] != self.cfg.embed_dim:
            raise ShapeError(f"pyramid expects {self.cfg.embed_dim} channels, got {m.shape[1]}")
        f1 = gelu(channel_layer_norm(deconv2d(m, self.up4_w, self.up4_b, 4), self.up4_g, self.up4_n))
        f2 = gelu(channel_layer_norm(deconv2d(m, self.up2_w, self.up2_b, 2), self.up2_g, self.up2_n))
        f3 = conv2d(m, self.same_w, self.same_b)
        f4 = conv2d(m, self.down_w, self.down_b, stride=2)
        return [f1, f2, f3, f4]


def pyramid_expand(f: Tensor, pyramid: Pyramid) -> List[Tensor]:
    return pyramid(f)


class SEFusion(Module):
    """Channel gates from pooled features: pool -> 1x1 conv -> ReLU -> 1x1 conv -> sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 modalities: Sequence[str] = ("x", "y")):
        super().__init__()
        self.channels = channels
        self.modalities = tuple(modalities)
        r = max(1, channels // SE_REDUCTION)
        for m in self.modalities:
            self.add_param(f"squeeze_{m}.weight", he_normal(rng, (r, channels, 1, 1), channels))
            self.add_param(f"squeeze_{m}.bias", np.zeros(r))
            self.add_param(f"excite_{m}.weight", trunc_normal(rng, (channels, r, 1, 1)))
            self.add_param(f"excite_{m}.bias", np.zeros(channels))

    def gate(self, f: Tensor, m: str) -> Tensor:
        """(N, C, H, W) -> (N, C) gates in (0, 1)."""
        p = self._params
        sw, sb = p[f"squeeze_{m}.weight"], p[f"squeeze_{m}.bias"]
        ew, eb = p[f"excite_{m}.weight"], p[f"excite_{m}.bias"]
        pooled = global_avg_pool(f)
        hidden = relu(pooled @ reshape(sw, sw.shape[:2]).transpose(1, 0) + sb)
        return sigmoid(hidden @ reshape(ew, ew.shape[:2]).transpose(1, 0) + eb)


def _expand(g: Tensor) -> Tensor:
    return reshape(g, g.shape + (1, 1))


def se_fuse(f_x: Tensor, f_y: Optional[Tensor], p: SEFusion) -> Tensor:
    """``g_x * F_x + g_y * F_y`` with channel gates broadcast over space.

    ``f_y=None`` (single modality) reduces to ``g_x * F_x``.
    """
    if f_x.ndim != 4 or f_x.shape[1] != p.channels:
        raise ShapeError(f"se_fuse expects (N, {p.channels}, H, W), got {f_x.shape}")
    out = _expand(p.gate(f_x, "x")) * f_x
    if f_y is None:
        return out
    if f_y.shape != f_x.shape:
        raise ShapeError(f"se_fuse operands differ in shape: {f_x.shape} vs {f_y.shape}")
    return out + _expand(p.gate(f_y, "y")) * f_y


class DeepFusionModule(Module):
    def __init__(self, cfg: PyramidConfig, rng: np.random.Generator,
                 modalities: Sequence[str] = ("x", "y")):
        super().__init__()
        self.cfg = cfg
        self.modalities = tuple(modalities)
        # separate pyramid weights per modality
        self.pyramids = {m: self.add_module(f"pyramid_{m}", Pyramid(cfg, rng)) for m in self.modalities}
        self.fusers = [self.add_module(f"se_fusion.{i}", SEFusion(ch, rng, self.modalities))
                       for i, ch in enumerate(cfg.channels)]

    def __call__(self, f_x: Tensor, f_y: Optional[Tensor] = None) -> List[Tensor]:
        return dfm_forward(self, f_x, f_y)

    @property
    def out_channels(self) -> Tuple[int, ...]:
        return tuple(self.cfg.channels)


def dfm_forward(dfm: DeepFusionModule, f_x: Tensor, f_y: Optional[Tensor] = None) -> List[Tensor]:
    """Pyramid-expand each modality, then SE-fuse per scale: returns [F_f^1..F_f^4]."""
    if f_y is not None and f_x.shape != f_y.shape:
        raise ShapeError(f"encoder outputs differ in shape: {f_x.shape} vs {f_y.shape}")
    px = dfm.pyramids["x"](f_x)
    py = dfm.pyramids["y"](f_y) if f_y is not None else [None] * 4
    return [se_fuse(a, b, fuser) for a, b, fuser in zip(px, py, dfm.fusers)]


class PlainLadder(Module):
    """Parameter-free stand-in used when the DFM is ablated.

    Averages the modality features and resamples them to the four scales
    (bilinear x4, bilinear x2, identity, 2x2 mean pool).
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim

    @property
    def out_channels(self) -> Tuple[int, ...]:
        return (self.embed_dim,) * 4

    def __call__(self, f_x: Tensor, f_y: Optional[Tensor] = None) -> List[Tensor]:
        m = tokens_to_map(f_x)
        if f_y is not None:
            m = (m + tokens_to_map(f_y)) * 0.5
        return [upsample_bilinear(m, 4), upsample_bilinear(m, 2), m, avg_pool2(m)]


def pyramid_param_count(cfg: PyramidConfig) -> int:
    c = cfg.embed_dim
    c1, c2, c3, c4 = cfg.channels
    return (c * c1 * 16 + 3 * c1) + (c * c2 * 4 + 3 * c2) + (c3 * c + c3) + (c4 * c * 4 + c4)


def se_param_count(channels: int) -> int:
    r = max(1, channels // SE_REDUCTION)
    return 2 * r * channels + r + channels


def dfm_param_count(cfg: PyramidConfig, n_modalities: int = 2) -> int:
    """Closed-form size of :class:`DeepFusionModule`."""
    return n_modalities * (pyramid_param_count(cfg) + sum(se_param_count(ch) for ch in cfg.channels))
