"""Plain (non-hierarchical) ViT image encoder shared by the optical and DSM branches.

All backbone parameters are frozen. Both modalities run through the same
Parameter objects; per-block adapter slots are filled by
:func:`manet.adapters.install_adapters`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import adapters as ad
from .functional import conv2d, gelu, layer_norm, softmax
from .nn import Module, trunc_normal
from .tensor import ShapeError, Tensor, as_tensor, concat, reshape

PATCH = 16


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = PATCH
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


VIT_B = EncoderConfig(image_size=1024, embed_dim=768, depth=12, heads=12)
VIT_L = EncoderConfig(image_size=1024, embed_dim=1024, depth=24, heads=16)
VIT_H = EncoderConfig(image_size=1024, embed_dim=1280, depth=32, heads=16)


def block_param_shapes(c: int, hidden: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        ("ln1_gamma", (c,)), ("ln1_beta", (c,)),
        ("q_weight", (c, c)), ("q_bias", (c,)),
        ("k_weight", (c, c)), ("k_bias", (c,)),
        ("v_weight", (c, c)), ("v_bias", (c,)),
        ("proj_weight", (c, c)), ("proj_bias", (c,)),
        ("ln2_gamma", (c,)), ("ln2_beta", (c,)),
        ("fc1_weight", (c, hidden)), ("fc1_bias", (hidden,)),
        ("fc2_weight", (hidden, c)), ("fc2_bias", (c,)),
    ]


def encoder_param_shapes(cfg: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Backbone parameter ledger (adapters excluded), in registration order."""
    c, p, g = cfg.embed_dim, cfg.patch_size, cfg.grid
    shapes = [("patch_embed.weight", (c, 3, p, p)), ("patch_embed.bias", (c,)),
              ("pos_embed", (g, g, c))]
    for i in range(cfg.depth):
        shapes += [(f"blocks.{i}.{name}", shape) for name, shape in block_param_shapes(c, cfg.hidden)]
    return shapes


def count_parameters(cfg: EncoderConfig) -> int:
    """Exact backbone parameter total, computed from the ledger without allocating weights."""
    return sum(math.prod(shape) for _, shape in encoder_param_shapes(cfg))


def _init_block_param(name: str, shape, rng) -> np.ndarray:
    if name.endswith("gamma"):
        return np.ones(shape)
    if name.endswith("beta") or name.endswith("bias"):
        return np.zeros(shape)
    return trunc_normal(rng, shape)


def lift_dsm(dsm) -> Tensor:
    """Replicate a single-channel DSM raster to three channels: (1, H, W) -> (3, H, W)."""
    dsm = as_tensor(dsm)
    axis = dsm.ndim - 3
    if dsm.ndim not in (3, 4) or dsm.shape[axis] != 1:
        raise ShapeError(f"lift_dsm expects a single-channel (1, H, W) raster, got {dsm.shape}")
    return concat([dsm, dsm, dsm], axis=axis)


class ViTBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.heads = cfg.heads
        for name, shape in block_param_shapes(cfg.embed_dim, cfg.hidden):
            setattr(self, name, self.add_param(name, _init_block_param(name, shape, rng), trainable=False))

    def ln1(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.ln1_gamma, self.ln1_beta)

    def ln2(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.ln2_gamma, self.ln2_beta)

    def attention(self, xn: Tensor, return_weights: bool = False):
        n, h, w, c = xn.shape
        heads, d = self.heads, c // self.heads
        tokens = reshape(xn, (n, h * w, c))

        def split(t):
            return reshape(t, (n, h * w, heads, d)).transpose(0, 2, 1, 3)

        q = split(tokens @ self.q_weight + self.q_bias)
        k = split(tokens @ self.k_weight + self.k_bias)
        v = split(tokens @ self.v_weight + self.v_bias)
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)), axis=-1)
        out = reshape((attn @ v).transpose(0, 2, 1, 3), (n, h * w, c))
        out = reshape(out @ self.proj_weight + self.proj_bias, (n, h, w, c))
        return (out, attn) if return_weights else out

    def mlp(self, xn: Tensor) -> Tensor:
        return gelu(xn @ self.fc1_weight + self.fc1_bias) @ self.fc2_weight + self.fc2_bias

    def _attn_stage(self, t: Tensor, branch: str) -> Tensor:
        h = self.attention(self.ln1(t))
        adapter = self._children.get(f"adapter_attn_{branch}")
        if adapter is not None:
            h = h + adapter.s * ad.adapter_forward(h, adapter)
        return t + h

    def _mlp_stage(self, t: Tensor, branch: str) -> Tensor:
        xn = self.ln2(t)
        out = self.mlp(xn) + t
        adapter = self._children.get(f"adapter_mlp_{branch}")
        if adapter is not None:
            x_a = ad.bottleneck(xn, adapter.W_d, adapter.b_d, adapter.W_u, adapter.b_u)
            out = out + adapter.s * x_a
        return out

    def forward_pair(self, x: Optional[Tensor], y: Optional[Tensor]):
        """Advance the active branches through this block; ``None`` marks an inactive branch."""
        x_i = self._attn_stage(x, "x") if x is not None else None
        y_i = self._attn_stage(y, "y") if y is not None else None
        mm = self._children.get("mmadapter")
        if mm is not None:
            if x_i is None or y_i is None:
                raise RuntimeError("MMAdapter block needs both modalities")
            x_o, y_o = ad.mmadapter_forward(x_i, y_i, mm, self.mlp, self.ln2)
        else:
            x_o = self._mlp_stage(x_i, "x") if x_i is not None else None
            y_o = self._mlp_stage(y_i, "y") if y_i is not None else None
        for before, after in ((x, x_o), (y, y_o)):
            if before is not None and before.shape != after.shape:
                raise AssertionError(f"block changed token shape {before.shape} -> {after.shape}")
        return x_o, y_o


class SamEncoder(Module):
    """Frozen ViT backbone: 16x16 patch embedding, absolute position embedding, global-attention blocks."""

    def __init__(self, cfg: EncoderConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        c, p, g = cfg.embed_dim, cfg.patch_size, cfg.grid
        self.patch_weight = self.add_param("patch_embed.weight", trunc_normal(rng, (c, 3, p, p)), trainable=False)
        self.patch_bias = self.add_param("patch_embed.bias", np.zeros(c), trainable=False)
        self.pos_embed = self.add_param("pos_embed", trunc_normal(rng, (g, g, c)), trainable=False)
        self.blocks: List[ViTBlock] = []
        for i in range(cfg.depth):
            block = ViTBlock(cfg, rng)
            self.blocks.append(block)
            self.add_module(f"blocks.{i}", block)
        self.adapter_mode: Optional[str] = None
        self.adapter_bottleneck: Optional[int] = None
        self.assign_names()

    def backbone_parameters(self):
        return [p for name, p in self.named_parameters() if "adapter" not in name]

    def patch_embed(self, image) -> Tensor:
        """(3, H, W) -> (h, w, c) tokens, or batched (N, 3, H, W) -> (N, h, w, c)."""
        image = as_tensor(image)
        cfg = self.config
        if image.ndim not in (3, 4) or image.shape[-3] != 3:
            raise ShapeError(f"patch_embed expects a 3-channel image, got {image.shape}")
        hh, ww = image.shape[-2:]
        if hh % cfg.patch_size or ww % cfg.patch_size:
            raise ShapeError(f"image extent {hh}x{ww} not divisible by patch size {cfg.patch_size}")
        if (hh // cfg.patch_size, ww // cfg.patch_size) != self.pos_embed.shape[:2]:
            raise ShapeError(f"image extent {hh}x{ww} does not match configured size {cfg.image_size}")
        emb = conv2d(image, self.patch_weight, self.patch_bias, stride=cfg.patch_size)
        axes = (1, 2, 0) if emb.ndim == 3 else (0, 2, 3, 1)
        return emb.transpose(*axes) + self.pos_embed

    def _run(self, x: Optional[Tensor], y: Optional[Tensor]):
        squeeze = (x if x is not None else y).ndim == 3
        if squeeze:
            x = reshape(x, (1,) + x.shape) if x is not None else None
            y = reshape(y, (1,) + y.shape) if y is not None else None
        for block in self.blocks:
            x, y = block.forward_pair(x, y)
        if squeeze:
            x = reshape(x, x.shape[1:]) if x is not None else None
            y = reshape(y, y.shape[1:]) if y is not None else None
        return x, y

    def encode(self, x_img) -> Tensor:
        """Single optical branch."""
        return self._run(self.patch_embed(x_img), None)[0]

    def encode_pair(self, x_img, y_dsm) -> Tuple[Tensor, Tensor]:
        """Run both branches with shared backbone weights: returns (F_x, F_y)."""
        x_img, y_dsm = as_tensor(x_img), as_tensor(y_dsm)
        if x_img.shape[-2:] != y_dsm.shape[-2:] or x_img.ndim != y_dsm.ndim:
            raise ShapeError(f"modality extents differ: optical {x_img.shape} vs dsm {y_dsm.shape}")
        return self._run(self.patch_embed(x_img), self.patch_embed(lift_dsm(y_dsm)))
