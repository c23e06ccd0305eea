"""Full network: shared-weight dual-branch encoder -> DFM -> decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .adapters import MODES, adapter_param_count, default_bottleneck, install_adapters
from .decoder import Decoder, DecoderConfig, decoder_param_count
from .encoder import EncoderConfig, SamEncoder, count_parameters
from .fusion import DeepFusionModule, PlainLadder, PyramidConfig, dfm_param_count
from .nn import Module
from .tensor import ShapeError, Tensor, as_tensor

MODALITIES = ("optical", "both")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    bottleneck: int = 0  # 0 -> embed_dim // 4
    num_classes: int = 6
    decoder_width: int = 16
    adapter: str = "mmadapter"
    modality: str = "both"
    dfm: bool = True
    adapter_bias: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.adapter not in MODES:
            raise ValueError(f"adapter must be one of {MODES}, got {self.adapter!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.adapter == "mmadapter" and self.modality != "both":
            raise ValueError("the mmadapter needs modality=both")
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        self.encoder_config()  # validates patch/heads

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.depth,
                             self.heads, self.mlp_ratio)

    @property
    def bottleneck_dim(self) -> int:
        return self.bottleneck or default_bottleneck(self.embed_dim)

    @property
    def branches(self) -> Tuple[str, ...]:
        return ("x", "y") if self.modality == "both" else ("x",)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class MANet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.encoder = self.add_module("encoder", SamEncoder(cfg.encoder_config(), rng))
        install_adapters(self.encoder, cfg.bottleneck_dim, cfg.adapter, cfg.branches, rng, cfg.adapter_bias)
        if cfg.dfm:
            self.fusion = self.add_module("dfm", DeepFusionModule(PyramidConfig.default(cfg.embed_dim), rng,
                                                                  cfg.branches))
        else:
            self.fusion = self.add_module("ladder", PlainLadder(cfg.embed_dim))
        self.decoder = self.add_module(
            "decoder", Decoder(self.fusion.out_channels, DecoderConfig(cfg.num_classes, cfg.decoder_width), rng))
        self.assign_names()
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise AssertionError("parameter names are not unique")

    def encode(self, optical, dsm=None) -> Tuple[Tensor, Optional[Tensor]]:
        if self.config.modality == "both":
            if dsm is None:
                raise ValueError("modality=both needs a dsm input")
            return self.encoder.encode_pair(optical, dsm)
        return self.encoder.encode(optical), None

    def forward(self, optical, dsm=None, return_features: bool = False):
        """Batched (N, 3, H, W) optical [+ (N, 1, H, W) dsm] -> (N, K, H, W) logits."""
        optical = as_tensor(optical)
        squeeze = optical.ndim == 3
        if squeeze:
            optical = optical.reshape((1,) + optical.shape)
            dsm = as_tensor(dsm).reshape((1,) + as_tensor(dsm).shape) if dsm is not None else None
        h, w = optical.shape[-2:]
        f_x, f_y = self.encode(optical, dsm)
        logits = self.decoder(self.fusion(f_x, f_y), h, w)
        if squeeze:
            logits = logits.reshape(logits.shape[1:])
        if return_features:
            return logits, (f_x, f_y)
        return logits

    __call__ = forward

    def frozen_parameters(self):
        return [p for p in self.parameters() if not p.trainable]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]


def component_of(name: str) -> str:
    if name.startswith("encoder."):
        return "adapters" if "adapter" in name else "encoder backbone"
    if name.startswith("dfm.") or name.startswith("ladder."):
        return "dfm"
    if name.startswith("decoder."):
        return "decoder"
    raise KeyError(name)


def parameter_report(model: MANet) -> Dict[str, Dict[str, int]]:
    """Per-component frozen/trainable counts from the live registry."""
    report: Dict[str, Dict[str, int]] = {}
    for name, p in model.named_parameters():
        row = report.setdefault(component_of(name), {"frozen": 0, "trainable": 0})
        row["trainable" if p.trainable else "frozen"] += p.size
    return report


# SAM image-encoder pieces this plain ViT does not carry; counted for the report only.
def sam_excluded_components(cfg: EncoderConfig, window: int = 14,
                            global_blocks: Optional[Tuple[int, ...]] = None,
                            neck_dim: int = 256) -> Dict[str, int]:
    head_dim = cfg.embed_dim // cfg.heads
    if global_blocks is None:
        step = max(1, cfg.depth // 4)
        global_blocks = tuple(range(step - 1, cfg.depth, step))[:4]
    rel = 0
    for i in range(cfg.depth):
        size = cfg.grid if i in global_blocks else window
        rel += 2 * (2 * size - 1) * head_dim
    c = cfg.embed_dim
    neck = neck_dim * c + 2 * neck_dim + neck_dim * neck_dim * 9 + 2 * neck_dim
    return {"relative position encodings": rel, "neck (1x1 conv, LN, 3x3 conv, LN)": neck}


def static_parameter_counts(cfg: ModelConfig) -> Dict[str, int]:
    """Per-component counts by closed form, without allocating any weights."""
    pyr = PyramidConfig.default(cfg.embed_dim)
    fused_channels = pyr.channels if cfg.dfm else (cfg.embed_dim,) * 4
    return {
        "encoder backbone": count_parameters(cfg.encoder_config()),
        "adapters": adapter_param_count(cfg.depth, cfg.embed_dim, cfg.bottleneck_dim, cfg.adapter,
                                        len(cfg.branches), cfg.adapter_bias),
        "dfm": dfm_param_count(pyr, len(cfg.branches)) if cfg.dfm else 0,
        "decoder": decoder_param_count(fused_channels, DecoderConfig(cfg.num_classes, cfg.decoder_width)),
    }
