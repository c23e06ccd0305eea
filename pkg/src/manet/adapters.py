"""Bottleneck adapters for the frozen ViT blocks.

Two kinds are provided:

* :class:`Adapter` -- per-modality bottleneck ``ReLU(LN(x) W_d + b_d) W_u + b_u``
  with a learned scale ``s`` on its residual contribution.
* :class:`MMAdapter` -- one bottleneck per modality whose outputs are blended
  across branches with learned weights ``lam1``, ``lam2`` kept inside [0, 1].

:func:`install_adapters` attaches them to every block of an encoder. In
``standard`` mode each active modality gets a post-attention adapter and an
MLP-stage adapter; in ``mmadapter`` mode the MLP-stage pair is replaced by a
single shared MMAdapter.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .functional import layer_norm, relu
from .nn import Module, trunc_normal
from .tensor import ShapeError, Tensor

MODES = ("none", "standard", "mmadapter")

S_INIT = 0.5
LAMBDA_INIT = 0.5


def default_bottleneck(embed_dim: int) -> int:
    return max(1, embed_dim // 4)


class Adapter(Module):
    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        if not 0 < bottleneck < dim:
            raise ValueError(f"adapter bottleneck must satisfy 0 < bottleneck < dim, got {bottleneck} vs {dim}")
        self.dim, self.bottleneck = dim, bottleneck
        self.W_d = self.add_param("W_d", trunc_normal(rng, (dim, bottleneck)))
        self.b_d = self.add_param("b_d", np.zeros(bottleneck)) if bias else None
        # zero up-projection: adapters start as no-ops on the frozen block
        self.W_u = self.add_param("W_u", np.zeros((bottleneck, dim)))
        self.b_u = self.add_param("b_u", np.zeros(dim)) if bias else None
        self.s = self.add_param("s", np.full(1, S_INIT))

    @staticmethod
    def count(dim: int, bottleneck: int, bias: bool = True) -> int:
        return 2 * dim * bottleneck + (bottleneck + dim if bias else 0) + 1


class MMAdapter(Module):
    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        if not 0 < bottleneck < dim:
            raise ValueError(f"adapter bottleneck must satisfy 0 < bottleneck < dim, got {bottleneck} vs {dim}")
        self.dim, self.bottleneck = dim, bottleneck
        self.W_dx = self.add_param("W_dx", trunc_normal(rng, (dim, bottleneck)))
        self.b_dx = self.add_param("b_dx", np.zeros(bottleneck)) if bias else None
        self.W_ux = self.add_param("W_ux", np.zeros((bottleneck, dim)))
        self.b_ux = self.add_param("b_ux", np.zeros(dim)) if bias else None
        self.W_dy = self.add_param("W_dy", trunc_normal(rng, (dim, bottleneck)))
        self.b_dy = self.add_param("b_dy", np.zeros(bottleneck)) if bias else None
        self.W_uy = self.add_param("W_uy", np.zeros((bottleneck, dim)))
        self.b_uy = self.add_param("b_uy", np.zeros(dim)) if bias else None
        self.lam1 = self.add_param("lam1", np.full(1, LAMBDA_INIT), bounds=(0.0, 1.0))
        self.lam2 = self.add_param("lam2", np.full(1, LAMBDA_INIT), bounds=(0.0, 1.0))

    @staticmethod
    def count(dim: int, bottleneck: int, bias: bool = True) -> int:
        return 2 * (2 * dim * bottleneck + (bottleneck + dim if bias else 0)) + 2


def plain_norm(x: Tensor) -> Tensor:
    return layer_norm(x)


def bottleneck(xn: Tensor, W_d, b_d, W_u, b_u) -> Tensor:
    """``ReLU(xn W_d + b_d) W_u + b_u`` on already-normalized tokens."""
    if xn.shape[-1] != W_d.shape[0]:
        raise ShapeError(f"adapter expects last axis {W_d.shape[0]}, got input {xn.shape}")
    h = xn @ W_d
    if b_d is not None:
        h = h + b_d
    out = relu(h) @ W_u
    if b_u is not None:
        out = out + b_u
    return out


def adapter_forward(x_i: Tensor, p: Adapter, norm: Callable[[Tensor], Tensor] = plain_norm) -> Tensor:
    """Adapted feature ``x_a`` for one modality; ``norm`` is the block's layer norm."""
    return bottleneck(norm(x_i), p.W_d, p.b_d, p.W_u, p.b_u)


def block_residual_std(x_i: Tensor, mlp_out: Tensor, x_a: Tensor, s) -> Tensor:
    """``mlp_out + s * x_a + x_i``."""
    if not (x_i.shape == mlp_out.shape == x_a.shape):
        raise ShapeError(f"residual operands differ in shape: {x_i.shape}, {mlp_out.shape}, {x_a.shape}")
    return mlp_out + s * x_a + x_i


def mmadapter_forward(x_i: Tensor, y_i: Tensor, p: MMAdapter,
                      mlp: Callable[[Tensor], Tensor],
                      norm: Callable[[Tensor], Tensor] = plain_norm) -> Tuple[Tensor, Tensor]:
    """Cross-modal MLP stage.

    x_o = MLP(LN(x_i)) + lam1 * x_a + (1 - lam1) * y_a + x_i
    y_o = MLP(LN(y_i)) + lam2 * y_a + (1 - lam2) * x_a + y_i
    """
    if x_i.shape != y_i.shape:
        raise ShapeError(f"modalities differ in shape: {x_i.shape} vs {y_i.shape}")
    xn, yn = norm(x_i), norm(y_i)
    x_a = bottleneck(xn, p.W_dx, p.b_dx, p.W_ux, p.b_ux)
    y_a = bottleneck(yn, p.W_dy, p.b_dy, p.W_uy, p.b_uy)
    x_o = mlp(xn) + p.lam1 * x_a + (1.0 - p.lam1) * y_a + x_i
    y_o = mlp(yn) + p.lam2 * y_a + (1.0 - p.lam2) * x_a + y_i
    return x_o, y_o


def install_adapters(encoder, bottleneck_dim: Optional[int], mode: str,
                     modalities: Sequence[str] = ("x", "y"),
                     rng: Optional[np.random.Generator] = None, bias: bool = True) -> None:
    """Attach adapters to every block of ``encoder`` (once).

    ``modalities`` lists the active branches ("x" optical, "y" dsm); adapters
    are only created for branches that will run, so every trainable
    parameter receives a gradient.
    """
    if mode not in MODES:
        raise ValueError(f"unknown adapter mode {mode!r}; expected one of {MODES}")
    if getattr(encoder, "adapter_mode", None) is not None:
        raise RuntimeError(f"adapters already installed (mode={encoder.adapter_mode!r})")
    modalities = tuple(modalities)
    if mode == "mmadapter" and set(modalities) != {"x", "y"}:
        raise ValueError("mmadapter mode needs both modalities")
    rng = rng if rng is not None else np.random.default_rng(0)
    dim = encoder.config.embed_dim
    bdim = bottleneck_dim or default_bottleneck(dim)
    encoder.adapter_mode = mode
    encoder.adapter_bottleneck = bdim
    if mode == "none":
        return
    for block in encoder.blocks:
        for m in modalities:
            block.add_module(f"adapter_attn_{m}", Adapter(dim, bdim, rng, bias))
        if mode == "standard":
            for m in modalities:
                block.add_module(f"adapter_mlp_{m}", Adapter(dim, bdim, rng, bias))
        else:
            block.add_module("mmadapter", MMAdapter(dim, bdim, rng, bias))
    encoder.assign_names()


def adapter_param_count(depth: int, dim: int, bottleneck_dim: int, mode: str,
                        n_modalities: int = 2, bias: bool = True) -> int:
    """Closed-form trainable count of :func:`install_adapters`."""
    per = Adapter.count(dim, bottleneck_dim, bias)
    if mode == "none":
        return 0
    if mode == "standard":
        return depth * 2 * per * n_modalities
    if mode == "mmadapter":
        return depth * (n_modalities * per + MMAdapter.count(dim, bottleneck_dim, bias))
    raise ValueError(f"unknown adapter mode {mode!r}")
