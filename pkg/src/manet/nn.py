"""Module base class with a hierarchical Parameter registry, and weight initializers."""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import DTYPE, Parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(DTYPE)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)


class Module:
    """Container of named Parameters and child Modules.

    Names are dotted paths (``blocks.0.attn.q_weight``); registration order is
    preserved so iteration and checkpoints are deterministic.
    """

    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, data, trainable: bool = True,
                  bounds: Optional[Tuple[float, float]] = None) -> Parameter:
        if name in self._params or name in self._children:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, trainable=trainable, bounds=bounds)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        if name in self._params or name in self._children:
            raise KeyError(f"duplicate module name {name!r}")
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def assign_names(self, prefix: str = "") -> None:
        """Stamp every Parameter with its full dotted path under this module."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable: Optional[bool] = None) -> int:
        return sum(p.size for p in self.parameters()
                   if trainable is None or p.trainable == trainable)
