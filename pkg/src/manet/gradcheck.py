"""Central finite-difference checks of autodiff gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import DTYPE, Tensor, backward

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass
class GradcheckResult:
    rel_error: float  # worst over the inputs
    per_input: List[float]

    @property
    def ok(self) -> bool:
        return self.rel_error <= TOLERANCE


def _probe_loss(out: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(out.astype(np.float64).ravel(), w.ravel()))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
              step: float = STEP, reference: Optional[Callable[..., np.ndarray]] = None) -> GradcheckResult:
    """Compare autodiff against central differences for ``loss = sum(fn(*inputs) * w)``.

    ``w`` is a fixed random probe so every output element contributes. Errors are
    ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, 1e-8)`` per input tensor.

    If ``reference`` is given (a float64 numpy implementation of ``fn``), the
    differences are taken on it instead, which removes float32 rounding from the
    finite-difference side.
    """
    arrays = [np.asarray(a, dtype=DTYPE).copy() for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    w = rng.standard_normal(out.shape)
    backward((out * Tensor(w)).sum())
    errors = []
    for i, arr in enumerate(arrays):
        auto = leaves[i].grad.astype(np.float64) if leaves[i].grad is not None else np.zeros(arr.shape)
        fd = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        if reference is not None:
            arr = arr.astype(np.float64)
            flat = arr.reshape(-1)
        probe_args = arrays[:i] + [arr] + arrays[i + 1:]
        evaluate = ((lambda: _probe_loss(np.asarray(reference(*probe_args)), w)) if reference is not None
                    else (lambda: _probe_loss(fn(*[Tensor(a) for a in probe_args]).data, w)))
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            plus = evaluate()
            flat[j] = orig - step
            minus = evaluate()
            flat[j] = orig
            fd.reshape(-1)[j] = (plus - minus) / (2 * step)
        scale = max(np.linalg.norm(auto), np.linalg.norm(fd), 1e-8)
        errors.append(float(np.linalg.norm(auto - fd) / scale))
    return GradcheckResult(max(errors), errors)
