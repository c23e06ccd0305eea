"""Independent oracles and the gradient-check case table shared by the test modules.

Oracles deliberately use scalar loops or direct enumeration so they share no
code path with the implementation under test.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from manet import functional as F
from manet.adapters import bottleneck
from manet.tensor import Tensor, concat, exp, log, matmul, mean, reshape, sqrt, sum_


# -- scalar oracles -------------------------------------------------------------
def matmul_oracle(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def conv_oracle(x, w, stride=1, pad=0, bias=None):
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = float(np.sum(xp[:, i * stride:i * stride + k, j * stride:j * stride + k] * w[o]))
                if bias is not None:
                    out[o, i, j] += bias[o]
    return out


def deconv_oracle(x, w, up):
    """Scatter-add: every input pixel stamps its weighted kernel into the output."""
    ci, h, wd = x.shape
    co = w.shape[1]
    out = np.zeros((co, h * up, wd * up))
    for c in range(ci):
        for i in range(h):
            for j in range(wd):
                out[:, i * up:(i + 1) * up, j * up:(j + 1) * up] += x[c, i, j] * w[c]
    return out


def confusion_oracle(truth, pred, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(np.ravel(truth), np.ravel(pred)):
        cm[int(t), int(p)] += 1
    return cm


def metrics_oracle(cm, background=5):
    """Per-class IoU / F1 by formula, means over foreground classes that appear."""
    k = cm.shape[0]
    iou, f1 = {}, {}
    for c in range(k):
        tp = cm[c, c]
        fp = sum(cm[r, c] for r in range(k)) - tp
        fn = sum(cm[c, q] for q in range(k)) - tp
        if tp + fp + fn == 0:
            continue
        iou[c] = 100.0 * tp / (tp + fp + fn)
        f1[c] = 100.0 * 2 * tp / (2 * tp + fp + fn)
    fg = [c for c in iou if c != background]
    oa = 100.0 * sum(cm[c, c] for c in range(k)) / cm.sum()
    mf1 = sum(f1[c] for c in fg) / len(fg) if fg else float("nan")
    miou = sum(iou[c] for c in fg) / len(fg) if fg else float("nan")
    return oa, mf1, miou, iou, f1


def tiler_oracle(extent, window, stride):
    """Brute force: every stride multiple that fits, plus the clamped edge window."""
    def axis(n):
        offs = []
        o = 0
        while o + window <= n:
            offs.append(o)
            o += stride
        if not offs or offs[-1] + window < n:
            offs.append(n - window)
        return offs
    return [(r, c) for r in axis(extent[0]) for c in axis(extent[1])]


def stitch_oracle(tiles, extent, k):
    acc = np.zeros((k,) + tuple(extent))
    cnt = np.zeros(extent)
    for (r, c), prob in tiles:
        win = prob.shape[-1]
        for i in range(win):
            for j in range(win):
                acc[:, r + i, c + j] += prob[:, i, j]
                cnt[r + i, c + j] += 1
    avg = acc / cnt
    return (avg / avg.sum(axis=0, keepdims=True)).astype(np.float32)


def softmax_ce_oracle(logits, labels):
    """Mean cross-entropy over (K, H, W) logits, evaluated pixel by pixel."""
    k, h, w = logits.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            zs = [float(logits[c, i, j]) for c in range(k)]
            m = max(zs)
            lse = m + math.log(sum(math.exp(z - m) for z in zs))
            total += lse - zs[int(labels[i, j])]
    return total / (h * w)


# -- gradient-check cases ----------------------------------------------------------
def _away_from_zero(rng, shape, margin=0.05):
    mag = rng.uniform(margin, 1.5, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _case(fn, *shapes, positive=(), kink=()):
    def make(rng):
        arrays = []
        for i, s in enumerate(shapes):
            if i in positive:
                arrays.append(rng.uniform(0.5, 2.0, size=s))
            elif i in kink:
                arrays.append(_away_from_zero(rng, s))
            else:
                arrays.append(rng.standard_normal(s))
        return fn, arrays
    return make


def _ce(logits):
    labels = np.arange(4).reshape(2, 2) % logits.shape[0]
    return F.cross_entropy(logits, labels)


def _ce_batched(logits):
    labels = (np.arange(4).reshape(2, 1, 2) * 7) % logits.shape[1]
    return F.cross_entropy(logits, labels)


GRAD_CASES: Dict[str, Callable] = {
    "add": _case(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _case(lambda a, b: a - b, (2, 3), (2, 3)),
    "mul": _case(lambda a, b: a * b, (3, 1), (3, 4)),
    "div": _case(lambda a, b: a / b, (3, 4), (3, 4), positive=(1,)),
    "neg": _case(lambda a: -a, (5,)),
    "exp": _case(exp, (3, 3)),
    "log": _case(log, (3, 3), positive=(0,)),
    "sqrt": _case(sqrt, (3, 3), positive=(0,)),
    "matmul": _case(matmul, (3, 4), (4, 2)),
    "matmul_batched": _case(matmul, (2, 3, 4), (4, 3)),
    "sum": _case(lambda a: sum_(a, axis=1), (3, 4)),
    "mean": _case(lambda a: mean(a, axis=(0, 2)), (2, 3, 2)),
    "reshape": _case(lambda a: reshape(a, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3)), (3, 4)),
    "transpose": _case(lambda a: a.transpose(2, 0, 1) @ Tensor(np.ones((3, 2))), (3, 3, 2)),
    "index": _case(lambda a: a[1:, ::2], (3, 4)),
    "concat": _case(lambda a, b: concat([a, b], axis=1), (2, 2), (2, 3)),
    "relu": _case(F.relu, (4, 5), kink=(0,)),
    "gelu": _case(F.gelu, (4, 5)),
    "sigmoid": _case(F.sigmoid, (4, 5)),
    "softmax": _case(lambda a: F.softmax(a, axis=-1), (3, 5)),
    "log_softmax": _case(lambda a: F.log_softmax(a, axis=0), (4, 3)),
    "layer_norm": _case(F.layer_norm, (3, 6), (6,), (6,)),
    "channel_layer_norm": _case(F.channel_layer_norm, (1, 4, 2, 2), (4,), (4,)),
    "conv2d_3x3_pad1": _case(lambda x, w, b: F.conv2d(x, w, b, pad=1), (2, 4, 4), (3, 2, 3, 3), (3,)),
    "conv2d_stride2": _case(lambda x, w: F.conv2d(x, w, stride=2), (2, 6, 6), (2, 2, 2, 2)),
    "conv2d_1x1": _case(lambda x, w, b: F.conv2d(x, w, b), (1, 3, 3, 3), (2, 3, 1, 1), (2,)),
    "deconv2d_x2": _case(lambda x, w, b: F.deconv2d(x, w, b, 2), (2, 3, 3), (2, 2, 2, 2), (2,)),
    "deconv2d_x4": _case(lambda x, w: F.deconv2d(x, w, None, 4), (2, 2, 2), (2, 1, 4, 4)),
    "global_avg_pool": _case(F.global_avg_pool, (1, 3, 3, 4)),
    "avg_pool2": _case(F.avg_pool2, (1, 2, 4, 4)),
    "upsample_bilinear_x2": _case(lambda x: F.upsample_bilinear(x, 2), (1, 2, 3, 3)),
    "upsample_bilinear_x4": _case(lambda x: F.upsample_bilinear(x, 4), (1, 1, 2, 3)),
    "cross_entropy": _case(_ce, (4, 2, 2)),
    "cross_entropy_batched": _case(_ce_batched, (2, 3, 1, 2)),
}


# Composite paths through several primitives. Their finite differences are
# taken on float64 numpy re-implementations, so the comparison is against an
# independent oracle rather than against the float32 forward itself.
def _np_relu(z):
    return np.maximum(z, 0.0)


def _np_ln(x):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-6)


def _np_softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _adapter_path(x, wd, bd, wu, bu):
    return bottleneck(F.layer_norm(x), wd, bd, wu, bu)


def _adapter_ref(x, wd, bd, wu, bu):
    return _np_relu(_np_ln(x) @ wd + bd) @ wu + bu


def _se_gate(f, sw, sb, ew, eb):
    pooled = F.global_avg_pool(f)
    return F.sigmoid(F.relu(pooled @ sw + sb) @ ew + eb)


def _se_ref(f, sw, sb, ew, eb):
    z = _np_relu(f.mean(axis=(-2, -1)) @ sw + sb) @ ew + eb
    return 1.0 / (1.0 + np.exp(-z))


def _attention(x, wq, wk, wv):
    q, k, v = x @ wq, x @ wk, x @ wv
    return F.softmax((q @ k.transpose(1, 0)) * 0.5, axis=-1) @ v


def _attention_ref(x, wq, wk, wv):
    q, k, v = x @ wq, x @ wk, x @ wv
    return _np_softmax((q @ k.T) * 0.5) @ v


def _composite(fn, ref, *shapes, kink=None):
    """Case maker; ``kink`` returns ReLU pre-activations, kept >= 0.02 away from zero."""
    def make(rng):
        while True:
            arrays = [rng.standard_normal(s) for s in shapes]
            if kink is None or np.abs(kink(*arrays)).min() > 0.02:
                return fn, arrays, ref
    return make


COMPOSITE_CASES: Dict[str, Callable] = {
    "adapter_bottleneck": _composite(_adapter_path, _adapter_ref, (2, 3, 6), (6, 3), (3,), (3, 6), (6,),
                                     kink=lambda x, wd, bd, *_: _np_ln(x) @ wd + bd),
    "se_gate": _composite(_se_gate, _se_ref, (2, 4, 2, 2), (4, 2), (2,), (2, 4), (4,),
                          kink=lambda f, sw, sb, *_: f.mean(axis=(-2, -1)) @ sw + sb),
    "attention": _composite(_attention, _attention_ref, (4, 4), (4, 4), (4, 4), (4, 4)),
}


INSTANCES_PER_OP = 20


def gradcheck_all(seed: int = 0, instances: int = INSTANCES_PER_OP,
                  cases: Dict[str, Callable] = GRAD_CASES) -> Dict[str, List[float]]:
    """Relative error of every instance of every case."""
    from manet.gradcheck import gradcheck

    out: Dict[str, List[float]] = {}
    for name, make in cases.items():
        errs = []
        for i in range(instances):
            rng = np.random.default_rng([seed, i, len(name)])
            fn, arrays, *ref = make(rng)
            errs.append(gradcheck(fn, arrays, rng, reference=ref[0] if ref else None).rel_error)
        out[name] = errs
    return out


def all_offsets(n: int) -> List[Tuple[int, int]]:
    return list(itertools.product(range(n), range(n)))
