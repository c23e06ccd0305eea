"""Optimization, metrics, checkpoints, training and sliding-window evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .data import TAXONOMY, ClassTaxonomy, Sample, augment, slide_windows, stitch_average
from .functional import cross_entropy
from .model import MANet, ModelConfig
from .tensor import Parameter, Tensor, backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MANC"
CHECKPOINT_VERSION = 1
METRIC_HEADER = "epoch,loss,OA,mF1,mIoU"


class TrainingError(RuntimeError):
    """Raised on NaN losses, detached parameters or freeze violations."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    epochs: int = 30
    seed: int = 0
    train_stride: int = 0  # 0 -> window (no overlap)
    eval_stride: int = 0  # 0 -> window // 2
    augment: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ------------------------------------------------------------------
def sgd_step(params: Iterable[Parameter], state: Dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """Momentum SGD with L2 weight decay, applied in place to trainable parameters only.

    v <- momentum * v + grad + weight_decay * w ;  w <- w - lr * v
    Parameters with ``bounds`` are projected back into their box afterwards.
    """
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise TrainingError(f"trainable parameter {p.name!r} has no gradient (detached from the loss)")
        g = p.grad + cfg.weight_decay * p.data
        v = state.get(p.name)
        v = g if v is None else cfg.momentum * v + g
        state[p.name] = v
        p.data -= (cfg.lr * v).astype(p.data.dtype)
        if p.bounds is not None:
            np.clip(p.data, p.bounds[0], p.bounds[1], out=p.data)


def loss_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    return cross_entropy(logits, labels)


# -- metrics --------------------------------------------------------------------
def accumulate_confusion(pred: np.ndarray, labels: np.ndarray, cm: np.ndarray) -> np.ndarray:
    """Add per-pixel (truth, prediction) counts into ``cm`` in place."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction extent {pred.shape} != label extent {labels.shape}")
    cm += kernels.confusion(labels, pred, cm.shape[0])
    return cm


@dataclass
class Metrics:
    oa: float
    mf1: float
    miou: float
    f1: np.ndarray  # per class, percent; nan where the class is absent
    iou: np.ndarray
    class_acc: np.ndarray

    def row(self) -> str:
        return f"{self.oa:.4f},{self.mf1:.4f},{self.miou:.4f}"


def metrics(cm: np.ndarray, taxonomy: ClassTaxonomy = TAXONOMY) -> Metrics:
    """OA over all classes; mF1 / mIoU averaged over foreground classes present in truth or prediction."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan) * 100.0
        iou = np.where(present, tp / (tp + fp + fn), np.nan) * 100.0
        acc = np.where(tp + fn > 0, tp / (tp + fn), np.nan) * 100.0
    fg = np.array(taxonomy.foreground[: cm.shape[0]]) & present
    mf1 = float(f1[fg].mean()) if fg.any() else float("nan")
    miou = float(iou[fg].mean()) if fg.any() else float("nan")
    return Metrics(float(tp.sum() / total * 100.0), mf1, miou, f1, iou, acc)


# -- checkpoints ------------------------------------------------------------------
def save_checkpoint(path, model: MANet) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", p.ndim),
                  struct.pack(f"<{p.ndim}I", *p.shape), struct.pack("<B", int(p.trainable)),
                  np.ascontiguousarray(p.data, dtype="<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MANet:
    """Rebuild the model recorded in a checkpoint and restore every parameter bitwise."""
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = take("<I")
    cfg = ModelConfig.from_dict(json.loads(bytes(buf[pos:pos + n])))
    pos += n
    model = MANet(cfg)
    registry = dict(model.named_parameters())
    (count,) = take("<I")
    if count != len(registry):
        raise ValueError(f"{path}: {count} parameters stored, model has {len(registry)}")
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(buf[pos:pos + n]).decode()
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        (trainable,) = take("<B")
        size = math.prod(shape)
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        p = registry.get(name)
        if p is None or p.shape != tuple(shape):
            raise ValueError(f"{path}: parameter {name} {shape} does not match the model")
        p.data = data.astype(np.float32)
        p.trainable = bool(trainable)
    return model


def frozen_hash(model: MANet) -> str:
    """SHA-256 over names and bytes of every frozen parameter."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.trainable:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- data plumbing -------------------------------------------------------------
def make_tiles(patches: Sequence[Tuple[str, Sample]], window: int, stride: int) -> List[Sample]:
    tiles = []
    for pid, sample in patches:
        for idx in slide_windows(sample.extent, window, stride, pid):
            tiles.append(sample.crop(idx.row, idx.col, window))
    return tiles


def _stack(tiles: Sequence[Sample], with_dsm: bool):
    opt = np.stack([t.optical for t in tiles])
    dsm = np.stack([t.dsm for t in tiles]) if with_dsm else None
    return opt, dsm, np.stack([t.labels for t in tiles])


def _first_bad_grad(model: MANet) -> Optional[str]:
    for name, p in model.named_parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            return name
    return None


# -- evaluation -------------------------------------------------------------------
def predict_patch(model: MANet, sample: Sample, stride: int, batch_size: int = 16) -> np.ndarray:
    """Sliding-window class probabilities for one patch, overlaps averaged: (K, H, W)."""
    window = model.config.image_size
    if min(sample.extent) < window:
        raise ValueError(f"patch extent {sample.extent} smaller than model window {window}")
    with_dsm = model.config.modality == "both"
    index = slide_windows(sample.extent, window, stride)
    tiles = []
    with no_grad():
        for i in range(0, len(index), batch_size):
            chunk = index[i:i + batch_size]
            crops = [sample.crop(t.row, t.col, window) for t in chunk]
            opt, dsm, _ = _stack(crops, with_dsm)
            logits = model(opt, dsm).data.astype(np.float64)
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs = z / z.sum(axis=1, keepdims=True)
            tiles.extend(zip(chunk, probs))
    return stitch_average(tiles, sample.extent)


@dataclass
class EvalResult:
    metrics: Metrics
    confusion: np.ndarray
    stride: int


def evaluate(model: MANet, patches: Sequence[Tuple[str, Sample]], stride: int = 0,
             taxonomy: ClassTaxonomy = TAXONOMY) -> EvalResult:
    """Sliding-window inference, overlap averaging, argmax and confusion over every test patch."""
    k = model.config.num_classes
    if k != taxonomy.num_classes:
        raise ValueError(f"model has {k} classes but taxonomy has {taxonomy.num_classes}")
    stride = stride or model.config.image_size // 2
    cm = np.zeros((k, k), dtype=np.int64)
    with threadpool_limits(1):
        for _, sample in patches:
            prob = predict_patch(model, sample, stride)
            accumulate_confusion(prob.argmax(axis=0), sample.labels, cm)
    return EvalResult(metrics(cm, taxonomy), cm, stride)


# -- training -------------------------------------------------------------------
@dataclass
class TrainResult:
    model: MANet
    log_lines: List[str] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    evals: List[Optional[EvalResult]] = field(default_factory=list)

    def metric_log(self) -> str:
        return "\n".join([METRIC_HEADER] + self.log_lines) + "\n"


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_set: Sequence[Tuple[str, Sample]],
          test_set: Optional[Sequence[Tuple[str, Sample]]] = None,
          on_epoch: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Fine-tune the trainable parameters; deterministic for a fixed seed (single-threaded).

    The frozen-parameter hash is compared after every epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    window = model_cfg.image_size
    tiles = make_tiles(train_set, window, cfg.train_stride or window)
    with_dsm = model_cfg.modality == "both"
    model = MANet(model_cfg)
    params = model.parameters()
    reference = frozen_hash(model)
    state: Dict[str, np.ndarray] = {}
    result = TrainResult(model)
    with threadpool_limits(1):
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(tiles))
            aug_seeds = rng.integers(0, 2 ** 31, size=len(tiles))
            total, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch_ids = order[start:start + cfg.batch_size]
                batch = [augment(tiles[i], int(aug_seeds[i])) if cfg.augment else tiles[i] for i in batch_ids]
                opt, dsm, labels = _stack(batch, with_dsm)
                loss = loss_ce(model(opt, dsm), labels)
                value = loss.item()
                if not math.isfinite(value):
                    backward(loss)
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}; "
                                        f"first non-finite gradient: {_first_bad_grad(model)}")
                model.zero_grad()
                backward(loss)
                bad = _first_bad_grad(model)
                if bad is not None:
                    raise TrainingError(f"non-finite gradient in {bad} at epoch {epoch}")
                sgd_step(params, state, cfg)
                total += value * len(batch)
                seen += len(batch)
            if frozen_hash(model) != reference:
                raise TrainingError(f"frozen parameters changed during epoch {epoch}")
            mean_loss = total / seen
            ev = evaluate(model, test_set, cfg.eval_stride) if test_set else None
            m = ev.metrics if ev else None
            line = f"{epoch},{mean_loss:.6f}," + (m.row() if m else "nan,nan,nan")
            result.log_lines.append(line)
            result.losses.append(mean_loss)
            result.evals.append(ev)
            log.info(line)
            if on_epoch:
                on_epoch(line)
    return result
