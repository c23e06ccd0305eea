"""Multimodal raster I/O, sliding-window tiling, overlap averaging, augmentation and synthetic data.

On-disk layout::

    <root>/{train,test}/<patch_id>/optical.png   8-bit RGB
                                   labels.png    palette-indexed class ids
                                   dsm.raw       float32 little-endian, row-major
                                   dsm.hdr       4 lines: height, width, min, max
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ClassTaxonomy:
    names: Tuple[str, ...] = ("Building", "Tree", "LowVegetation", "Car", "ImperviousSurface", "Clutter")
    abbrev: Tuple[str, ...] = ("Bui.", "Tre.", "Low.", "Car", "Imp.", "Clu.")
    background: int = 5

    def __post_init__(self):
        if not 0 <= self.background < len(self.names):
            raise ValueError("background class index out of range")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def foreground(self) -> Tuple[bool, ...]:
        return tuple(i != self.background for i in range(self.num_classes))


TAXONOMY = ClassTaxonomy()
BUILDING, TREE, LOW_VEG, CAR, IMPERVIOUS, CLUTTER = range(6)

# ISPRS colour convention for the label palette
PALETTE = [(0, 0, 255), (0, 255, 0), (0, 255, 255), (255, 255, 0), (255, 255, 255), (255, 0, 0)]


class DataError(ValueError):
    """Invalid or inconsistent raster data."""


@dataclass
class Sample:
    optical: np.ndarray  # (3, H, W) float32 in [0, 1]
    dsm: np.ndarray  # (1, H, W) float32, normalized
    labels: np.ndarray  # (H, W) int64

    @property
    def extent(self) -> Tuple[int, int]:
        return self.labels.shape

    def crop(self, row: int, col: int, size: int) -> "Sample":
        sl = (slice(row, row + size), slice(col, col + size))
        return Sample(self.optical[(slice(None),) + sl].copy(), self.dsm[(slice(None),) + sl].copy(),
                      self.labels[sl].copy())


@dataclass(frozen=True)
class TileIndex:
    patch_id: str
    row: int
    col: int
    stride: int


# -- raster files -------------------------------------------------------------
def write_dsm(path: Path, dsm: np.ndarray) -> None:
    dsm = np.asarray(dsm, dtype="<f4")
    path = Path(path)
    path.write_bytes(dsm.tobytes(order="C"))
    hdr = path.with_suffix(".hdr")
    hdr.write_text(f"{dsm.shape[0]}\n{dsm.shape[1]}\n{float(dsm.min())!r}\n{float(dsm.max())!r}\n")


def read_dsm(path: Path) -> np.ndarray:
    path = Path(path)
    hdr = path.with_suffix(".hdr")
    try:
        lines = hdr.read_text().split()
        h, w = int(lines[0]), int(lines[1])
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"{hdr}: unreadable DSM header ({exc})") from None
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w:
        raise DataError(f"{path}: {raw.size} values but header says {h}x{w}")
    return raw.reshape(h, w).astype(np.float32)


def write_labels(path: Path, labels: np.ndarray) -> None:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (arr.shape[1], arr.shape[0]), arr.tobytes())
    flat = [v for rgb in PALETTE for v in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(path, format="PNG")


def write_optical(path: Path, optical: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(optical) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path, format="PNG")


def normalize_dsm(dsm: np.ndarray) -> np.ndarray:
    lo, hi = float(dsm.min()), float(dsm.max())
    if hi == lo:
        return np.zeros_like(dsm, dtype=np.float32)
    return ((dsm - lo) / (hi - lo)).astype(np.float32)


def load_patch(optical_path, dsm_path, label_path, num_classes: int = TAXONOMY.num_classes) -> Sample:
    """Load one patch: optical scaled to [0, 1], DSM min-max normalized, labels validated."""
    with Image.open(optical_path) as im:
        opt = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    with Image.open(label_path) as im:
        if im.mode not in ("P", "L"):
            raise DataError(f"{label_path}: labels must be palette-indexed or grayscale, got mode {im.mode}")
        labels = np.asarray(im, dtype=np.int64)
    dsm = read_dsm(dsm_path)
    extents = {"optical": opt.shape[:2], "dsm": dsm.shape, "labels": labels.shape}
    if len(set(extents.values())) != 1:
        raise DataError(f"extent mismatch between {optical_path}, {dsm_path}, {label_path}: {extents}")
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"{label_path}: label value {labels.max()} outside [0, {num_classes})")
    return Sample(np.ascontiguousarray(opt.transpose(2, 0, 1)), normalize_dsm(dsm)[None], labels)


def patch_paths(patch_dir: Path) -> Tuple[Path, Path, Path]:
    patch_dir = Path(patch_dir)
    return patch_dir / "optical.png", patch_dir / "dsm.raw", patch_dir / "labels.png"


def load_split(root, split: str, num_classes: int = TAXONOMY.num_classes) -> List[Tuple[str, Sample]]:
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"missing dataset split directory {base}")
    out = [(d.name, load_patch(*patch_paths(d), num_classes=num_classes))
           for d in sorted(base.iterdir()) if d.is_dir()]
    if not out:
        raise DataError(f"no patches under {base}")
    return out


def dataset_fingerprint(root) -> str:
    """SHA-256 over every file under ``root`` (relative path + content), in sorted order."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# -- tiling -------------------------------------------------------------------
def _offsets(length: int, window: int, stride: int) -> List[int]:
    offs = list(range(0, length - window + 1, stride))
    if offs[-1] + window < length:
        offs.append(length - window)  # clamp the last window to the boundary
    return offs


def slide_windows(extent: Tuple[int, int], window: int, stride: int, patch_id: str = "") -> List[TileIndex]:
    """Row-major window offsets covering every pixel of ``extent`` at least once."""
    h, w = extent
    if not 1 <= stride <= window:
        # a stride wider than the window would skip pixels between windows
        raise ValueError(f"stride must satisfy 1 <= stride <= window ({window}), got {stride}")
    if window < 1 or window > min(h, w):
        raise ValueError(f"window {window} larger than extent {h}x{w}")
    return [TileIndex(patch_id, r, c, stride) for r in _offsets(h, window, stride)
            for c in _offsets(w, window, stride)]


def stitch_average(tiles: Iterable[Tuple[TileIndex, np.ndarray]], extent: Tuple[int, int]) -> np.ndarray:
    """Per-pixel mean of overlapping (K, win, win) probability tiles, renormalized over K."""
    acc = None
    count = np.zeros(extent, dtype=np.int64)
    for idx, prob in tiles:
        prob = np.asarray(prob)
        k, wh, ww = prob.shape
        if acc is None:
            acc = np.zeros((k,) + tuple(extent), dtype=np.float64)
        acc[:, idx.row:idx.row + wh, idx.col:idx.col + ww] += prob
        count[idx.row:idx.row + wh, idx.col:idx.col + ww] += 1
    if acc is None or (count == 0).any():
        raise AssertionError(f"stitch_average: {int((count == 0).sum())} pixels of {extent} uncovered")
    avg = acc / count
    total = avg.sum(axis=0, keepdims=True)
    return (avg / np.where(total > 0, total, 1.0)).astype(np.float32)


# -- augmentation -------------------------------------------------------------
def augment_with(sample: Sample, rotations: int, flip: bool) -> Sample:
    """Rotate all rasters by ``rotations`` * 90 degrees, then optionally mirror left-right."""
    def tf(a):
        a = np.rot90(a, rotations % 4, axes=(-2, -1))
        if flip:
            a = a[..., ::-1]
        return np.ascontiguousarray(a)

    if sample.labels.shape[0] != sample.labels.shape[1]:
        raise DataError(f"augmentation needs square tiles, got {sample.labels.shape}")
    return Sample(tf(sample.optical), tf(sample.dsm), tf(sample.labels))


def augment(sample: Sample, seed) -> Sample:
    rng = np.random.default_rng(seed)
    return augment_with(sample, int(rng.integers(4)), bool(rng.integers(2)))


# -- synthetic scenes -----------------------------------------------------------
GRAY = np.array([0.50, 0.50, 0.52])
COLORS = {
    LOW_VEG: np.array([0.45, 0.70, 0.35]),
    TREE: np.array([0.10, 0.35, 0.12]),
    CAR: np.array([0.85, 0.15, 0.15]),
}
HEIGHTS = {IMPERVIOUS: 0.0, LOW_VEG: 0.3, CAR: 1.5, TREE: 6.0, BUILDING: 12.0}


@dataclass
class RawPatch:
    optical: np.ndarray  # (3, H, W) in [0, 1]
    dsm: np.ndarray  # (H, W) elevation, metres
    labels: np.ndarray  # (H, W)


def _rect(rng, size, lo, hi):
    h, w = rng.integers(lo, hi + 1, size=2)
    r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    return slice(r, r + h), slice(c, c + w)


def synth_patch(rng: np.random.Generator, size: int = 128) -> RawPatch:
    """One scene on an impervious ground plane.

    Buildings share the impervious grey in the optical band and differ only by
    height, so they are separable only with the DSM.
    """
    labels = np.full((size, size), IMPERVIOUS, dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        labels[_rect(rng, size, size // 6, size // 2)] = LOW_VEG
    for _ in range(rng.integers(1, 4)):
        labels[_rect(rng, size, size // 6, size // 3)] = BUILDING
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.integers(0, size, size=2)
        rad = rng.integers(size // 20, size // 9 + 1)
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = TREE
    for _ in range(rng.integers(2, 6)):
        sl = _rect(rng, size, 3, 8)
        if (labels[sl] == IMPERVIOUS).all():
            labels[sl] = CAR
    for _ in range(rng.integers(0, 3)):
        labels[_rect(rng, size, 3, size // 10)] = CLUTTER

    optical = np.empty((3, size, size))
    optical[:] = GRAY[:, None, None]
    dsm = np.zeros((size, size))
    for cls, height in HEIGHTS.items():
        dsm[labels == cls] = height
    for cls, color in COLORS.items():
        optical[:, labels == cls] = color[:, None]
    clutter = labels == CLUTTER
    if clutter.any():
        optical[:, clutter] = rng.random((3, 1))
        dsm[clutter] = rng.uniform(0.0, 3.0)
    tree = labels == TREE
    optical[:, tree] += 0.12 * rng.standard_normal((1, int(tree.sum())))  # canopy texture
    dsm[tree] += rng.standard_normal(int(tree.sum()))
    optical += 0.04 * rng.standard_normal(optical.shape)
    dsm += 0.2 * rng.standard_normal(dsm.shape) + rng.uniform(20.0, 40.0)  # terrain offset
    # keep a fixed elevation anchor so per-patch min-max scaling is comparable
    dsm[0, 0], dsm[-1, -1] = dsm.min() - 1.0, dsm.max() + 1.0
    return RawPatch(np.clip(optical, 0.0, 1.0), dsm.astype(np.float32), labels)


def synth_generate(n: int, seed: int, num_classes: int = 6, size: int = 128) -> List[RawPatch]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if num_classes != TAXONOMY.num_classes:
        raise ValueError(f"synthetic scenes use the {TAXONOMY.num_classes}-class taxonomy")
    rng = np.random.default_rng(seed)
    return [synth_patch(rng, size) for _ in range(n)]


def write_patch(patch_dir: Path, patch: RawPatch) -> None:
    patch_dir = Path(patch_dir)
    patch_dir.mkdir(parents=True, exist_ok=True)
    opt, dsm, lab = patch_paths(patch_dir)
    write_optical(opt, patch.optical)
    write_dsm(dsm, patch.dsm)
    write_labels(lab, patch.labels)


def write_synthetic_dataset(root, n_train: int, n_test: int, seed: int, size: int = 128) -> Path:
    """Generate ``n_train`` + ``n_test`` scenes into the dataset directory layout."""
    root = Path(root)
    patches = synth_generate(n_train + n_test, seed, size=size)
    for i, patch in enumerate(patches):
        split = "train" if i < n_train else "test"
        write_patch(root / split / f"p{i:04d}", patch)
    return root
