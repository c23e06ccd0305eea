"""Command-line entry point: ``manet {train,eval,params,synth,heatmap}``.

Config files are plain ``key = value`` lines (``#`` starts a comment); any
command-line flag overrides the file. Exit codes: 0 success, 1 user error,
2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from . import __version__
from .data import TAXONOMY, DataError, dataset_fingerprint, load_split, write_synthetic_dataset
from .encoder import VIT_B, VIT_H, VIT_L
from .model import ModelConfig, sam_excluded_components, static_parameter_counts
from .tensor import no_grad
from .train import (EvalResult, TrainConfig, TrainingError, evaluate, load_checkpoint, metrics,
                    save_checkpoint, train)

log = logging.getLogger("manet")

# published SAM image-encoder sizes (millions)
SAM_ENCODER_REFERENCE = {"vit-b": 89.7, "vit-l": 308.3, "vit-h": 637.0}
PRESETS = {
    "toy": {},
    "vit-b": dict(image_size=VIT_B.image_size, embed_dim=VIT_B.embed_dim, depth=VIT_B.depth, heads=VIT_B.heads),
    "vit-l": dict(image_size=VIT_L.image_size, embed_dim=VIT_L.embed_dim, depth=VIT_L.depth, heads=VIT_L.heads),
    "vit-h": dict(image_size=VIT_H.image_size, embed_dim=VIT_H.embed_dim, depth=VIT_H.depth, heads=VIT_H.heads),
}

MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
OTHER_KEYS = {"data", "preset"}


class UserError(Exception):
    """Bad flags, config or inputs: exit code 1."""


# -- config handling ------------------------------------------------------------
def parse_config_file(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in MODEL_KEYS and key not in TRAIN_KEYS and key not in OTHER_KEYS:
            raise UserError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value, typ) -> object:
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise UserError(f"invalid value for {key}: {value!r} (expected {typ})") from None
    return value


def resolve(args: argparse.Namespace):
    """Merge preset < config file < flags into (ModelConfig, TrainConfig, extras)."""
    settings: Dict[str, object] = {}
    file_settings = parse_config_file(args.config) if getattr(args, "config", None) else {}
    preset = getattr(args, "preset", None) or file_settings.get("preset", "toy")
    if preset not in PRESETS:
        raise UserError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    settings.update(PRESETS[preset])
    settings.update(file_settings)
    overrides = {
        "adapter": getattr(args, "adapter", None),
        "modality": getattr(args, "modality", None),
        "dfm": getattr(args, "dfm", None),
        "epochs": getattr(args, "epochs", None),
        "data": getattr(args, "data", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["init_seed"] = args.seed
    settings.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" in settings and "init_seed" not in settings:
        settings["init_seed"] = settings["seed"]
    if settings.get("modality") == "optical+dsm":
        settings["modality"] = "both"
    model_kw = {k: _coerce(k, v, MODEL_KEYS[k]) for k, v in settings.items() if k in MODEL_KEYS}
    train_kw = {k: _coerce(k, v, TRAIN_KEYS[k]) for k, v in settings.items() if k in TRAIN_KEYS}
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw), {"data": settings.get("data"), "preset": preset}
    except ValueError as exc:
        raise UserError(str(exc)) from None


# -- reports ------------------------------------------------------------------
def format_metrics_table(result: EvalResult, header: str = "") -> str:
    """Five foreground class columns, then Total (OA), mF1, mIoU."""
    m = result.metrics
    fg = [i for i, f in enumerate(TAXONOMY.foreground) if f]
    cols = [TAXONOMY.abbrev[i] for i in fg] + ["Total", "mF1", "mIoU"]
    lines = []
    if header:
        lines.append(header)
    lines.append(f"{'Metric':<8}" + "".join(f"{c:>8}" for c in cols))

    def fmt(v):
        return f"{v:>8.2f}" if np.isfinite(v) else f"{'-':>8}"

    lines.append(f"{'OA':<8}" + "".join(fmt(m.class_acc[i]) for i in fg) + fmt(m.oa) + fmt(m.mf1) + fmt(m.miou))
    lines.append(f"{'F1':<8}" + "".join(fmt(m.f1[i]) for i in fg))
    lines.append(f"{'IoU':<8}" + "".join(fmt(m.iou[i]) for i in fg))
    return "\n".join(lines) + "\n"


def format_params_report(cfg: ModelConfig, preset: str) -> str:
    counts = static_parameter_counts(cfg)
    trainable = {"encoder backbone": 0, "adapters": counts["adapters"], "dfm": counts["dfm"],
                 "decoder": counts["decoder"]}
    lines = [f"# parameters preset={preset} image_size={cfg.image_size} embed_dim={cfg.embed_dim} "
             f"depth={cfg.depth} heads={cfg.heads} adapter={cfg.adapter} modality={cfg.modality} "
             f"dfm={'on' if cfg.dfm else 'off'} bottleneck={cfg.bottleneck_dim}",
             f"{'component':<18}{'frozen':>14}{'trainable':>14}"]
    for name, total in counts.items():
        t = trainable[name]
        lines.append(f"{name:<18}{total - t:>14,}{t:>14,}")
    frozen_total = sum(counts.values()) - sum(trainable.values())
    lines.append(f"{'total':<18}{frozen_total:>14,}{sum(trainable.values()):>14,}")
    ref = SAM_ENCODER_REFERENCE.get(preset)
    if ref is not None:
        backbone = counts["encoder backbone"]
        lines.append(f"SAM image encoder reference: {ref:.1f}M; plain ViT backbone: {backbone / 1e6:.2f}M "
                     f"({(backbone / 1e6 - ref) / ref * 100:+.2f}%)")
        lines.append("excluded from the backbone count:")
        for name, n in sam_excluded_components(cfg.encoder_config()).items():
            lines.append(f"  {name:<38}{n:>12,}")
    return "\n".join(lines) + "\n"


def _gray_png(path: Path, arr: np.ndarray) -> None:
    """Min-max scale to 8-bit; constant maps become mid-gray."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        img = np.rint((arr - lo) / (hi - lo) * 255.0)
    else:
        img = np.full(arr.shape, 128.0)
    Image.fromarray(img.astype(np.uint8)).save(path, format="PNG")


# -- commands ---------------------------------------------------------------------
def _load_data(root, split):
    if not root:
        raise UserError("no dataset given (use --data DIR or 'data = DIR' in the config)")
    try:
        return load_split(root, split)
    except DataError as exc:
        raise UserError(str(exc)) from None


def cmd_train(args) -> int:
    model_cfg, train_cfg, extra = resolve(args)
    train_set = _load_data(extra["data"], "train")
    test_dir = Path(extra["data"]) / "test"
    test_set = load_split(extra["data"], "test") if test_dir.is_dir() else None
    if model_cfg.adapter == "none":
        log.warning("adapter=none: the encoder has zero trainable parameters; "
                    "only the DFM/decoder will be trained")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    result = train(model_cfg, train_cfg, train_set, test_set, on_epoch=lambda line: print(line, flush=True))
    ckpt, metric_log = out / "checkpoint.manc", out / "metrics.log"
    save_checkpoint(ckpt, result.model)
    metric_log.write_text(result.metric_log())
    artifacts = {"checkpoint": ckpt.name, "metric_log": metric_log.name}
    if result.evals and result.evals[-1] is not None:
        ev = result.evals[-1]
        table = format_metrics_table(ev, f"# eval stride={ev.stride} window={model_cfg.image_size} "
                                         f"epoch={train_cfg.epochs}")
        (out / "metrics.txt").write_text(table)
        artifacts["metrics_table"] = "metrics.txt"
        print(table, end="")
    manifest = {
        "manet_version": __version__,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "seed": train_cfg.seed,
        "dataset": str(extra["data"]),
        "dataset_fingerprint": dataset_fingerprint(extra["data"]),
        "artifacts": artifacts,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    test_set = _load_data(args.data, args.split)
    stride = args.stride or model.config.image_size // 2
    try:
        result = evaluate(model, test_set, stride)
    except ValueError as exc:
        raise UserError(f"checkpoint/data mismatch: {exc}") from None
    table = format_metrics_table(result, f"# eval stride={stride} window={model.config.image_size} "
                                         f"split={args.split} patches={len(test_set)}")
    print(table, end="")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(table)
    return 0


def cmd_params(args) -> int:
    model_cfg, _, extra = resolve(args)
    report = format_params_report(model_cfg, extra["preset"])
    print(report, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "params.txt").write_text(report)
    return 0


def cmd_synth(args) -> int:
    if args.n < 1 or args.m < 0:
        raise UserError("--n must be >= 1 and --m >= 0")
    root = write_synthetic_dataset(args.out, args.n, args.m, args.seed, size=args.size)
    print(f"wrote {args.n} train + {args.m} test patches to {root}")
    return 0


def cmd_heatmap(args) -> int:
    model = _load_model(args.checkpoint)
    patches = dict(_load_data(args.data, args.split))
    pid = args.patch or sorted(patches)[0]
    if pid not in patches:
        raise UserError(f"patch {pid!r} not in {args.split} split")
    window = model.config.image_size
    sample = patches[pid]
    if args.row + window > sample.extent[0] or args.col + window > sample.extent[1]:
        raise UserError(f"window at ({args.row}, {args.col}) exceeds patch extent {sample.extent}")
    tile = sample.crop(args.row, args.col, window)
    dsm = tile.dsm[None] if model.config.modality == "both" else None
    with no_grad():
        logits, (f_x, f_y) = model(tile.optical[None], dsm, return_features=True)
    z = logits.data[0].astype(np.float64)
    prob = np.exp(z - z.max(axis=0))
    prob /= prob.sum(axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, name in enumerate(TAXONOMY.names[: prob.shape[0]]):
        path = out / f"prob_{k}_{name}.png"
        _gray_png(path, prob[k])
        written.append(path)
    scale = window // f_x.shape[1]
    for label, feat in (("optical", f_x), ("dsm", f_y)):
        if feat is None:
            continue
        mag = np.sqrt((feat.data[0].astype(np.float64) ** 2).sum(axis=-1))
        path = out / f"feature_{label}.png"
        _gray_png(path, np.kron(mag, np.ones((scale, scale))))
        written.append(path)
    for path in written:
        print(path)
    return 0


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    def ablation(p):
        p.add_argument("--adapter", choices=["none", "standard", "mmadapter"])
        p.add_argument("--modality", choices=["optical", "both", "optical+dsm"])
        p.add_argument("--dfm", type=lambda s: _coerce("dfm", s, "bool"), metavar="{on,off}")
        p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("train", help="fine-tune on a dataset directory")
    common(p)
    ablation(p)
    p.add_argument("--data", help="dataset root with train/ and test/")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train, out="runs/latest")

    p = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--stride", type=int, default=0, help="window stride (default: half window)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="frozen / trainable parameter report")
    common(p)
    ablation(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, config=False)
    p.add_argument("--n", type=int, default=8, help="training patches")
    p.add_argument("--m", type=int, default=2, help="test patches")
    p.add_argument("--size", type=int, default=128, help="patch extent in pixels")
    p.set_defaults(func=cmd_synth, seed=0, out="data/synth")

    p = sub.add_parser("heatmap", help="export class-probability and feature-magnitude maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--patch", help="patch id (default: first)")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--col", type=int, default=0)
    p.set_defaults(func=cmd_heatmap, out="heatmaps")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, AssertionError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
