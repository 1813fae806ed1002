"""Command-line entry points: gen-data, train, predict, evaluate, report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dataio
from .errors import DataError, NumericError, ShapeError
from .metrics import binarize, dice, metrics_record
from .png import read_png, to_uint8, write_gray, write_rgb
from .report import cmd_report, load_metrics, render_boxplot, render_panels
from .training import TrainConfig, train
from .uncertainty import (DEFAULT_SAMPLES, image_uncertainty, mc_predict_many, ring_contrast,
                          to_gray8, worker_count, write_grid)
from .unet import UNetConfig, build_unet, load_checkpoint, param_count

log = logging.getLogger("mcdseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.mcdseg"
HISTORY_NAME = "history.tsv"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    data_dir: Path | None = None
    checkpoint: Path | None = None
    out_dir: Path | None = None
    seed: int = 42
    samples: int = DEFAULT_SAMPLES
    threshold: float = 0.5
    name: str | None = None
    reduction: str = "pixels"
    synth: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except OSError as exc:
                raise DataError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        known = set(cls.__dataclass_fields__) - {"command", "data_dir", "checkpoint", "out_dir"}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def synth_config(self) -> dataio.SynthConfig:
        return dataio.SynthConfig.from_dict({"seed": self.seed, **self.synth})

    def model_config(self, extent: int | None = None) -> UNetConfig:
        base = {"seed": self.seed} if extent is None else {"seed": self.seed, "input_extent": extent}
        return UNetConfig.from_dict({**base, **self.model})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, "threshold": self.threshold, **self.train})


# --------------------------------------------------------------------------
# commands


def run_gen_data(cfg: RunConfig) -> Path:
    synth = cfg.synth_config()
    ds = dataio.generate_synthetic(synth)
    ratios = cfg.split.get("ratios", (0.7, 0.15, 0.15))
    ds = dataio.split(ds, ratios, seed=cfg.split.get("seed", cfg.seed))
    out = dataio.save_dataset(ds, cfg.out_dir)
    (out / "synth.json").write_text(json.dumps(synth.to_dict(), sort_keys=True, indent=1) + "\n")
    log.info("wrote %d items to %s", len(ds), out)
    return out


def _load_data(path: Path | None) -> dataio.SegDataset:
    if path is None:
        raise UsageError("--data is required")
    return dataio.load_dataset_dir(path)


def run_train(cfg: RunConfig) -> tuple[Path, Path]:
    ds = _load_data(cfg.data_dir)
    tr, va = ds.subset("train"), ds.subset("val")
    if not len(tr) or not len(va):
        raise DataError("dataset manifest must tag non-empty 'train' and 'val' splits")
    model = build_unet(cfg.model_config(extent=ds.H))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, hist = out / CHECKPOINT_NAME, out / HISTORY_NAME
    _, history = train(model, tr, va, cfg.train_config(), ckpt, hist)
    log.info("best epoch %d of %d, val dice %.4f", history.best_epoch, history.stopped_epoch,
             history.val_dice[history.best_epoch - 1])
    return ckpt, hist


def _collect_images(paths: list[str]) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.png")))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"image not found: {p}")
    if not files:
        raise DataError("no input images")
    return files


def _read_rgb(path: Path) -> np.ndarray:
    arr, mode = read_png(path)
    if mode != "RGB":
        raise DataError(f"{path} must be 8-bit RGB, got mode {mode}")
    return arr.astype(np.float64) / 255.0


def _check_extent(model, image: np.ndarray, name: str) -> None:
    h, w = image.shape[1:]
    depth = model.config.depth
    if h != w or h % (2 ** depth):
        raise DataError(f"{name}: extent {h}x{w} incompatible with model depth {depth}")


def run_predict(cfg: RunConfig, images: list[str]) -> list[Path]:
    if cfg.checkpoint is None:
        raise UsageError("--checkpoint is required")
    model = load_checkpoint(cfg.checkpoint)
    files = _collect_images(images)
    arrays = [_read_rgb(f) for f in files]
    for f, a in zip(files, arrays):
        _check_extent(model, a, f.name)
    preds = mc_predict_many(model, arrays, cfg.samples, cfg.seed, worker_count())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f, pred in zip(files, preds):
        stem = f.stem
        mask = binarize(pred.mean_prob, cfg.threshold)
        write_gray(out / f"{stem}_mean.png", to_uint8(pred.mean_prob))
        write_gray(out / f"{stem}_mask.png", mask * 255)
        write_gray(out / f"{stem}_entropy.png", to_gray8(pred.entropy_map))
        write_gray(out / f"{stem}_aleatoric.png", to_gray8(pred.aleatoric_map))
        write_grid(out / f"{stem}_mean.grid", pred.mean_prob)
        write_grid(out / f"{stem}_entropy.grid", pred.entropy_map)
        write_grid(out / f"{stem}_aleatoric.grid", pred.aleatoric_map)
        meta = pred.metadata() | {"image": f.name, "threshold": cfg.threshold,
                                  "foreground_pixels": int(mask.sum())}
        (out / f"{stem}_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        written.append(out / f"{stem}_meta.json")
    return written


def run_evaluate(cfg: RunConfig, split_name: str = "test", panels: bool = True) -> Path:
    if cfg.checkpoint is None:
        raise UsageError("--checkpoint is required")
    model = load_checkpoint(cfg.checkpoint)
    ds = _load_data(cfg.data_dir)
    subset = ds.subset(split_name) if any(it.split for it in ds) else ds
    if not len(subset):
        raise DataError(f"no items tagged {split_name!r}")
    for it in subset:
        _check_extent(model, it.image, it.stem)
    preds = mc_predict_many(model, [it.image for it in subset], cfg.samples, cfg.seed,
                            worker_count())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if panels:
        (out / "panels").mkdir(exist_ok=True)
    dices, uncs, rings = [], [], []
    for it, pred in zip(subset, preds):
        dices.append(dice(binarize(pred.mean_prob, cfg.threshold), it.mask[0]))
        uncs.append(image_uncertainty(pred, cfg.reduction, cfg.threshold))
        rings.append(ring_contrast(pred.entropy_map, it.mask[0]))
        if panels:
            write_rgb(out / "panels" / f"{it.stem}.png",
                      render_panels(it.image, it.mask[0], pred.mean_prob, pred.entropy_map))
    name = cfg.name or ("MCD UNet" if model.config.mcd_enabled else "UNet")
    record = metrics_record(name, param_count(model), dices, uncs, [it.stem for it in subset],
                            [it.group for it in subset],
                            extra={"ring_contrast": rings, "T": cfg.samples, "seed": cfg.seed,
                                   "threshold": cfg.threshold, "reduction": cfg.reduction,
                                   "split": split_name})
    path = out / "metrics.json"
    path.write_text(record)
    return path


def run_report(metric_files: list[str], out_dir: Path | None, boxplot: bool = False) -> dict:
    rep = cmd_report(load_metrics(metric_files))
    text = "Dice\n" + rep["dice_table"] + "\nUncertainty\n" + rep["uncertainty_table"]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "boxplot.json").write_text(json.dumps(rep["boxplot"], indent=1, sort_keys=True) + "\n")
        if boxplot:
            render_boxplot(rep["boxplot"], "dice", out / "boxplot_dice.png")
            render_boxplot(rep["boxplot"], "uncertainty", out / "boxplot_uncertainty.png")
    rep["text"] = text
    return rep


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcdseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=out_required)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="train a UNet on a dataset directory")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("predict", help="MC-dropout prediction and uncertainty maps")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("evaluate", help="Dice and uncertainty on a dataset split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--name")
    p.add_argument("--no-panels", action="store_true")

    p = sub.add_parser("report", help="Dice and uncertainty tables from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", type=Path)
    p.add_argument("--boxplot", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            rep = run_report(args.metrics, args.out, args.boxplot)
            sys.stdout.write(rep["text"])
            return EXIT_OK
        cfg = RunConfig.load(args.config, seed=args.seed, out_dir=args.out,
                             samples=getattr(args, "samples", None),
                             threshold=getattr(args, "threshold", None),
                             name=getattr(args, "name", None),
                             data_dir=getattr(args, "data", None),
                             checkpoint=getattr(args, "checkpoint", None))
        cfg.command = args.command
        if cfg.samples < 1:
            raise UsageError("--samples must be >= 1")
        if not 0.0 < cfg.threshold < 1.0:
            raise UsageError("--threshold must lie in (0, 1)")
        if args.command == "gen-data":
            if args.count is not None:
                cfg.synth = {**cfg.synth, "count": args.count}
            run_gen_data(cfg)
        elif args.command == "train":
            if args.epochs is not None:
                cfg.train = {**cfg.train, "epochs": args.epochs}
            ckpt, _ = run_train(cfg)
            print(ckpt)
        elif args.command == "predict":
            run_predict(cfg, args.images)
        elif args.command == "evaluate":
            print(run_evaluate(cfg, args.split, panels=not args.no_panels))
    except UsageError as exc:
        print(f"mcdseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mcdseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"mcdseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"mcdseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
