"""``olseg`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from ..autodiff import CheckpointError
from ..dataio import DataFormatError, Volume, read_volume, write_volume
from ..preprocess import UnusableScanError, preprocess_volume, save_transforms
from . import engine, plots
from .config import ConfigError, RunConfig, load_config
from .data import generate_dataset, load_volume, prepare_split, prepare_volume, read_splits

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("olseg")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    return cfg.with_overrides(**overrides) if overrides else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.data_path
    splits = generate_dataset(cfg, out)
    print(f"wrote {sum(map(len, splits.values()))} phantom volumes to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    pcfg = cfg.preprocess_config()
    out = _out(args)
    src = Path(args.volume)
    try:
        vol = read_volume(src)
    except (OSError, DataFormatError) as exc:
        raise DataFormatError(f"preprocess: reading input volume: {exc}") from exc
    if vol.pixels.min() < 0 or vol.pixels.max() > 1:
        raise DataFormatError(f"preprocess: {src} holds intensities outside [0, 1]")
    pixels, records, failed = preprocess_volume(vol.pixels, pcfg)
    for s in failed:
        print(f"preprocess: slice {s}: no usable RPE fit; flattened with a neighbouring slice's curve",
              file=sys.stderr)
    write_volume(Volume(pixels, vol.spacing_um), out / f"{src.stem}.vol", "float32")
    save_transforms(records, out / f"{src.stem}.transforms.json")
    print(f"preprocessed {len(records)} B-scans ({len(failed)} without RPE fit) -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    read_splits(cfg)  # fail early without a manifest
    train_vols = prepare_split(cfg, "train")
    val_vols = prepare_split(cfg, "validation")

    def progress(row):
        val = "-" if row["val_mad"] is None else f"{row['val_mad']:.3f}"
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  val MAD {val}  ({row['seconds']:.1f}s)", flush=True)

    result = engine.train(cfg, train_vols, val_vols, out, progress=progress)
    print(f"best epoch {result.best_epoch} (val MAD {result.best_val_mad:.3f}) -> {result.best_checkpoint}")
    return EXIT_OK


def _load_checkpoint(args, cfg: RunConfig):
    try:
        return engine.load_model(args.checkpoint, expected=cfg.model_config())
    except FileNotFoundError as exc:
        raise DataFormatError(f"checkpoint not found: {exc.filename}") from exc
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise DataFormatError(str(exc)) from exc
        raise ConfigError(str(exc)) from exc


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    params = _load_checkpoint(args, cfg)
    volumes = prepare_split(cfg, args.split, require_annotations=False)
    report, preds = engine.evaluate(params, volumes, cfg.eval_batch)
    report.write(out)
    overlay_dir = out / "overlays"
    overlay_dir.mkdir(exist_ok=True)
    written = 0
    for vol, pred in zip(volumes, preds):
        for s in range(vol.n_slices):
            if 0 <= cfg.max_overlays <= written:
                break
            truth = vol.truth.rows[s] if vol.truth is not None else None
            valid = vol.truth.valid[s] if vol.truth is not None else None
            plots.overlay(overlay_dir / f"{vol.name}_{s:03d}.png", vol.original[s], pred.rows[s], truth, valid)
            written += 1
    print(f"mean MAD {report.mean_mad:.3f} px, mean RMSE {report.mean_rmse:.3f} px -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_consistency(args) -> int:
    cfg = _config(args)
    params = _load_checkpoint(args, cfg)
    path = Path(args.volume)
    if path.suffix == ".vol" and path.exists():
        vol = read_volume(path)
        name = path.stem
    else:
        name = args.volume
        vol, _ = load_volume(cfg.data_path, name, require_annotations=False)
    if vol.shape[0] < 2:
        raise DataFormatError(f"{name}: consistency needs at least 2 slices")
    prepared = prepare_volume(name, vol, None, cfg.preprocess_config())
    score = engine.consistency(params, prepared, cfg.eval_batch)
    if args.out:
        out = _out(args)
        (out / "consistency.csv").write_text(f"volume,score\n{name},{score!r}\n")
    print(f"{name}: consistency {score:.4f} px")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = _out(args)
    logs, reports = {}, {}
    for run in args.runs:
        run = Path(run)
        label = run.name
        if (run / "loss_log.csv").exists():
            logs[label] = engine.read_loss_log(run / "loss_log.csv")
        if (run / "metrics.csv").exists():
            from ..metrics import read_metrics_csv

            reports[label] = read_metrics_csv(run / "metrics.csv")
    if not logs and not reports:
        raise DataFormatError("no loss_log.csv or metrics.csv found in the given run directories")
    if logs:
        print(plots.plot_loss_curves(logs, out / "loss_curves.png"))
    if reports:
        print(plots.plot_metrics(reports, out / "surface_mad.png"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olseg", description="OCT retinal layer segmentation with cross-slice fusion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("phantom-gen", cmd_phantom_gen, "write a synthetic phantom dataset", out_required=False)
    p = add("preprocess", cmd_preprocess, "flatten, crop, denoise, equalize and resize a volume")
    p.add_argument("volume", help="input volume file")
    p = add("train", cmd_train, "train a model on the configured dataset")
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p = add("eval", cmd_eval, "score a checkpoint and draw overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p = add("consistency", cmd_consistency, "cross-slice consistency of a checkpoint's predictions", out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="volume file, or a volume name inside data_dir")
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p = add("plot", cmd_plot, "loss curves and per-surface MAD bars from run directories")
    p.add_argument("runs", nargs="+", help="run directories holding loss_log.csv and/or metrics.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"olseg {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, UnusableScanError, CheckpointError, FileNotFoundError) as exc:
        print(f"olseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"olseg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
