"""Training, evaluation and cross-slice consistency on prepared volumes."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Adam, load_checkpoint, save_checkpoint
from ..losses import line_ce, line_l1, mask_ce, total_loss
from ..metrics import MetricsReport, aggregate, consistency_score, scan_errors
from ..network import ModelConfig, ModelParams, build_model, predict
from .config import RunConfig
from .data import PreparedVolume, make_batch

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "loss", "mask_ce", "line_ce", "line_l1", "val_mad", "seconds"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    best_epoch: int
    best_val_mad: float
    history: list[dict] = field(default_factory=list)


# -- checkpoints with their model description -------------------------------------------

def _model_sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_model(params: ModelParams, path) -> Path:
    path = Path(path)
    save_checkpoint(path, params.state_dict())
    meta = {"fusion": params.fusion, "config": asdict(params.config)}
    _model_sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_model(path, expected: ModelConfig | None = None) -> ModelParams:
    """Rebuild a model from a checkpoint and its JSON description.

    With ``expected`` the stored architecture must match it; ``ValueError`` otherwise.
    """
    path = Path(path)
    meta = json.loads(_model_sidecar(path).read_text())
    cfg = ModelConfig(**{**meta["config"], "input_size": tuple(meta["config"]["input_size"])})
    if expected is not None and asdict(expected) != asdict(cfg):
        diff = {k: (v, asdict(expected)[k]) for k, v in asdict(cfg).items() if asdict(expected)[k] != v}
        raise ValueError(f"checkpoint architecture differs from config: {diff}")
    params = build_model(cfg, seed=0, fusion=meta["fusion"])
    params.load_state_dict(load_checkpoint(path))
    return params


# -- inference ---------------------------------------------------------------------------------

def predict_volume(params: ModelParams, vol: PreparedVolume, batch: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Surface rows for every B-scan: ``(S, K, w)`` network space and ``(S, K, W)`` original space."""
    n = params.config.n_slices
    net = []
    for start in range(0, vol.n_slices, batch):
        centres = range(start, min(start + batch, vol.n_slices))
        x = np.stack([vol.window(s, n) for s in centres]).astype(np.float32)
        net.append(predict(params, x, mode="eval").surfaces.data.astype(np.float64))
    net_rows = np.concatenate(net)
    original = np.stack([rec.rows_to_original(r) for rec, r in zip(vol.records, net_rows)])
    return net_rows, original


@dataclass
class VolumePrediction:
    name: str
    net_rows: np.ndarray
    rows: np.ndarray  # original coordinates


def evaluate(params: ModelParams, volumes: list[PreparedVolume], batch: int = 8,
             predictions: list[VolumePrediction] | None = None) -> tuple[MetricsReport, list[VolumePrediction]]:
    """Score in original B-scan coordinates. Unannotated volumes and slices are skipped."""
    preds = predictions or []
    if not preds:
        for vol in volumes:
            net, rows = predict_volume(params, vol, batch)
            preds.append(VolumePrediction(vol.name, net, rows))
    scans = []
    for vol, pred in zip(volumes, preds):
        slices = vol.labeled_slices()
        if not slices:
            log.warning("%s: no annotated slices, skipped", vol.name)
            continue
        skipped = vol.n_slices - len(slices)
        if skipped:
            log.warning("%s: %d slices without annotations skipped", vol.name, skipped)
        t = vol.truth
        scans.append(scan_errors(vol.name, pred.rows[slices], t.rows[slices], t.valid[slices]))
    if not scans:
        raise ValueError("no annotated volumes to evaluate")
    return aggregate(scans), preds


def consistency(params: ModelParams, vol: PreparedVolume, batch: int = 8) -> float:
    if vol.n_slices < 2:
        raise ValueError("consistency needs a volume with at least 2 slices")
    _, rows = predict_volume(params, vol, batch)
    return consistency_score(rows)


# -- training ----------------------------------------------------------------------------------

def _write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        out.writeheader()
        for r in rows:
            out.writerow({k: ("" if r[k] is None else repr(r[k])) for k in LOG_HEADER})


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {k: (int(r[k]) if k == "epoch" else (float(r[k]) if r[k] else None)) for k in LOG_HEADER}
            for r in reader
        ]


def train(cfg: RunConfig, train_vols: list[PreparedVolume], val_vols: list[PreparedVolume],
          out_dir, progress=None) -> TrainResult:
    """Adam on centre-slice samples with n-slice windows; keeps the best model by validation MAD."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.txt").write_text(cfg.to_text())
    mcfg = cfg.model_config()
    params = build_model(mcfg, seed=cfg.seed, fusion=cfg.fusion)
    opt = Adam(params.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
               decoupled=cfg.decoupled_weight_decay)
    weights = cfg.loss_weights()
    rng = np.random.default_rng([cfg.seed, 2])
    samples = [(v, s) for v, vol in enumerate(train_vols) for s in vol.labeled_slices()]
    if not samples:
        raise ValueError("training split has no annotated slices")

    best_path, last_path = out_dir / "best.ckpt", out_dir / "last.ckpt"
    history: list[dict] = []
    best_mad, best_epoch = math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(samples))
        sums = np.zeros(4)
        for b0 in range(0, len(order), cfg.batch_size):
            items = [samples[i] for i in order[b0:b0 + cfg.batch_size]]
            x, gt = make_batch(train_vols, items, mcfg.n_slices)
            out = predict(params, x, mode="train")
            terms = (mask_ce(out.mask_probs, gt), line_ce(out.surface_probs, gt), line_l1(out.surfaces, gt))
            try:
                loss = total_loss(terms, weights)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from exc
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from exc
            sums += len(items) * np.array([float(loss.data)] + [float(t.data) for t in terms])
        means = sums / len(order)
        val_mad = None
        if val_vols:
            report, _ = evaluate(params, val_vols, cfg.eval_batch)
            val_mad = report.mean_mad
        row = dict(zip(LOG_HEADER, [epoch, *map(float, means), val_mad, time.perf_counter() - start]))
        history.append(row)
        _write_log(history, out_dir / "loss_log.csv")
        score = val_mad if val_mad is not None else row["loss"]
        if score < best_mad:
            best_mad, best_epoch = score, epoch
            save_model(params, best_path)
        if progress is not None:
            progress(row)
    save_model(params, last_path)
    if best_epoch == 0:  # zero epochs
        save_model(params, best_path)
    return TrainResult(best_path, last_path, best_epoch, best_mad, history)
