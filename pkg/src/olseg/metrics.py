"""Boundary-position errors (MAD, RMSE) and their aggregation over scans."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import SURFACE_NAMES

CSV_HEADER = ["surface", "mad_mean", "mad_std", "rmse_mean", "rmse_std"]
AVERAGE = "Average"


@dataclass
class BoundaryPrediction:
    rows: np.ndarray  # (n_surfaces, W)
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.rows.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not np.all(np.isfinite(self.rows[self.valid])):
            raise ValueError("predicted rows must be finite where valid")


def _differences(pred, gt, valid) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    if not valid.any():
        raise ValueError("no valid columns to score")
    return pred[valid] - gt[valid]


def mad(pred, gt, valid=None) -> float:
    """Mean |pred - gt| over valid columns."""
    return float(np.mean(np.abs(_differences(pred, gt, valid))))


def rmse(pred, gt, valid=None) -> float:
    d = _differences(pred, gt, valid)
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class ScanErrors:
    """Per-surface errors for one scan (volume), pooled over its B-scans."""

    name: str
    mad: np.ndarray  # (n_surfaces,)
    rmse: np.ndarray


def scan_errors(name: str, pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> ScanErrors:
    """Errors for a scan from ``(S, K, W)`` predicted and true rows.

    Every B-scan column of a surface is pooled before averaging, so a surface
    is one MAD over all its valid (slice, column) pairs.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    k = pred.shape[1]
    m = np.array([mad(pred[:, i], gt[:, i], valid[:, i]) for i in range(k)])
    r = np.array([rmse(pred[:, i], gt[:, i], valid[:, i]) for i in range(k)])
    return ScanErrors(name, m, r)


@dataclass
class MetricsReport:
    surfaces: tuple[str, ...]
    scans: list[ScanErrors] = field(default_factory=list)
    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def mean_mad(self) -> float:
        return self.rows[AVERAGE]["mad_mean"]

    @property
    def mean_rmse(self) -> float:
        return self.rows[AVERAGE]["rmse_mean"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(CSV_HEADER)
            for name, vals in self.rows.items():
                out.writerow([name] + [repr(vals[key]) for key in CSV_HEADER[1:]])

    def write_json(self, path) -> None:
        payload = {
            "surfaces": [dict(surface=name, **vals) for name, vals in self.rows.items()],
            "scans": [
                {"name": s.name, "mad": s.mad.tolist(), "rmse": s.rmse.tolist()} for s in self.scans
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        self.write_csv(out_dir / "metrics.csv")
        self.write_json(out_dir / "metrics.json")


def read_metrics_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return {r["surface"]: {k: float(r[k]) for k in CSV_HEADER[1:]} for r in reader}


def read_metrics_json(path) -> dict[str, dict[str, float]]:
    payload = json.loads(Path(path).read_text())
    return {r["surface"]: {k: float(r[k]) for k in CSV_HEADER[1:]} for r in payload["surfaces"]}


def aggregate(scans: list[ScanErrors], surfaces: tuple[str, ...] = SURFACE_NAMES) -> MetricsReport:
    """Mean and population std over scans, per surface plus an Average row.

    The Average row first averages the surfaces within each scan, then takes
    mean and std of those per-scan values.
    """
    if not scans:
        raise ValueError("need at least one scan to aggregate")
    m = np.stack([s.mad for s in scans])  # (n_scans, K)
    r = np.stack([s.rmse for s in scans])
    if m.shape[1] != len(surfaces):
        raise ValueError(f"{m.shape[1]} surfaces scored but {len(surfaces)} names given")
    rows = {}
    for i, name in enumerate(surfaces):
        rows[name] = _summary(m[:, i], r[:, i])
    rows[AVERAGE] = _summary(m.mean(axis=1), r.mean(axis=1))
    return MetricsReport(tuple(surfaces), list(scans), rows)


def _summary(m: np.ndarray, r: np.ndarray) -> dict[str, float]:
    return {
        "mad_mean": float(m.mean()),
        "mad_std": float(m.std()),
        "rmse_mean": float(r.mean()),
        "rmse_std": float(r.std()),
    }


def consistency_score(surfaces: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean |s_k(u, j) - s_k(u, j+1)| over surfaces k, columns u and slice pairs j.

    ``surfaces`` is ``(S, K, W)``. A pair counts only if both slices are valid there.
    """
    surfaces = np.asarray(surfaces, dtype=np.float64)
    if surfaces.ndim != 3 or surfaces.shape[0] < 2:
        raise ValueError("consistency needs a (S, K, W) stack with at least 2 slices")
    step = np.abs(np.diff(surfaces, axis=0))
    if valid is None:
        return float(step.mean())
    valid = np.asarray(valid, dtype=bool)
    pair = valid[1:] & valid[:-1]
    if not pair.any():
        raise ValueError("no valid adjacent-slice pairs")
    return float(step[pair].mean())
