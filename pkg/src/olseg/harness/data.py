"""Dataset directories and their preparation for training and evaluation.

A dataset directory holds ``<name>.vol`` volume files, ``<name>.csv``
boundary annotations and a split manifest. Preparation runs the
preprocessing pipeline on every B-scan and maps the annotations into
network coordinates with the same transforms.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dataio import (
    BoundarySet,
    DataFormatError,
    Volume,
    mask_from_boundaries,
    read_annotations,
    read_split_manifest,
    read_volume,
    window_indices,
    write_annotations,
    write_split_manifest,
    write_volume,
)
from ..losses import GroundTruth
from ..phantom import PhantomConfig, corrupt_slice, generate_phantom
from ..preprocess import PreprocessConfig, TransformRecord, preprocess_volume
from .config import RunConfig

log = logging.getLogger(__name__)


def volume_path(data_dir, name: str) -> Path:
    return Path(data_dir) / f"{name}.vol"


def annotation_path(data_dir, name: str) -> Path:
    return Path(data_dir) / f"{name}.csv"


def phantom_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def phantom_config(cfg: RunConfig, index: int) -> PhantomConfig:
    return PhantomConfig(
        seed=phantom_seed(cfg.seed, index),
        dims=(cfg.phantom_slices, cfg.phantom_height, cfg.phantom_width),
        speckle=cfg.phantom_speckle,
    )


def corrupted_slices(n_slices: int, every: int) -> list[int]:
    return list(range(0, n_slices, every)) if every > 0 else []


def make_phantom_volume(cfg: RunConfig, index: int) -> tuple[Volume, BoundarySet]:
    pcfg = phantom_config(cfg, index)
    vol, truth = generate_phantom(pcfg)
    for s in corrupted_slices(vol.shape[0], cfg.corrupt_every):
        vol = corrupt_slice(vol, s, cfg.corrupt_severity, seed=pcfg.seed)
    vol.boundaries = truth
    return vol, truth


def generate_dataset(cfg: RunConfig, out_dir) -> dict[str, list[str]]:
    """Write train/validation/test phantom volumes, annotations and the split manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"train": cfg.n_train, "validation": cfg.n_val, "test": cfg.n_test}
    splits: dict[str, list[str]] = {}
    index = 0
    for section, count in counts.items():
        names = []
        for _ in range(count):
            name = f"phantom_{index:03d}"
            vol, truth = make_phantom_volume(cfg, index)
            write_volume(vol, volume_path(out_dir, name), "float32")
            write_annotations(truth, annotation_path(out_dir, name))
            names.append(name)
            index += 1
        splits[section] = names
    write_split_manifest(splits, out_dir / "splits.txt")
    meta = {
        "seed": cfg.seed,
        "dims": [cfg.phantom_slices, cfg.phantom_height, cfg.phantom_width],
        "corrupted_slices": corrupted_slices(cfg.phantom_slices, cfg.corrupt_every),
        "corrupt_severity": cfg.corrupt_severity,
    }
    (out_dir / "phantom.json").write_text(json.dumps(meta, indent=2))
    return splits


@dataclass
class PreparedVolume:
    """One volume in network coordinates, plus what is needed to map back."""

    name: str
    original: np.ndarray  # (S, H, W) raw pixels
    pixels: np.ndarray  # (S, h, w) network input, float32
    records: list[TransformRecord]
    truth: BoundarySet | None  # original coordinates
    net_rows: np.ndarray | None = None  # (S, K, w)
    net_valid: np.ndarray | None = None
    class_maps: np.ndarray | None = None  # (S, h, w)

    @property
    def n_slices(self) -> int:
        return self.pixels.shape[0]

    def window(self, centre: int, n: int) -> np.ndarray:
        return self.pixels[window_indices(self.n_slices, centre, n)]

    def labeled_slices(self) -> list[int]:
        if self.truth is None:
            return []
        return [s for s in range(self.n_slices) if self.truth.valid[s].any()]


def prepare_volume(name: str, vol: Volume, truth: BoundarySet | None, pcfg: PreprocessConfig) -> PreparedVolume:
    pixels, records, borrowed = preprocess_volume(vol.pixels, pcfg)
    if borrowed:
        log.warning("%s: slices %s have no usable RPE fit; flattened with a neighbouring slice's curve",
                    name, borrowed)
    prepared = PreparedVolume(name, vol.pixels, pixels.astype(np.float32), records, truth)
    if truth is not None:
        h, w = pcfg.output_size
        rows, valid, maps = [], [], []
        for s, rec in enumerate(records):
            r, v = rec.rows_to_network(truth.rows[s], truth.valid[s])
            rows.append(r)
            valid.append(v)
            maps.append(mask_from_boundaries(r, v, h, w))
        prepared.net_rows = np.stack(rows)
        prepared.net_valid = np.stack(valid)
        prepared.class_maps = np.stack(maps)
    return prepared


def load_volume(data_dir, name: str, require_annotations: bool = True) -> tuple[Volume, BoundarySet | None]:
    vpath = volume_path(data_dir, name)
    if not vpath.exists():
        raise DataFormatError(f"missing volume file {vpath}")
    vol = read_volume(vpath)
    apath = annotation_path(data_dir, name)
    if not apath.exists():
        if require_annotations:
            raise DataFormatError(f"missing annotation file {apath}")
        log.warning("%s: no annotations, slices will be skipped in scoring", name)
        return vol, None
    truth = read_annotations(apath, vol.shape)
    vol.boundaries = truth
    return vol, truth


def read_splits(cfg: RunConfig) -> dict[str, list[str]]:
    path = cfg.data_path / cfg.splits
    if not path.exists():
        raise DataFormatError(f"split manifest {path} not found")
    return read_split_manifest(path)


def prepare_split(cfg: RunConfig, section: str, require_annotations: bool = True) -> list[PreparedVolume]:
    names = read_splits(cfg)[section]
    pcfg = cfg.preprocess_config()
    out = []
    for name in names:
        vol, truth = load_volume(cfg.data_path, name, require_annotations)
        out.append(prepare_volume(name, vol, truth, pcfg))
    return out


def make_batch(volumes: list[PreparedVolume], items: list[tuple[int, int]], n: int) -> tuple[np.ndarray, GroundTruth]:
    """Stack the n-slice windows and centre-slice targets for ``(volume, slice)`` pairs."""
    x = np.stack([volumes[v].window(s, n) for v, s in items])
    gt = GroundTruth(
        np.stack([volumes[v].class_maps[s] for v, s in items]),
        np.stack([volumes[v].net_rows[s] for v, s in items]),
        np.stack([volumes[v].net_valid[s] for v, s in items]),
    )
    return x, gt
