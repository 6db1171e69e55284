"""On-disk formats for volumes, boundary annotations and dataset splits.

Volume files (little-endian)::

    magic "OCTVOL01" | u32 slices | u32 height | u32 width | u32 dtype code
    | f64 row_um | f64 col_um | f64 slice_um | slices * height * width samples

dtype codes: 1 = uint8, 2 = uint16, 3 = float32. Integer data is scaled to
[0, 1] on load.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SURFACE_NAMES = ("ILM", "RNFL-GCL", "IPL-INL", "OPL-ONL", "ONL-IS")
IGNORE = -1

MAGIC = b"OCTVOL01"
_HEADER = struct.Struct("<8s4I3d")
HEADER_SIZE = _HEADER.size
DTYPE_CODES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<f4")}
_CODE_FOR = {"uint8": 1, "uint16": 2, "float32": 3}

ANNOTATION_HEADER = ["slice", "surface", "column", "row", "valid"]
SPLIT_SECTIONS = ("train", "validation", "test")


class DataFormatError(ValueError):
    pass


@dataclass
class BoundarySet:
    """Surface rows per slice, surface and column, shape ``(S, 5, W)``."""

    rows: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.rows.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.rows.ndim != 3 or self.rows.shape[1] != len(SURFACE_NAMES):
            raise ValueError(f"boundary rows must be (S, {len(SURFACE_NAMES)}, W), got {self.rows.shape}")
        if self.valid.shape != self.rows.shape:
            raise ValueError("valid mask shape differs from rows")

    @property
    def n_slices(self) -> int:
        return self.rows.shape[0]


@dataclass
class Volume:
    pixels: np.ndarray  # (S, H, W) float32 in [0, 1]
    spacing_um: tuple[float, float, float] = (1.0, 1.0, 1.0)  # row, column, slice
    boundaries: BoundarySet | None = field(default=None, repr=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError(f"volume pixels must be (S, H, W), got {self.pixels.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


# -- volume files ---------------------------------------------------------------

def write_volume(vol: Volume, path, dtype: str = "float32") -> None:
    if dtype not in _CODE_FOR:
        raise ValueError(f"unsupported dtype {dtype!r}")
    code = _CODE_FOR[dtype]
    px = vol.pixels
    if code == 3:
        raw = px.astype("<f4")
    else:
        top = 255 if code == 1 else 65535
        raw = np.rint(np.clip(px, 0, 1) * top).astype(DTYPE_CODES[code])
    s, h, w = px.shape
    header = _HEADER.pack(MAGIC, s, h, w, code, *map(float, vol.spacing_um))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw.tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            raise DataFormatError(f"{path}: truncated header")
        magic, s, h, w, code, *spacing = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        if code not in DTYPE_CODES:
            raise DataFormatError(f"{path}: unknown dtype code {code}")
        dt = DTYPE_CODES[code]
        expected = s * h * w * dt.itemsize
        body = fh.read()
    if len(body) < expected:
        raise DataFormatError(f"{path}: truncated volume ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise DataFormatError(f"{path}: {len(body) - expected} trailing bytes; dtype mismatch?")
    raw = np.frombuffer(body, dtype=dt).reshape(s, h, w)
    if code == 3:
        pixels = raw.astype(np.float32)
    else:
        pixels = raw.astype(np.float32) / np.float32(np.iinfo(dt).max)
    return Volume(pixels, tuple(spacing))


def volume_file_size(shape: tuple[int, int, int], dtype: str = "uint8") -> int:
    s, h, w = shape
    return HEADER_SIZE + s * h * w * DTYPE_CODES[_CODE_FOR[dtype]].itemsize


# -- annotations --------------------------------------------------------------

def write_annotations(bset: BoundarySet, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(ANNOTATION_HEADER)
        s_count, _, w = bset.rows.shape
        for s in range(s_count):
            for k, name in enumerate(SURFACE_NAMES):
                for u in range(w):
                    out.writerow([s, name, u, repr(float(bset.rows[s, k, u])), int(bset.valid[s, k, u])])


def read_annotations(path, shape: tuple[int, int, int]) -> BoundarySet:
    """Read a boundary CSV for a volume of ``shape`` = (S, H, W).

    Columns without an entry are marked invalid.
    """
    s_count, h, w = shape
    rows = np.zeros((s_count, len(SURFACE_NAMES), w))
    valid = np.zeros(rows.shape, dtype=bool)
    seen = np.zeros(rows.shape, dtype=bool)
    index = {name: k for k, name in enumerate(SURFACE_NAMES)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise DataFormatError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}, got {header}")
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                s, name, u, r, v = int(rec[0]), rec[1], int(rec[2]), float(rec[3]), int(rec[4])
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}:{line_no}: malformed record {rec}") from exc
            if name not in index:
                raise DataFormatError(f"{path}:{line_no}: unknown surface {name!r}")
            if not (0 <= s < s_count and 0 <= u < w):
                raise DataFormatError(f"{path}:{line_no}: slice/column out of range")
            k = index[name]
            if seen[s, k, u]:
                raise DataFormatError(f"{path}:{line_no}: duplicate entry for slice {s}, {name}, column {u}")
            seen[s, k, u] = True
            if v and not 0 <= r < h:
                raise DataFormatError(f"{path}:{line_no}: row {r} outside [0, {h})")
            rows[s, k, u] = r
            valid[s, k, u] = bool(v)
    return BoundarySet(rows, valid)


# -- split manifests ------------------------------------------------------------

def write_split_manifest(splits: dict[str, list[str]], path) -> None:
    lines = []
    for section in SPLIT_SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(splits.get(section, []))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def read_split_manifest(path) -> dict[str, list[str]]:
    splits: dict[str, list[str]] = {name: [] for name in SPLIT_SECTIONS}
    current = None
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in splits:
                raise DataFormatError(f"{path}:{line_no}: unknown section [{current}]")
            continue
        if current is None:
            raise DataFormatError(f"{path}:{line_no}: entry before any section")
        splits[current].append(line)
    seen: dict[str, str] = {}
    for section, names in splits.items():
        for name in names:
            if name in seen:
                raise DataFormatError(f"{path}: {name!r} listed in both [{seen[name]}] and [{section}]")
            seen[name] = section
    return splits


# -- 2.5D windows and masks -----------------------------------------------------

def window_indices(n_total: int, centre: int, n: int) -> np.ndarray:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"window size must be odd, got {n}")
    if not 0 <= centre < n_total:
        raise IndexError(f"centre {centre} outside [0, {n_total})")
    if n >= 2 * n_total:
        raise ValueError(f"window of {n} slices is too large for a {n_total}-slice volume")
    half = n // 2
    return np.clip(np.arange(centre - half, centre + half + 1), 0, n_total - 1)


def window_slices(vol: Volume | np.ndarray, centre: int, n: int) -> np.ndarray:
    """``n`` consecutive B-scans around ``centre``; edge slices are repeated."""
    px = vol.pixels if isinstance(vol, Volume) else np.asarray(vol)
    return px[window_indices(px.shape[0], centre, n)]


def mask_from_boundaries(rows: np.ndarray, valid: np.ndarray | None, height: int, width: int) -> np.ndarray:
    """Layer class per pixel from one slice's ``(5, W)`` boundary rows.

    Pixel row v gets the number of surfaces s_k with s_k <= v, so class 0 lies
    above the first surface and class 5 below the last. Columns with any
    invalid surface are set to ``IGNORE``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != width:
        raise ValueError(f"boundary rows must be (n_surfaces, {width}), got {rows.shape}")
    valid = np.ones(rows.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    col_ok = valid.all(axis=0)
    if np.any((np.diff(rows, axis=0) < 0) & col_ok[None, :]):
        raise ValueError("boundaries are not ordered top to bottom")
    v = np.arange(height, dtype=np.float64)[:, None, None]
    classes = (rows[None, :, :] <= v).sum(axis=1).astype(np.int64)
    classes[:, ~col_ok] = IGNORE
    return classes
