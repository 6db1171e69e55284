"""B-scan conditioning before the network sees it.

The pipeline flattens each B-scan on a quadratic fit to the RPE, keeps the
band of rows between 1/8 and 5/8 of the height, smooths with a Gaussian,
equalizes contrast with CLAHE and resizes to the network input size. Every
geometric step is recorded in a ``TransformRecord`` so predicted boundary
rows can be mapped back to the original B-scan.

Row mapping, original -> network, for column u::

    flat = row + shift[u]
    band = flat - crop_top
    net  = (band + 0.5) * scale_rows - 0.5
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

GRAY_LEVELS = 256


class UnusableScanError(ValueError):
    """No RPE curve could be fitted to the B-scan."""


@dataclass
class BScan:
    pixels: np.ndarray  # (H, W) in [0, 1]
    row_spacing_um: float | None = None
    col_spacing_um: float | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if np.issubdtype(px.dtype, np.integer):
            px = px / float(np.iinfo(px.dtype).max)
        self.pixels = px.astype(np.float64, copy=False)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 16:
            raise ValueError(f"B-scan must be 2D with both sides >= 16, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("B-scan intensities must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def replace(self, pixels: np.ndarray) -> "BScan":
        return BScan(pixels, self.row_spacing_um, self.col_spacing_um)


def _pixels(b) -> np.ndarray:
    return b.pixels if isinstance(b, BScan) else np.asarray(b, dtype=np.float64)


@dataclass
class QuadraticCurve:
    """row(u) = a u^2 + b u + c, with u the column index."""

    a: float
    b: float
    c: float
    residual_rms: float = 0.0

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return (self.a * u + self.b) * u + self.c


@dataclass
class PreprocessConfig:
    rpe_sigma: float = 2.0  # smoothing before the gradient search
    outlier_threshold: int = 60
    refit_residual: bool = True
    min_support: float = 0.5  # fraction of columns that must back the fitted curve
    gaussian_sigma: float = 1.0
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 0.01
    output_size: tuple[int, int] = (512, 512)

    def __post_init__(self):
        self.clahe_tiles = tuple(int(t) for t in self.clahe_tiles)
        self.output_size = tuple(int(t) for t in self.output_size)
        if self.rpe_sigma < 0 or self.gaussian_sigma < 0:
            raise ValueError("smoothing sigmas must be nonnegative")
        if not 0 <= self.min_support <= 1:
            raise ValueError("min_support must lie in [0, 1]")
        if self.outlier_threshold <= 0 or self.clahe_clip <= 0:
            raise ValueError("outlier threshold and CLAHE clip limit must be positive")
        if min(self.clahe_tiles) < 1 or min(self.output_size) < 1:
            raise ValueError("tile counts and output size must be positive")


@dataclass
class TransformRecord:
    column_shifts: np.ndarray  # (W,) rows added to each original column
    crop_top: int
    crop_height: int
    resize_scale_rows: float
    resize_scale_cols: float
    source_shape: tuple[int, int]
    rpe_found: bool = True
    curve: tuple[float, float, float] | None = field(default=None, repr=False)

    @property
    def output_shape(self) -> tuple[int, int]:
        h = int(round(self.crop_height * self.resize_scale_rows))
        w = int(round(self.source_shape[1] * self.resize_scale_cols))
        return h, w

    def _net_columns(self) -> np.ndarray:
        """Network-space column position of every original column."""
        u = np.arange(self.source_shape[1], dtype=np.float64)
        return (u + 0.5) * self.resize_scale_cols - 0.5

    def rows_to_network(self, rows: np.ndarray, valid: np.ndarray | None = None):
        """Map ``(K, W)`` original boundary rows to ``(K, W_net)`` network rows.

        Network columns are linearly interpolated from the two nearest original
        columns; they are valid when both sources are valid and the mapped row
        lies inside the network image.
        """
        rows = np.asarray(rows, dtype=np.float64)
        valid = np.ones(rows.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        band = rows + self.column_shifts[None, :] - self.crop_top
        net_rows = (band + 0.5) * self.resize_scale_rows - 0.5
        h_net, w_net = self.output_shape
        src = np.clip((np.arange(w_net) + 0.5) / self.resize_scale_cols - 0.5, 0, self.source_shape[1] - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, self.source_shape[1] - 1)
        frac = src - lo
        out = net_rows[:, lo] * (1 - frac) + net_rows[:, hi] * frac
        out_valid = valid[:, lo] & (valid[:, hi] | (frac == 0))
        out_valid &= (out >= 0) & (out <= h_net - 1)
        return out, out_valid

    def rows_to_original(self, net_rows: np.ndarray) -> np.ndarray:
        """Map ``(K, W_net)`` network rows back to ``(K, W)`` original rows, clipped to the image."""
        net_rows = np.asarray(net_rows, dtype=np.float64)
        cols = np.arange(net_rows.shape[-1], dtype=np.float64)
        at_u = np.stack([np.interp(self._net_columns(), cols, r) for r in net_rows.reshape(-1, net_rows.shape[-1])])
        at_u = at_u.reshape(net_rows.shape[:-1] + (self.source_shape[1],))
        band = (at_u + 0.5) / self.resize_scale_rows - 0.5
        rows = band + self.crop_top - self.column_shifts
        return np.clip(rows, 0, self.source_shape[0] - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["column_shifts"] = [int(s) for s in self.column_shifts]
        d["source_shape"] = list(self.source_shape)
        d["curve"] = None if self.curve is None else [float(v) for v in self.curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformRecord":
        d = dict(d)
        d["column_shifts"] = np.asarray(d["column_shifts"], dtype=np.int64)
        d["source_shape"] = tuple(d["source_shape"])
        if d.get("curve") is not None:
            d["curve"] = tuple(d["curve"])
        return cls(**d)


def save_transforms(records: list[TransformRecord], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1))


def load_transforms(path) -> list[TransformRecord]:
    return [TransformRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- RPE curve -----------------------------------------------------------------

def detect_rpe_candidates(b, sigma: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Row of the strongest dark-to-bright (downward) transition in each column.

    Returns ``(rows, valid)``. Columns with no intensity change, or with no
    brightening anywhere, are flagged invalid.
    """
    px = _pixels(b)
    if sigma > 0:
        px = gaussian_smooth(px, sigma)
    grad = np.gradient(px, axis=0)  # central difference in the interior
    rows = np.argmax(grad, axis=0)
    valid = (np.ptp(px, axis=0) > 0) & (grad.max(axis=0) > 0)
    return rows.astype(np.int64), valid


def reject_outliers(rows: np.ndarray, valid: np.ndarray, threshold_px: float = 60) -> np.ndarray:
    """Validity mask with isolated jumps removed.

    A candidate is dropped when it differs by more than ``threshold_px`` from
    every existing nearest valid neighbour (left and right; one-sided at the
    ends). Raises ``UnusableScanError`` if nothing survives.
    """
    rows = np.asarray(rows, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size < 3:
        raise UnusableScanError(f"need at least 3 valid RPE candidates, got {idx.size}")
    r = rows[idx]
    far_left = np.r_[True, np.abs(np.diff(r)) > threshold_px]
    far_right = np.r_[np.abs(np.diff(r)) > threshold_px, True]
    keep = valid.copy()
    keep[idx[far_left & far_right]] = False
    if not keep.any():
        raise UnusableScanError("every RPE candidate was rejected as an outlier")
    return keep


def fit_quadratic(cols, rows) -> QuadraticCurve:
    cols = np.asarray(cols, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    if cols.size < 3 or np.unique(cols).size < 3:
        raise UnusableScanError("quadratic fit needs points in at least 3 distinct columns")
    design = np.stack([cols ** 2, cols, np.ones_like(cols)], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(design, rows, rcond=None)
    if rank < 3:
        raise UnusableScanError("rank-deficient quadratic fit")
    resid = rows - design @ coef
    return QuadraticCurve(*map(float, coef), residual_rms=float(np.sqrt(np.mean(resid ** 2))))


def fit_rpe_curve(b, cfg: PreprocessConfig | None = None) -> tuple[QuadraticCurve, np.ndarray]:
    """Detect, reject and fit. Returns the curve and the mask of columns used."""
    cfg = cfg or PreprocessConfig()
    rows, valid = detect_rpe_candidates(b, cfg.rpe_sigma)
    return fit_candidates(rows, valid, cfg)


def fit_candidates(rows: np.ndarray, valid: np.ndarray,
                   cfg: PreprocessConfig | None = None) -> tuple[QuadraticCurve, np.ndarray]:
    cfg = cfg or PreprocessConfig()
    keep = reject_outliers(rows, valid, cfg.outlier_threshold)
    cols = np.flatnonzero(keep)
    curve = fit_quadratic(cols, rows[cols])
    if cfg.refit_residual:
        # clusters of adjacent outliers pass the neighbour test; drop them by residual
        close = np.abs(rows[cols] - curve(cols)) <= cfg.outlier_threshold
        if not close.all() and np.unique(cols[close]).size >= 3:
            keep = np.zeros_like(keep)
            keep[cols[close]] = True
            cols = cols[close]
            curve = fit_quadratic(cols, rows[cols])
    if cols.size < cfg.min_support * rows.size:
        raise UnusableScanError(f"RPE curve backed by only {cols.size} of {rows.size} columns")
    return curve, keep


# -- geometric steps -------------------------------------------------------------

def column_shifts(curve: QuadraticCurve, height: int, width: int) -> np.ndarray:
    centre = height // 2
    return centre - np.rint(curve(np.arange(width))).astype(np.int64)


def shift_columns(px: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """out[v + shift[u], u] = px[v, u]; vacated rows are zero."""
    h, w = px.shape
    src = np.arange(h)[:, None] - shifts[None, :]
    inside = (src >= 0) & (src < h)
    out = np.take_along_axis(px, np.clip(src, 0, h - 1), axis=0)
    return np.where(inside, out, 0.0)


def flatten(b: BScan, curve: QuadraticCurve) -> tuple[BScan, np.ndarray]:
    """Shift columns so the curve sits on row H // 2. Returns the scan and the shifts."""
    h, w = b.shape
    shifts = column_shifts(curve, h, w)
    if np.any(np.abs(shifts) >= h):
        raise UnusableScanError("flattening shift exceeds the image height")
    return b.replace(shift_columns(b.pixels, shifts)), shifts


def crop_bounds(height: int) -> tuple[int, int]:
    return height // 8, (5 * height) // 8


def crop_band(b: BScan) -> tuple[BScan, int]:
    top, bottom = crop_bounds(b.shape[0])
    return b.replace(b.pixels[top:bottom].copy()), top


# -- filtering ---------------------------------------------------------------------

def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_axis(px: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = kernel.size // 2
    pad = [(0, 0)] * px.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(px, pad, mode="symmetric")  # mirror including the edge pixel
    n = px.shape[axis]
    out = np.zeros_like(px)
    for t, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(t, t + n), axis=axis)
    return out


def gaussian_smooth(b, sigma: float):
    """Separable Gaussian with mirrored borders; ``sigma == 0`` is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    px = _pixels(b)
    if sigma > 0:
        k = gaussian_kernel(sigma)
        px = _filter_axis(_filter_axis(px, k, 0), k, 1)
        px = np.clip(px, 0.0, 1.0) if isinstance(b, BScan) else px
    return b.replace(px) if isinstance(b, BScan) else px


def _tile_mappings(bins: np.ndarray, tiles: tuple[int, int], clip: float) -> np.ndarray:
    tr, tc = tiles
    th, tw = bins.shape[0] // tr, bins.shape[1] // tc
    n_pix = th * tw
    limit = max(clip * n_pix, n_pix / GRAY_LEVELS)
    maps = np.empty((tr, tc, GRAY_LEVELS))
    for i in range(tr):
        for j in range(tc):
            tile = bins[i * th:(i + 1) * th, j * tw:(j + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=GRAY_LEVELS).astype(np.float64)
            excess = np.maximum(hist - limit, 0).sum()
            hist = np.minimum(hist, limit) + excess / GRAY_LEVELS
            maps[i, j] = np.cumsum(hist) / n_pix
    return maps


def _interp_axis(n: int, tile: int, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Neighbouring tile indices and weight of the second one for each pixel."""
    pos = (np.arange(n) + 0.5) / tile - 0.5  # in units of tile centres
    lo = np.clip(np.floor(pos), 0, count - 1).astype(np.int64)
    hi = np.minimum(lo + 1, count - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    frac = np.where(hi == lo, 0.0, frac)
    return lo, hi, frac


def clahe(b, tiles: tuple[int, int] = (8, 8), clip_limit: float = 0.01):
    """Contrast-limited adaptive histogram equalization.

    The image is mirrored out to a multiple of the tile grid. Each tile gets a
    256-bin histogram clipped at ``clip_limit`` times its pixel count (never
    below a flat histogram); the excess is spread evenly over all bins and the
    normalized CDF becomes the tile's mapping. Pixels blend the mappings of the
    four nearest tile centres bilinearly. A constant image is returned as is.
    """
    if clip_limit <= 0:
        raise ValueError("clip limit must be positive")
    px = _pixels(b)
    if np.ptp(px) == 0:
        return b.replace(px.copy()) if isinstance(b, BScan) else px.copy()
    tr, tc = tiles
    h, w = px.shape
    th, tw = -(-h // tr), -(-w // tc)
    padded = np.pad(px, ((0, th * tr - h), (0, tw * tc - w)), mode="symmetric")
    bins = np.clip(np.floor(padded * GRAY_LEVELS), 0, GRAY_LEVELS - 1).astype(np.int64)
    maps = _tile_mappings(bins, (tr, tc), clip_limit)

    r0, r1, fr = _interp_axis(h, th, tr)
    c0, c1, fc = _interp_axis(w, tw, tc)
    level = bins[:h, :w]
    fr, fc = fr[:, None], fc[None, :]
    top = (1 - fc) * maps[r0[:, None], c0[None, :], level] + fc * maps[r0[:, None], c1[None, :], level]
    bottom = (1 - fc) * maps[r1[:, None], c0[None, :], level] + fc * maps[r1[:, None], c1[None, :], level]
    out = np.clip((1 - fr) * top + fr * bottom, 0.0, 1.0)
    return b.replace(out) if isinstance(b, BScan) else out


def _resize_axis(px: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = px.shape[axis]
    if n_in == n_out:
        return px
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    shape = [1] * px.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(px, lo, axis=axis) * (1 - frac) + np.take(px, hi, axis=axis) * frac


def resize_bilinear(px: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-aligned bilinear resize with clamped borders."""
    return _resize_axis(_resize_axis(np.asarray(px, dtype=np.float64), size[0], 0), size[1], 1)


# -- full pipeline ---------------------------------------------------------------------

def _save_debug(px: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(np.rint(np.clip(px, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def preprocess_bscan(b: BScan, cfg: PreprocessConfig | None = None, debug_dir=None,
                     allow_unusable: bool = False,
                     curve: QuadraticCurve | None = None) -> tuple[BScan, TransformRecord]:
    """detect -> reject -> fit -> flatten -> crop -> smooth -> CLAHE -> resize.

    A given ``curve`` replaces the RPE fit. With ``allow_unusable`` a scan
    without a usable fit is passed through unflattened and the record says
    ``rpe_found=False``; otherwise ``UnusableScanError`` propagates.
    """
    cfg = cfg or PreprocessConfig()
    if not isinstance(b, BScan):
        b = BScan(b)
    h, w = b.shape
    stages = {"input": b.pixels}
    found = curve is None
    try:
        if curve is None:
            curve, _ = fit_rpe_curve(b, cfg)
        flat, shifts = flatten(b, curve)
    except UnusableScanError:
        if not allow_unusable:
            raise
        curve, flat, shifts, found = None, b, np.zeros(w, dtype=np.int64), False
    stages["flattened"] = flat.pixels
    band, top = crop_band(flat)
    stages["cropped"] = band.pixels
    smooth = gaussian_smooth(band, cfg.gaussian_sigma)
    stages["smoothed"] = smooth.pixels
    enhanced = clahe(smooth, cfg.clahe_tiles, cfg.clahe_clip)
    stages["clahe"] = enhanced.pixels
    out_h, out_w = cfg.output_size
    resized = resize_bilinear(enhanced.pixels, (out_h, out_w))
    stages["resized"] = resized
    crop_h = band.shape[0]
    record = TransformRecord(
        column_shifts=shifts.astype(np.int64),
        crop_top=int(top),
        crop_height=int(crop_h),
        resize_scale_rows=out_h / crop_h,
        resize_scale_cols=out_w / w,
        source_shape=(h, w),
        rpe_found=found,
        curve=None if curve is None else (curve.a, curve.b, curve.c),
    )
    if debug_dir is not None:
        debug_dir = Path(debug_dir)
        debug_dir.mkdir(parents=True, exist_ok=True)
        for i, (name, px) in enumerate(stages.items()):
            _save_debug(px, debug_dir / f"{i}_{name}.png")
    return BScan(np.clip(resized, 0, 1), b.row_spacing_um, b.col_spacing_um), record


def _drop_inconsistent(curves: list, width: int, threshold: float) -> None:
    """Discard curves that stray more than ``threshold`` rows from the volume's median curve."""
    fitted = [i for i, c in enumerate(curves) if c is not None]
    if len(fitted) < 3:
        return
    cols = np.arange(width, dtype=np.float64)
    traces = np.stack([curves[i](cols) for i in fitted])
    deviation = np.abs(traces - np.median(traces, axis=0)).max(axis=1)
    for i, d in zip(fitted, deviation):
        if d > threshold:
            curves[i] = None


def preprocess_volume(pixels: np.ndarray, cfg: PreprocessConfig | None = None
                      ) -> tuple[np.ndarray, list[TransformRecord], list[int]]:
    """Preprocess every B-scan of an ``(S, H, W)`` stack.

    A B-scan without a usable RPE fit borrows the curve of the nearest B-scan
    that has one (ties go to the earlier slice), so neighbouring slices stay
    aligned. A fit that strays more than ``outlier_threshold`` rows from the
    median curve of the volume counts as unusable too. Returns the processed
    stack, the records and the borrowing slices.
    """
    cfg = cfg or PreprocessConfig()
    curves: list[QuadraticCurve | None] = []
    for px in pixels:
        try:
            curve, _ = fit_rpe_curve(BScan(px), cfg)
            fits = np.abs(column_shifts(curve, *px.shape)).max() < px.shape[0]
            curves.append(curve if fits else None)
        except UnusableScanError:
            curves.append(None)
    _drop_inconsistent(curves, pixels.shape[2], cfg.outlier_threshold)
    good = [i for i, c in enumerate(curves) if c is not None]
    borrowed = [i for i, c in enumerate(curves) if c is None]
    out, records = [], []
    for i, px in enumerate(pixels):
        curve = curves[i]
        if curve is None and good:
            curve = curves[min(good, key=lambda j: (abs(j - i), j))]
        processed, rec = preprocess_bscan(BScan(px), cfg, allow_unusable=True, curve=curve)
        rec.rpe_found = curves[i] is not None
        out.append(processed.pixels)
        records.append(rec)
    return np.stack(out), records, borrowed
