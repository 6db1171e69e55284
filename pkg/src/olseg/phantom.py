"""Synthetic OCT volumes with known layer boundaries.

Geometry is expressed as fractions of the image height so the same config
scales from desk-size phantoms to full-size B-scans. Each volume has a
quadratic RPE curve (random tilt and curvature per volume), smooth random
undulation, and five surfaces stacked above the RPE with smoothly varying
layer thicknesses. Intensities are piecewise constant per layer, then
attenuated under vessel shadows and multiplied by unit-mean gamma speckle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataio import BoundarySet, Volume


class PhantomError(ValueError):
    pass


@dataclass
class PhantomConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (16, 128, 128)  # slices, height, width
    # vitreous, RNFL, GCL+IPL, INL+OPL, ONL, inner segments (above RPE)
    intensities: tuple[float, ...] = (0.03, 0.45, 0.38, 0.20, 0.07, 0.30)
    rpe_intensity: float = 0.95
    choroid_intensity: float = 0.40
    # ILM->RNFL-GCL, ->IPL-INL, ->OPL-ONL, ->ONL-IS, as fractions of height
    layer_thickness: tuple[float, ...] = (0.045, 0.065, 0.06, 0.065)
    thickness_variation: float = 0.25
    rpe_gap: float = 0.03  # ONL-IS to top of RPE
    rpe_thickness: float = 0.04
    rpe_row: float = 0.62  # RPE vertex row, fraction of height
    curvature: float = 0.10  # sag at the image edges, fraction of height
    tilt: float = 0.05
    undulation: float = 0.02  # amplitude of smooth RPE perturbation, fraction of height
    smooth_columns: float = 12.0  # gaussian sigma (columns) for perturbation fields
    smooth_slices: float = 3.0  # gaussian sigma (slices)
    max_slice_step: float = 1.5  # rows; bound on adjacent-slice surface change
    speckle: float = 0.25  # std of the multiplicative gamma noise; 0 disables
    n_shadows: int = 2
    shadow_width: float = 3.0  # columns (gaussian sigma)
    shadow_attenuation: float = 0.5  # intensity factor at the shadow centre

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise PhantomError(f"dims (slices, height, width) must each be >= 16, got {self.dims}")
        if len(self.intensities) != 6 or len(self.layer_thickness) != 4:
            raise PhantomError("need 6 region intensities and 4 layer thicknesses")
        levels = list(self.intensities) + [self.rpe_intensity, self.choroid_intensity]
        if any(not 0 <= v <= 1 for v in levels):
            raise PhantomError("intensities must lie in [0, 1]")
        if not 0 < self.shadow_attenuation <= 1:
            raise PhantomError("shadow attenuation must lie in (0, 1]")
        if self.speckle < 0 or self.undulation < 0 or self.curvature < 0:
            raise PhantomError("speckle, undulation and curvature must be nonnegative")


@dataclass
class PhantomGeometry:
    surfaces: np.ndarray  # (S, 5, W) rows, strictly increasing over the surface axis
    rpe_top: np.ndarray  # (S, W)
    rpe_bottom: np.ndarray  # (S, W)
    shadow_columns: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (S, n_shadows)


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], cfg: PhantomConfig) -> np.ndarray:
    """Band-limited noise over (slice, column), scaled to max |value| = 1."""
    raw = rng.standard_normal(shape)
    f = gaussian_filter(raw, sigma=(cfg.smooth_slices, cfg.smooth_columns), mode="reflect")
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def phantom_geometry(cfg: PhantomConfig) -> PhantomGeometry:
    s_count, h, w = cfg.dims
    if cfg.thickness_variation >= 1 or min(cfg.layer_thickness) <= 0:
        raise PhantomError("layer thickness would reach zero: surfaces would overlap")
    rng = np.random.default_rng([cfg.seed, 0])
    u = (np.arange(w) - (w - 1) / 2) / (w / 2)
    sag = cfg.curvature * h * rng.uniform(0.5, 1.0)
    tilt = cfg.tilt * h * rng.uniform(-1.0, 1.0)
    base = cfg.rpe_row * h - sag * u ** 2 + tilt * u  # (W,)

    rpe_top = np.broadcast_to(base, (s_count, w)).copy()
    if cfg.undulation > 0:
        rpe_top += cfg.undulation * h * _smooth_field(rng, (s_count, w), cfg)
    thickness = []
    for t in cfg.layer_thickness:
        f = _smooth_field(rng, (s_count, w), cfg)
        thickness.append(t * h * (1 + cfg.thickness_variation * f))
    surfaces = np.empty((s_count, 5, w))
    surfaces[:, 4] = rpe_top - cfg.rpe_gap * h
    for k in range(3, -1, -1):
        surfaces[:, k] = surfaces[:, k + 1] - thickness[k]

    if s_count > 1:
        # shrink slice-to-slice variation about the per-column mean until the step bound holds
        step = max(np.abs(np.diff(surfaces, axis=0)).max(), np.abs(np.diff(rpe_top, axis=0)).max())
        if step >= cfg.max_slice_step:
            factor = 0.999 * cfg.max_slice_step / step
            surfaces = surfaces.mean(axis=0) + factor * (surfaces - surfaces.mean(axis=0))
            rpe_top = rpe_top.mean(axis=0) + factor * (rpe_top - rpe_top.mean(axis=0))

    if np.any(np.diff(surfaces, axis=1) <= 0):
        raise PhantomError("generated surfaces overlap")
    rpe_bottom = rpe_top + cfg.rpe_thickness * h
    if surfaces[:, 0].min() < 1 or rpe_bottom.max() > h - 1:
        raise PhantomError("layers do not fit inside the image; reduce thickness or curvature")

    centres = rng.uniform(0, w, cfg.n_shadows)
    drift = rng.uniform(-0.3, 0.3, cfg.n_shadows)
    shadow_cols = centres[None, :] + drift[None, :] * np.arange(s_count)[:, None]
    return PhantomGeometry(surfaces, rpe_top, rpe_bottom, shadow_cols)


def render_slice(geom: PhantomGeometry, index: int, cfg: PhantomConfig) -> np.ndarray:
    """Noise-free, shadow-free intensities of one slice."""
    _, h, w = cfg.dims
    v = np.arange(h, dtype=np.float64)[:, None]
    surf = geom.surfaces[index]
    region = (surf[None, :, :] <= v[:, :, None]).sum(axis=1)
    img = np.asarray(cfg.intensities)[region]
    top, bottom = geom.rpe_top[index][None, :], geom.rpe_bottom[index][None, :]
    img = np.where((v >= top) & (v < bottom), cfg.rpe_intensity, img)
    img = np.where(v >= bottom, cfg.choroid_intensity, img)
    return img


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, BoundarySet]:
    """Build a volume and its ground-truth boundaries. Deterministic in ``cfg.seed``."""
    geom = phantom_geometry(cfg)
    s_count, h, w = cfg.dims
    cols = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)[:, None]
    pixels = np.empty((s_count, h, w), dtype=np.float32)
    for s in range(s_count):
        img = render_slice(geom, s, cfg)
        if cfg.n_shadows and cfg.shadow_attenuation < 1:
            profile = np.zeros(w)
            for c in geom.shadow_columns[s]:
                profile = np.maximum(profile, np.exp(-0.5 * ((cols - c) / cfg.shadow_width) ** 2))
            factor = 1 - (1 - cfg.shadow_attenuation) * profile
            below = v >= geom.surfaces[s, 1][None, :]
            img = np.where(below, img * factor[None, :], img)
        if cfg.speckle > 0:
            shape = 1.0 / cfg.speckle ** 2
            noise_rng = np.random.default_rng([cfg.seed, 1, s])
            img = img * noise_rng.gamma(shape, 1.0 / shape, size=img.shape)
        pixels[s] = np.clip(img, 0.0, 1.0)
    truth = BoundarySet(geom.surfaces.copy(), np.ones(geom.surfaces.shape, dtype=bool))
    return Volume(pixels, boundaries=truth), truth


def corrupt_slice(vol: Volume, slice_index: int, severity: float, seed: int = 0) -> Volume:
    """Return a copy of ``vol`` with speckle and blackout patches on one slice.

    Inside a patch the pixel becomes ``(1 - severity) * x + severity * fill``,
    with ``fill`` either zero (blackout) or uniform noise (speckle). Patch
    count grows with severity. Other slices are left untouched.
    """
    if not 0 <= severity <= 1:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    s_count, h, w = vol.pixels.shape
    if not 0 <= slice_index < s_count:
        raise IndexError(f"slice {slice_index} outside [0, {s_count})")
    out = Volume(vol.pixels.copy(), vol.spacing_um, vol.boundaries)
    if severity == 0:
        return out
    rng = np.random.default_rng([seed, slice_index, 7])
    img = out.pixels[slice_index].astype(np.float64)
    for _ in range(1 + int(round(9 * severity))):
        ph = int(rng.uniform(0.25, 0.6) * h)
        pw = int(rng.uniform(0.15, 0.35) * w)
        r0 = int(rng.integers(0, h - ph + 1))
        c0 = int(rng.integers(0, w - pw + 1))
        if rng.random() < 0.5:
            fill = np.zeros((ph, pw))
        else:
            fill = rng.random((ph, pw))
        patch = img[r0:r0 + ph, c0:c0 + pw]
        img[r0:r0 + ph, c0:c0 + pw] = (1 - severity) * patch + severity * fill
    out.pixels[slice_index] = np.clip(img, 0, 1).astype(np.float32)
    return out
