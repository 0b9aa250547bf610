"""Scene construction and the two-arm pseudo-thermal imaging simulation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import sici

from .optics import (
    IntensityGrid,
    SourceSpec,
    TransmissionMask,
    WindowedFresnel,
    aperture_mask,
    axis_coords,
    centered_slice,
    source_cells,
)

log = logging.getLogger(__name__)

__all__ = [
    "OpticalLayout",
    "RealizationRecord",
    "MeasurementSet",
    "CampaignError",
    "PRESETS",
    "preset_layout",
    "split_seed",
    "make_double_slit",
    "pixelate",
    "conventional_image_analytic",
    "conventional_image_ensemble",
    "simulate_ghost_realization",
    "run_campaign",
    "ForwardModel",
]

_MASK64 = (1 << 64) - 1


def split_seed(master_seed, index):
    """Derive the seed of realization ``index`` from ``master_seed``.

    SplitMix64 finalizer applied to ``master_seed + (index + 1) * golden``,
    all arithmetic mod 2**64.
    """
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class OpticalLayout:
    """Scene geometry, source parameters and grid settings (SI units).

    The object plane is sampled at ``object_pitch`` on a ``grid_size`` grid;
    the source pitch follows from the scaled propagation rule. Only the
    central ``window`` x ``window`` object-plane samples are kept.
    """

    wavelength: float = 650e-9
    source_diameter: float = 2.0e-3
    source_shape: str = "square"
    z: float = 0.2
    z1: float = 0.5
    z2: float = 0.5
    f: float = 0.25
    L: float = 6e-3
    L1: float = 30e-3
    path_variant: str = "lensed"
    reference_pixel_pitch: float = 3e-6
    object_pitch: float = 3e-6
    grid_size: int = 2048
    window: int = 288
    lens_shape: str = "square"
    source_method: str = "scaled"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("wavelength", "source_diameter", "z", "z1", "object_pitch",
                     "reference_pixel_pitch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.path_variant not in ("lensed", "open"):
            raise ValueError(f"path_variant must be 'lensed' or 'open', got {self.path_variant!r}")
        if self.path_variant == "lensed":
            for name in ("z2", "f", "L"):
                if not getattr(self, name) > 0:
                    raise ValueError(f"{name} must be positive for the lensed variant")
        elif not self.L1 > 0:
            raise ValueError("L1 must be positive for the open variant")
        if self.source_shape not in ("disk", "square") or self.lens_shape not in ("disk", "square"):
            raise ValueError("source_shape and lens_shape must be 'disk' or 'square'")
        if self.source_method != "scaled":
            # the source and object pitches differ by ~7x, so only the
            # pitch-changing method can connect them
            raise ValueError(f"source leg supports only the 'scaled' method, got {self.source_method!r}")
        if self.window < 1 or self.window > self.grid_size:
            raise ValueError("window must lie in [1, grid_size]")
        k = self.pixel_factor
        if self.window % k:
            raise ValueError(f"window {self.window} is not divisible by the pixel factor {k}")
        self.source_spec()

    @property
    def pixel_factor(self):
        ratio = self.reference_pixel_pitch / self.object_pitch
        k = int(round(ratio))
        if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise ValueError(
                f"reference_pixel_pitch {self.reference_pixel_pitch:g} is not an integer "
                f"multiple of object_pitch {self.object_pitch:g}"
            )
        return k

    @property
    def source_pitch(self):
        return self.wavelength * self.z / (self.grid_size * self.object_pitch)

    def source_spec(self):
        return SourceSpec(self.source_diameter, self.grid_size, self.source_pitch,
                          shape=self.source_shape)

    def conjugate_error(self):
        """Relative violation of ``1/z1 + 1/z2 = 1/f`` (0 when conjugate)."""
        return abs(1.0 / self.z1 + 1.0 / self.z2 - 1.0 / self.f) * self.f

    def speckle_width(self):
        """Nominal speckle scale ``wavelength * z / D`` at the object plane."""
        return self.wavelength * self.z / self.source_diameter

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "paper": OpticalLayout(grid_size=2048),
    # same physical geometry; coarser source sampling, still alias-free
    "fast": OpticalLayout(grid_size=1024),
}


def preset_layout(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass(frozen=True)
class RealizationRecord:
    reference_frame: IntensityGrid
    bucket: float
    seed: int

    def __post_init__(self):
        if not self.bucket >= 0:
            raise ValueError(f"bucket must be non-negative, got {self.bucket}")


@dataclass
class MeasurementSet:
    layout: OpticalLayout
    records: list
    object_truth: TransmissionMask | None = None

    def __post_init__(self):
        if not self.records:
            raise ValueError("a measurement set needs at least one record")
        shape = self.records[0].reference_frame.shape
        pitch = self.records[0].reference_frame.pitch
        for rec in self.records:
            if rec.reference_frame.shape != shape or rec.reference_frame.pitch != pitch:
                raise ValueError("all reference frames must share pitch and dimensions")

    def __len__(self):
        return len(self.records)

    @property
    def frame_pitch(self):
        return self.records[0].reference_frame.pitch

    def frames(self):
        return np.stack([r.reference_frame.data for r in self.records])

    def buckets(self):
        return np.array([r.bucket for r in self.records], dtype=np.float64)

    def seeds(self):
        return [r.seed for r in self.records]

    def subset(self, m=None, indices=None):
        recs = self.records[:m] if indices is None else [self.records[i] for i in indices]
        return MeasurementSet(self.layout, list(recs), self.object_truth)


def make_double_slit(a, d, h, pitch, dims):
    """Binary mask of two ``a``-wide, ``h``-tall slits ``d`` apart (centres).

    A cell is open when its centre lies inside a slit; ``dims`` is
    ``(rows, cols)`` or a single int for a square grid.
    """
    if np.isscalar(dims):
        dims = (int(dims), int(dims))
    ny, nx = dims
    if min(a, d, h, pitch) <= 0:
        raise ValueError("slit geometry must be positive")
    if a >= d:
        raise ValueError(f"slit width a={a:g} must be smaller than separation d={d:g}")
    if d + a > nx * pitch or h > ny * pitch:
        raise ValueError("double slit does not fit in the grid")
    y = axis_coords(ny, pitch)[:, None]
    x = axis_coords(nx, pitch)[None, :]
    slack = 1e-9 * pitch
    rows = np.abs(y) <= h / 2 + slack
    cols = (np.abs(np.abs(x) - d / 2) <= a / 2 + slack)
    return TransmissionMask((rows & cols).astype(np.float64), pitch)


def pixelate(grid, pixel_pitch):
    """Integrate intensity over ``k x k`` detector pixels (block sums)."""
    ratio = pixel_pitch / grid.pitch
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"pixel pitch {pixel_pitch:g} is not an integer multiple of {grid.pitch:g}")
    ny, nx = grid.shape
    if ny % k or nx % k:
        raise ValueError(f"grid {grid.shape} is not divisible into {k}x{k} pixels")
    if k == 1:
        return IntensityGrid(grid.data.copy(), grid.pitch)
    out = grid.data.reshape(ny // k, k, nx // k, k).sum(axis=(1, 3))
    return IntensityGrid(out, pixel_pitch)


def _sinc2_antiderivative(u):
    # d/du [Si(2 pi u)/pi - sin^2(pi u)/(pi^2 u)] = sinc^2(u)
    u = np.asarray(u, dtype=np.float64)
    si, _ = sici(2 * np.pi * u)
    with np.errstate(invalid="ignore", divide="ignore"):
        tail = np.where(u == 0, 0.0, np.sin(np.pi * u) ** 2 / (np.pi**2 * np.where(u == 0, 1, u)))
    return si / np.pi - tail


def _pixel_kernel(x_out, x_in, pitch, layout):
    # exact integral of sinc^2[L (x/z2 + x'/z1) / lam] over each input cell
    scale = layout.L / layout.wavelength
    lo = scale * (x_out[:, None] / layout.z2 + (x_in[None, :] - pitch / 2) / layout.z1)
    hi = scale * (x_out[:, None] / layout.z2 + (x_in[None, :] + pitch / 2) / layout.z1)
    return (_sinc2_antiderivative(hi) - _sinc2_antiderivative(lo)) / (scale / layout.z1)


def conventional_image_analytic(layout, obj):
    """Incoherent lens image with a square pupil of side ``L``.

    Integrates ``|t|^2`` against the separable ``sinc^2`` kernel, exactly
    per object cell, and samples the result on the conjugate plane
    (magnification ``-z2/z1``). Normalized to peak 1.
    """
    if layout.conjugate_error() > 1e-6:
        raise ValueError(
            f"layout is not conjugate: 1/z1 + 1/z2 - 1/f deviates by "
            f"{layout.conjugate_error():.3g} (relative to 1/f)"
        )
    ny, nx = obj.shape
    out_pitch = obj.pitch * layout.z2 / layout.z1
    ky = _pixel_kernel(axis_coords(ny, out_pitch), axis_coords(ny, obj.pitch), obj.pitch, layout)
    kx = _pixel_kernel(axis_coords(nx, out_pitch), axis_coords(nx, obj.pitch), obj.pitch, layout)
    img = ky @ (obj.data**2) @ kx.T
    img = np.clip(img, 0, None)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return IntensityGrid(img, out_pitch)


class ForwardModel:
    """Precomputed transforms for one (layout, object) pair.

    Build once and call :meth:`realization` per seed; the instance holds no
    mutable state, so concurrent calls are safe.
    """

    def __init__(self, layout, obj):
        layout.validate()
        if obj.shape != (layout.window, layout.window):
            raise ValueError(f"object grid {obj.shape} must be {layout.window}x{layout.window}")
        if not np.isclose(obj.pitch, layout.object_pitch, rtol=1e-9, atol=0):
            raise ValueError(f"object pitch {obj.pitch:g} differs from layout {layout.object_pitch:g}")
        self.layout = layout
        self.obj = obj
        n = layout.grid_size
        self.spec = layout.source_spec()
        _, src_rows, src_cols = source_cells(self.spec, 0, randomize=False)
        win = centered_slice(n, layout.window)
        win_idx = np.arange(win.start, win.stop)
        self._source_leg = WindowedFresnel(n, self.spec.pitch, layout.wavelength, layout.z,
                                           src_rows, src_cols, win_idx, win_idx)
        self._test = None
        support = obj.data != 0
        rows = np.flatnonzero(support.any(axis=1))
        cols = np.flatnonzero(support.any(axis=0))
        if rows.size:
            self._obj_rows = slice(rows[0], rows[-1] + 1)
            self._obj_cols = slice(cols[0], cols[-1] + 1)
            self._t_block = obj.data[self._obj_rows, self._obj_cols]
            in_rows = slice(win.start + rows[0], win.start + rows[-1] + 1)
            in_cols = slice(win.start + cols[0], win.start + cols[-1] + 1)
            self._test = self._build_test_arm(in_rows, in_cols)

    def _build_test_arm(self, in_rows, in_cols):
        lay = self.layout
        n = lay.grid_size
        out_pitch = lay.wavelength * lay.z1 / (n * lay.object_pitch)
        if lay.path_variant == "lensed":
            kind, size = lay.lens_shape, lay.L
        else:
            kind, size = "square", lay.L1
        coords = axis_coords(n, out_pitch)
        idx = np.flatnonzero(np.abs(coords) <= size / 2 + 1e-9 * out_pitch)
        prop = WindowedFresnel(n, lay.object_pitch, lay.wavelength, lay.z1, in_rows, in_cols,
                               idx, idx, output_chirp=False)
        sub = aperture_mask((n, n), out_pitch, kind, size)[np.ix_(idx, idx)]
        return prop, sub

    def object_field(self, seed):
        block, _, _ = source_cells(self.spec, seed)
        return self._source_leg(block)

    def bucket_from_field(self, field):
        if self._test is None:
            return 0.0
        prop, sub = self._test
        g = field[self._obj_rows, self._obj_cols] * self._t_block
        det = prop(g)
        energy = np.sum(np.abs(det[sub]) ** 2) * prop.out_pitch**2
        return float(energy)

    def realization(self, seed):
        field = self.object_field(seed)
        frame = IntensityGrid(np.abs(field) ** 2, self.layout.object_pitch)
        frame = pixelate(frame, self.layout.reference_pixel_pitch)
        return RealizationRecord(frame, self.bucket_from_field(field), int(seed))


def simulate_ghost_realization(layout, obj, seed):
    """One speckle realization: pixelated reference frame plus bucket value.

    Lensed variant: bucket is the power through the lens aperture ``L`` at
    distance ``z1`` (everything past the lens is lossless). Open variant:
    power inside the centred ``L1 x L1`` square at distance ``z1``.
    """
    return ForwardModel(layout, obj).realization(seed)


class CampaignError(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        detail = "; ".join(f"#{i}: {e}" for i, e in failures[:5])
        super().__init__(f"{len(failures)} realization(s) failed: {detail}")


def run_campaign(layout, obj, m, master_seed, n_jobs=1):
    """Simulate ``m`` realizations with seeds ``split_seed(master_seed, r)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    model = ForwardModel(layout, obj)
    seeds = [split_seed(master_seed, r) for r in range(m)]

    def one(r):
        try:
            return r, model.realization(seeds[r]), None
        except Exception as exc:  # collected and reported together
            return r, None, exc

    if n_jobs == 1:
        results = [one(r) for r in range(m)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(m)))
    failures = [(r, exc) for r, _, exc in results if exc is not None]
    if failures:
        raise CampaignError(failures)
    records = [None] * m
    for r, rec, _ in results:
        records[r] = rec
    log.debug("campaign of %d realizations done (master seed %d)", m, master_seed)
    return MeasurementSet(layout, records, obj)


def conventional_image_ensemble(layout, obj, n_realizations, seed):
    """Long-exposure image: test-arm intensity on the conjugate plane,
    averaged over ``n_realizations`` speckle illuminations (not normalized).
    """
    if layout.conjugate_error() > 1e-6:
        raise ValueError("conventional imaging needs a conjugate lensed layout")
    if n_realizations < 1:
        raise ValueError("n_realizations must be >= 1")
    lay = replace(layout, path_variant="lensed")
    model = ForwardModel(lay, obj)
    n = lay.grid_size
    win = centered_slice(n, lay.window)
    win_idx = np.arange(win.start, win.stop)
    lens_pitch = lay.wavelength * lay.z1 / (n * lay.object_pitch)
    coords = axis_coords(n, lens_pitch)
    idx = np.flatnonzero(np.abs(coords) <= lay.L / 2 + 1e-9 * lens_pitch)
    # at the conjugate condition the lens phase cancels the output chirp of
    # the first leg and the input chirp of the second, so all three are
    # omitted (the converging wave would be undersampled on the lens grid)
    to_lens = WindowedFresnel(n, lay.object_pitch, lay.wavelength, lay.z1, win, win, idx, idx,
                              output_chirp=False)
    pupil = aperture_mask((n, n), lens_pitch, lay.lens_shape, lay.L)[np.ix_(idx, idx)]
    lens_rows = slice(idx[0], idx[-1] + 1)
    to_image = WindowedFresnel(n, lens_pitch, lay.wavelength, lay.z2, lens_rows, lens_rows,
                               win_idx, win_idx, input_chirp=False)
    acc = np.zeros((lay.window, lay.window))
    t = obj.data
    for r in range(n_realizations):
        field = model.object_field(split_seed(seed, r)) * t
        lens = to_lens(field) * pupil
        acc += np.abs(to_image(lens)) ** 2
    return IntensityGrid(acc / n_realizations, to_image.out_pitch)
