"""Scalar wave-optics kernel.

Grids use cell-centred coordinates: sample ``i`` of an ``N``-sample axis sits at
``(i - (N - 1) / 2) * pitch`` so every grid is mirror-symmetric about its
centre. The constant ``exp(jkz)`` carrier phase is dropped from all
propagators; it never affects an intensity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "OpticalField",
    "IntensityGrid",
    "TransmissionMask",
    "SourceSpec",
    "SamplingError",
    "axis_coords",
    "source_cells",
    "generate_source_realization",
    "fresnel_propagate",
    "scaled_fresnel_window",
    "WindowedFresnel",
    "centered_slice",
    "aperture_mask",
    "apply_thin_lens",
    "apply_aperture",
    "apply_transmission",
    "intensity_of",
]


class SamplingError(ValueError):
    """Raised when a propagation would alias on the requested grid."""


def axis_coords(n, pitch):
    """Cell-centred sample positions of an ``n``-sample axis."""
    return (np.arange(n) - (n - 1) / 2.0) * pitch


def _check_2d(data, name):
    if data.ndim != 2 or data.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {data.shape}")


@dataclass(frozen=True)
class OpticalField:
    data: np.ndarray
    pitch: float
    wavelength: float
    plane_label: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        _check_2d(data, "field data")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite samples")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def energy(self):
        """Total power ``sum |U|^2 * pitch^2``."""
        return float(np.sum(np.abs(self.data) ** 2) * self.pitch**2)

    def coords(self):
        ny, nx = self.data.shape
        return axis_coords(ny, self.pitch), axis_coords(nx, self.pitch)


@dataclass(frozen=True)
class IntensityGrid:
    data: np.ndarray
    pitch: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_2d(data, "intensity data")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        if np.any(data < 0) or not np.all(np.isfinite(data)):
            raise ValueError("intensity must be finite and non-negative")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def energy(self):
        return float(self.data.sum() * self.pitch**2)


@dataclass(frozen=True)
class TransmissionMask:
    """Real amplitude transmission ``t`` in [0, 1]."""

    data: np.ndarray
    pitch: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_2d(data, "mask data")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        if np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
            raise ValueError("transmission values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class SourceSpec:
    """Pseudo-thermal source aperture on its sampling grid.

    ``diameter`` is the disk diameter or the square side length.
    """

    diameter: float
    grid_size: int
    pitch: float
    shape: str = "square"
    mean_intensity: float = 1.0

    def __post_init__(self):
        if self.shape not in ("disk", "square"):
            raise ValueError(f"source shape must be 'disk' or 'square', got {self.shape!r}")
        if not self.diameter > 0:
            raise ValueError("source diameter must be positive")
        if not self.pitch > 0 or self.grid_size < 1:
            raise ValueError("source grid must have positive pitch and size")
        if self.mean_intensity < 0:
            raise ValueError("mean_intensity must be non-negative")
        if self.diameter > self.grid_size * self.pitch:
            raise ValueError(
                f"source aperture {self.diameter:g} m exceeds the grid extent "
                f"{self.grid_size * self.pitch:g} m"
            )

    def aperture_mask(self):
        n = self.grid_size
        return aperture_mask((n, n), self.pitch, self.shape, self.diameter)


def aperture_mask(shape, pitch, kind, size):
    """Boolean mask of cells whose centres lie inside a centred aperture."""
    if kind not in ("disk", "square"):
        raise ValueError(f"aperture shape must be 'disk' or 'square', got {kind!r}")
    ny, nx = shape
    y = axis_coords(ny, pitch)[:, None]
    x = axis_coords(nx, pitch)[None, :]
    half = size / 2.0
    # edges that pass exactly through a cell centre count as inside
    slack = 1e-9 * pitch
    if kind == "square":
        return (np.abs(x) <= half + slack) & (np.abs(y) <= half + slack)
    return x**2 + y**2 <= (half + slack) ** 2


def _bounding_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def source_cells(spec, seed, randomize=True):
    """Compact source realization: the aperture's bounding block of cells.

    Returns ``(block, rows, cols)`` where ``rows``/``cols`` are the index
    slices of the block inside the full ``grid_size`` grid. Phases are drawn
    once per aperture cell, row-major, from a PCG64 stream keyed on ``seed``.
    """
    mask = spec.aperture_mask()
    box = _bounding_box(mask)
    if box is None:
        raise ValueError("source aperture contains no grid cells")
    rows, cols = box
    inside = mask[rows, cols]
    amplitude = np.sqrt(spec.mean_intensity)
    block = np.zeros(inside.shape, dtype=np.complex128)
    if randomize:
        rng = np.random.Generator(np.random.PCG64(seed))
        phase = 2.0 * np.pi * rng.random(int(inside.sum()))
        block[inside] = amplitude * np.exp(1j * phase)
    else:
        block[inside] = amplitude
    return block, rows, cols


def generate_source_realization(spec, wavelength, seed, randomize=True):
    """Delta-correlated random-phase source field on the full source grid.

    Constant amplitude ``sqrt(mean_intensity)`` inside the aperture, i.i.d.
    uniform phase per cell. ``randomize=False`` zeroes all phases.
    """
    block, rows, cols = source_cells(spec, seed, randomize=randomize)
    data = np.zeros((spec.grid_size, spec.grid_size), dtype=np.complex128)
    data[rows, cols] = block
    return OpticalField(data, spec.pitch, wavelength, "source")


def _transfer_guard(field, distance):
    n = min(field.shape)
    if field.wavelength * distance > n * field.pitch**2 * (1 + 1e-12):
        raise SamplingError(
            f"transfer-function propagation over {distance:g} m needs "
            f"N*pitch^2 >= wavelength*distance ({n}*{field.pitch:g}^2 < "
            f"{field.wavelength:g}*{distance:g}); use the scaled method"
        )


def _scaled_guard(support, in_pitch, wavelength, distance, n):
    # input-chirp Nyquist bound over the occupied extent:
    # N >= support * window_out / (wavelength * distance), window_out = N * in_pitch
    if support * in_pitch > wavelength * distance * (1 + 1e-12):
        raise SamplingError(
            f"scaled propagation over {distance:g} m undersamples the input chirp: "
            f"occupied extent {support:g} m x pitch {in_pitch:g} m exceeds "
            f"wavelength*distance; refine the input grid (N={n})"
        )


def _occupied_extent(data, pitch):
    box = _bounding_box(data != 0)
    if box is None:
        return 0.0
    rows, cols = box
    return max(rows.stop - rows.start, cols.stop - cols.start) * pitch


def _propagate_transfer(field, distance):
    ny, nx = field.shape
    fy = np.fft.fftfreq(ny, d=field.pitch)[:, None]
    fx = np.fft.fftfreq(nx, d=field.pitch)[None, :]
    kernel = np.exp(-1j * np.pi * field.wavelength * distance * (fx**2 + fy**2))
    out = np.fft.ifft2(np.fft.fft2(field.data) * kernel)
    return OpticalField(out, field.pitch, field.wavelength, f"z+{distance:g}")


def _propagate_scaled(field, distance):
    ny, nx = field.shape
    if ny != nx:
        raise ValueError("scaled propagation requires a square grid")
    n = nx
    lam = field.wavelength
    dx = field.pitch
    _scaled_guard(_occupied_extent(field.data, dx), dx, lam, distance, n)
    out_pitch = lam * distance / (n * dx)
    c = (n - 1) / 2.0
    idx = np.arange(n)
    x_in = axis_coords(n, dx)
    x_out = axis_coords(n, out_pitch)
    chirp_in = np.exp(1j * np.pi * x_in**2 / (lam * distance))
    chirp_out = np.exp(1j * np.pi * x_out**2 / (lam * distance))
    # exp(-2j*pi*(i-c)(k-c)/N) split into an FFT and two ramps
    ramp = np.exp(2j * np.pi * c * idx / n)
    const = np.exp(-2j * np.pi * c * c / n)
    pre = chirp_in * ramp
    post = chirp_out * ramp
    g = field.data * pre[:, None] * pre[None, :]
    spec = np.fft.fft2(g)
    out = spec * (const**2) * post[:, None] * post[None, :]
    out *= dx**2 / (1j * lam * distance)
    return OpticalField(out, out_pitch, lam, f"z+{distance:g}")


def fresnel_propagate(field, distance, method="transfer"):
    """Fresnel-diffract ``field`` over ``distance`` metres.

    ``method="transfer"`` keeps the pitch and is exactly unitary;
    ``method="scaled"`` is the single-transform method whose output pitch is
    ``wavelength * distance / (N * pitch)``.
    """
    if distance < 0:
        raise ValueError(f"propagation distance must be >= 0, got {distance}")
    if distance == 0:
        return replace(field, data=field.data.copy())
    if method == "transfer":
        _transfer_guard(field, distance)
        return _propagate_transfer(field, distance)
    if method == "scaled":
        return _propagate_scaled(field, distance)
    raise ValueError(f"unknown propagation method {method!r}")


class WindowedFresnel:
    """Scaled-method propagator restricted to blocks of input and output.

    The input is the non-zero block of an ``n x n`` grid at index ranges
    ``in_rows``/``in_cols``; the output is evaluated only at the integer
    index arrays ``out_rows``/``out_cols`` of the ``n x n`` output grid. The
    result equals ``fresnel_propagate(..., method="scaled")`` on those
    samples. Matrices are built once, so one instance serves many
    realizations; instances are immutable and safe to share across threads.
    """

    def __init__(self, n, in_pitch, wavelength, distance, in_rows, in_cols,
                 out_rows, out_cols, output_chirp=True, input_chirp=True):
        if distance <= 0:
            raise ValueError("windowed propagation needs a positive distance")
        by = in_rows.stop - in_rows.start
        bx = in_cols.stop - in_cols.start
        if input_chirp:
            _scaled_guard(max(by, bx) * in_pitch, in_pitch, wavelength, distance, n)
        lz = wavelength * distance
        self.out_pitch = lz / (n * in_pitch)
        full_in = axis_coords(n, in_pitch)
        full_out = axis_coords(n, self.out_pitch)
        yi, xi = full_in[in_rows], full_in[in_cols]
        yo = full_out[np.asarray(out_rows)]
        xo = full_out[np.asarray(out_cols)]
        scale = in_pitch**2 / (1j * lz)
        left = np.exp(-2j * np.pi * np.outer(yo, yi) / lz)
        right = np.exp(-2j * np.pi * np.outer(xi, xo) / lz)
        if input_chirp:
            left *= np.exp(1j * np.pi * yi**2 / lz)[None, :]
            right *= np.exp(1j * np.pi * xi**2 / lz)[:, None]
        if output_chirp:
            left *= np.exp(1j * np.pi * yo**2 / lz)[:, None]
            right *= np.exp(1j * np.pi * xo**2 / lz)[None, :]
        self._left = left * scale
        self._right = right
        self.in_shape = (by, bx)

    def __call__(self, block):
        return self._left @ block @ self._right


def centered_slice(n, size):
    start = (n - size) // 2
    return slice(start, start + size)


def scaled_fresnel_window(data, in_pitch, wavelength, distance, n, out_rows, out_cols,
                          in_rows=None, in_cols=None):
    """One-shot :class:`WindowedFresnel`; returns ``(values, out_pitch)``.

    ``data`` defaults to sitting at the centre of the ``n x n`` input grid.
    """
    data = np.asarray(data, dtype=np.complex128)
    by, bx = data.shape
    in_rows = centered_slice(n, by) if in_rows is None else in_rows
    in_cols = centered_slice(n, bx) if in_cols is None else in_cols
    prop = WindowedFresnel(n, in_pitch, wavelength, distance, in_rows, in_cols,
                           out_rows, out_cols)
    return prop(data), prop.out_pitch


def apply_thin_lens(field, focal_length):
    """Multiply by the paraxial lens phase ``exp(-j*pi*(x^2+y^2)/(lambda*f))``."""
    if focal_length == 0:
        raise ValueError("focal length must be non-zero")
    y, x = field.coords()
    phase = np.exp(-1j * np.pi * (x[None, :] ** 2 + y[:, None] ** 2)
                   / (field.wavelength * focal_length))
    return replace(field, data=field.data * phase)


def apply_aperture(field, shape, size):
    """Zero the field outside a centred disk (diameter) or square (side)."""
    if not size > 0:
        raise ValueError("aperture size must be positive")
    mask = aperture_mask(field.shape, field.pitch, shape, size)
    return replace(field, data=np.where(mask, field.data, 0))


def apply_transmission(field, mask):
    if mask.shape != field.shape or not np.isclose(mask.pitch, field.pitch, rtol=1e-9, atol=0):
        raise ValueError(
            f"mask grid {mask.shape}@{mask.pitch:g} does not match field grid "
            f"{field.shape}@{field.pitch:g}"
        )
    return replace(field, data=field.data * mask.data)


def intensity_of(field):
    return IntensityGrid(np.abs(field.data) ** 2, field.pitch)
