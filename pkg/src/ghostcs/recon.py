"""Ghost-image reconstruction: intensity correlation and l1 recovery."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import OptimizeResult
from threadpoolctl import threadpool_limits

from .optics import IntensityGrid

log = logging.getLogger(__name__)

__all__ = [
    "ROI",
    "SensingSystem",
    "ReconResult",
    "SolverParams",
    "DegenerateInputWarning",
    "centered_roi",
    "gi_covariance",
    "gi_reconstruct",
    "assemble_sensing_system",
    "normalize_system",
    "lasso_fista",
    "kkt_residual",
    "cs_reconstruct",
    "bp_oracle_enumerate",
]


_GI_CHUNK = 256
# relative objective slack treated as rounding noise in FISTA restarts
_ROUNDING = 1e-14


class DegenerateInputWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ROI:
    """Rectangular block of reference-frame pixels."""

    row0: int
    col0: int
    nrows: int
    ncols: int
    pitch: float

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def size(self):
        return self.nrows * self.ncols

    def slices(self):
        return (slice(self.row0, self.row0 + self.nrows),
                slice(self.col0, self.col0 + self.ncols))

    def positions(self):
        """(row, col) frame index of every column of the sensing matrix."""
        rr, cc = np.meshgrid(np.arange(self.row0, self.row0 + self.nrows),
                             np.arange(self.col0, self.col0 + self.ncols), indexing="ij")
        return np.column_stack([rr.ravel(), cc.ravel()])


def centered_roi(frame_shape, pitch, size):
    """ROI centred on the frame; ``size`` is a pixel count or ``(rows, cols)``.

    Odd/even parity is adjusted to the frame's so the ROI stays centred.
    """
    if np.isscalar(size):
        size = (int(size), int(size))
    dims = []
    for n, s in zip(frame_shape, size):
        s = min(int(s), n)
        if (n - s) % 2:
            s += 1 if s < n else -1
        dims.append(s)
    (ny, nx), (sy, sx) = frame_shape, dims
    return ROI((ny - sy) // 2, (nx - sx) // 2, sy, sx, pitch)


@dataclass
class SensingSystem:
    """``y = A x`` with ``A`` rows = flattened ROI crops of the reference frames.

    ``row_scale``/``col_scale`` record normalization: the original system is
    ``A0 = diag(row_scale) @ A @ diag(col_scale)``, ``y0 = row_scale * y``,
    and a solution ``x`` of the scaled system maps back as ``x / col_scale``.
    """

    A: np.ndarray
    y: np.ndarray
    roi: ROI
    row_scale: np.ndarray = None
    col_scale: np.ndarray = None
    mode: str = "none"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        m, n = self.A.shape
        if self.y.shape != (m,):
            raise ValueError(f"y has shape {self.y.shape}, expected ({m},)")
        if n != self.roi.size:
            raise ValueError(f"A has {n} columns but the ROI holds {self.roi.size} pixels")
        if self.row_scale is None:
            self.row_scale = np.ones(m)
        if self.col_scale is None:
            self.col_scale = np.ones(n)

    @property
    def shape(self):
        return self.A.shape

    def unscale_solution(self, x):
        return np.asarray(x) / self.col_scale

    def original(self):
        A = self.row_scale[:, None] * self.A * self.col_scale[None, :]
        return SensingSystem(A, self.row_scale * self.y, self.roi)


@dataclass
class ReconResult:
    """Reconstruction output; ``estimate`` may hold signed values (GI)."""

    estimate: np.ndarray
    pitch: float
    iterations: int = 0
    final_residual: float = float("nan")
    objective_trace: list = field(default_factory=list)
    solver_status: str = "converged"
    roi: ROI | None = None
    info: dict = field(default_factory=dict)

    def to_grid(self):
        """Export view: negatives clamped to 0."""
        return IntensityGrid(np.clip(self.estimate, 0, None), self.pitch)


def gi_covariance(frames, buckets):
    """Pixelwise ``<I B> - <I><B>`` over the record axis (axis 0)."""
    frames = np.asarray(frames, dtype=np.float64)
    b = np.asarray(buckets, dtype=np.float64)
    if frames.shape[0] != b.shape[0]:
        raise ValueError("frames and buckets disagree on the number of records")
    m = b.shape[0]
    flat = frames.reshape(m, -1)
    # centred buckets: same estimator, less cancellation
    cov = (b - b.mean()) @ flat / m
    return cov.reshape(frames.shape[1:])


def gi_reconstruct(measurements):
    """Second-order correlation image, max-normalized, signed."""
    m = len(measurements)
    if m < 2:
        raise ValueError("GI reconstruction needs at least 2 records")
    b = measurements.buckets()
    # exact zeros for constant buckets (b - mean can leave rounding residue)
    bc = b - b.mean() if np.ptp(b) > 0 else np.zeros_like(b)
    shape = measurements.records[0].reference_frame.shape
    cov = np.zeros(int(np.prod(shape)))
    # chunked so the frames are never stacked all at once
    for start in range(0, m, _GI_CHUNK):
        recs = measurements.records[start:start + _GI_CHUNK]
        block = np.stack([r.reference_frame.data.ravel() for r in recs])
        cov += bc[start:start + len(recs)] @ block
    cov = (cov / m).reshape(shape)
    status = "converged"
    peak = cov.max()
    if not peak > 0:
        warnings.warn("bucket values carry no correlation (constant or degenerate); "
                      "GI estimate is zero", DegenerateInputWarning, stacklevel=2)
        status = "degenerate"
        est = np.zeros_like(cov)
    else:
        est = cov / peak
    return ReconResult(est, measurements.frame_pitch, iterations=1, solver_status=status,
                       info={"covariance_peak": float(peak) if peak > 0 else 0.0, "m": m})


def assemble_sensing_system(measurements, roi):
    """Stack flattened ROI crops (row-major) of every frame into ``A``."""
    if roi.nrows < 1 or roi.ncols < 1:
        raise ValueError("ROI is empty")
    frames = measurements.frames()
    _, ny, nx = frames.shape
    if roi.row0 < 0 or roi.col0 < 0 or roi.row0 + roi.nrows > ny or roi.col0 + roi.ncols > nx:
        raise ValueError(f"ROI {roi} exceeds the {ny}x{nx} frame")
    if not np.isclose(roi.pitch, measurements.frame_pitch, rtol=1e-9, atol=0):
        raise ValueError("ROI pitch differs from the frame pitch")
    rs, cs = roi.slices()
    A = frames[:, rs, cs].reshape(len(measurements), -1)
    return SensingSystem(A, measurements.buckets(), roi)


def normalize_system(system, mode="none"):
    """Rescale rows (``row_mean``) or columns (``column_unit``) of ``A``."""
    base = system.original() if system.mode != "none" else system
    A, y = base.A, base.y
    m, n = A.shape
    if mode == "none":
        return SensingSystem(A.copy(), y.copy(), base.roi)
    if mode == "row_mean":
        r = A.mean(axis=1)
        if np.any(r == 0):
            raise ValueError("row_mean normalization: a row of A is all zero")
        return SensingSystem(A / r[:, None], y / r, base.roi, row_scale=r, col_scale=np.ones(n),
                             mode=mode)
    if mode == "column_unit":
        c = np.linalg.norm(A, axis=0)
        if np.any(c == 0):
            raise ValueError("column_unit normalization: a column of A is all zero")
        return SensingSystem(A / c[None, :], y.copy(), base.roi, row_scale=np.ones(m),
                             col_scale=c, mode=mode)
    raise ValueError(f"unknown normalization mode {mode!r}")


def _lipschitz(A, n_iter=100):
    # power iteration on A^T A from a fixed start vector
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    est = 0.0
    for _ in range(n_iter):
        w = A.T @ (A @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(norm - est) <= 1e-10 * norm:
            est = norm
            break
        est = norm
    return est * 1.01


def _prox(v, thresh, nonneg):
    if nonneg:
        return np.maximum(v - thresh, 0.0)
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def kkt_residual(A, y, x, lam, nonneg=False):
    """Largest violation of the lasso subgradient optimality condition."""
    g = A.T @ (A @ x - y)
    if nonneg:
        viol = np.where(x > 0, np.abs(g + lam), np.maximum(-(g + lam), 0.0))
    else:
        viol = np.where(x != 0, np.abs(g + lam * np.sign(x)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


def lasso_fista(A, y, lam, nonneg=False, tol=1e-9, max_iter=5000, x0=None, lipschitz=None,
                obj_rtol=None):
    """FISTA for ``0.5 ||Ax - y||^2 + lam ||x||_1`` (optionally ``x >= 0``).

    Stops when the KKT residual is at most ``tol * ||A^T y||_inf`` (or, if
    ``obj_rtol`` is given, when the relative objective change between
    iterations drops below it). Momentum restarts whenever the objective
    would increase, so accepted iterates never go uphill.

    Returns a :class:`scipy.optimize.OptimizeResult` with ``x``, ``nit``,
    ``status`` ("converged" | "max_iters"), ``kkt``, ``fun``,
    ``objective_trace`` and ``restart_objectives``.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n = A.shape[1]
    Aty = A.T @ y
    scale = float(np.abs(Aty).max()) or 1.0
    L = _lipschitz(A) if lipschitz is None else lipschitz
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if nonneg:
        x = np.maximum(x, 0.0)

    def objective(v, r):
        return 0.5 * float(r @ r) + lam * float(np.abs(v).sum())

    if L == 0:
        return OptimizeResult(x=np.zeros(n), nit=0, status="converged", kkt=0.0,
                              fun=0.5 * float(y @ y), objective_trace=[], restart_objectives=[])
    r = A @ x - y
    fx = objective(x, r)
    z, t = x.copy(), 1.0
    trace, restarts = [fx], [fx]
    status, it = "max_iters", 0
    for it in range(1, max_iter + 1):
        grad = A.T @ (A @ z - y)
        x_new = _prox(z - grad / L, lam / L, nonneg)
        r_new = A @ x_new - y
        f_new = objective(x_new, r_new)
        if f_new > fx + _ROUNDING * abs(fx):
            # restart: drop momentum and retry from the last accepted point;
            # rises within rounding are accepted, else progress stalls once
            # the per-step gain falls below the objective's last digits
            z, t = x.copy(), 1.0
            restarts.append(fx)
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = x_new + ((t - 1.0) / t_new) * (x_new - x)
        rel = abs(fx - f_new) / max(abs(fx), np.finfo(float).tiny)
        x, fx, t = x_new, f_new, t_new
        trace.append(fx)
        if obj_rtol is not None and rel < obj_rtol:
            status = "converged"
            break
        if it % 10 == 0 or it == max_iter:
            if kkt_residual(A, y, x, lam, nonneg) <= tol * scale:
                status = "converged"
                break
    kkt = kkt_residual(A, y, x, lam, nonneg)
    if status != "converged" and kkt <= tol * scale:
        status = "converged"
    return OptimizeResult(x=x, nit=it, status=status, kkt=kkt, fun=fx,
                          objective_trace=trace, restart_objectives=restarts)


@dataclass(frozen=True)
class SolverParams:
    """Settings for :func:`cs_reconstruct`.

    ``epsilon`` is the residual bound ``||Ax - y||_2 <= epsilon``; when None
    it defaults to ``epsilon_rel * ||y||_2``. ``epsilon = 0`` asks for
    equality-constrained basis pursuit (continuation down to the smallest
    ``lam``).
    """

    epsilon: float | None = None
    epsilon_rel: float = 0.02
    nonneg: bool = True
    lambda_ratio: float = 1e-6
    n_stages: int = 30
    max_iter: int = 5000
    tol: float = 1e-9
    stage_tol: float = 1e-4
    obj_rtol: float = 1e-8
    refine_steps: int = 12
    normalize: str = "none"

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.epsilon_rel < 0:
            raise ValueError("epsilon_rel must be >= 0")
        if self.max_iter < 1 or self.n_stages < 1:
            raise ValueError("max_iter and n_stages must be >= 1")
        if not 0 < self.lambda_ratio < 1:
            raise ValueError("lambda_ratio must lie in (0, 1)")


def _solve_bpdn(A, y, params):
    eps = params.epsilon if params.epsilon is not None else params.epsilon_rel * float(np.linalg.norm(y))
    Aty = A.T @ y
    lam0 = 0.5 * float(np.abs(Aty).max())
    n = A.shape[1]
    if lam0 == 0:
        return np.zeros(n), dict(status="converged", nit=0, trace=[], lam=0.0, eps=eps, kkt=0.0)
    L = _lipschitz(A)
    lams = lam0 * params.lambda_ratio ** (np.arange(params.n_stages + 1) / params.n_stages)
    x = np.zeros(n)
    trace, nit = [], 0
    prev = None  # (lam, x) of the last stage whose residual exceeded eps
    last_res = None
    status = None
    sol = None
    for k, lam in enumerate(lams):
        final = k == len(lams) - 1
        sol = lasso_fista(A, y, lam, nonneg=params.nonneg, x0=x, lipschitz=L,
                          tol=params.tol if final else params.stage_tol * lam / lam0,
                          max_iter=params.max_iter, obj_rtol=params.obj_rtol)
        x, nit = sol.x, nit + sol.nit
        trace.extend(sol.objective_trace)
        res = float(np.linalg.norm(A @ x - y))
        log.debug("stage %d lam=%.3e res=%.3e kkt=%.2e nit=%d", k, lam, res, sol.kkt, sol.nit)
        if eps > 0 and res <= eps:
            if prev is not None and params.refine_steps:
                x, sol, lam, extra = _refine(A, y, params, L, prev, (lam, x), eps, trace)
                nit += extra
            status = "converged" if sol.status == "converged" else "max_iters"
            break
        if eps > 0 and last_res is not None and res > eps and abs(last_res - res) <= 1e-4 * res \
                and k >= 3:
            status = "infeasible"
            break
        last_res = res
        prev = (lam, x)
    if status is None:
        if eps > 0:
            status = "infeasible"
        else:
            status = "converged" if sol.status == "converged" else "max_iters"
            x = _polish(A, y, x, params.nonneg)
    return x, dict(status=status, nit=nit, trace=trace, lam=float(lam), eps=eps, kkt=sol.kkt)


def _polish(A, y, x, nonneg):
    # equality-constrained BP: the continuation end point carries a bias of
    # order lam_min (and crumbs of that size off the support); refit on the
    # support at increasing relative thresholds and keep the first refit that
    # respects the sign pattern and fits better
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak == 0:
        return x
    best = float(np.linalg.norm(A @ x - y))
    for tau in (0.0, 1e-8, 1e-6, 1e-4):
        support = np.flatnonzero(np.abs(x) > tau * peak)
        if support.size == 0 or support.size > A.shape[0]:
            continue
        coef, *_ = np.linalg.lstsq(A[:, support], y, rcond=None)
        if nonneg:
            # entries the refit drives to zero may land a rounding error below it
            if np.any(coef < -1e-9 * np.abs(coef).max()):
                continue
            coef = np.maximum(coef, 0.0)
        elif np.any(np.sign(coef) != np.sign(x[support])):
            continue
        cand = np.zeros_like(x)
        cand[support] = coef
        if np.linalg.norm(A @ cand - y) < best:
            return cand
    return x


def _refine(A, y, params, L, above, below, eps, trace):
    # bisect log(lam) between a stage with residual > eps and one with <= eps,
    # keeping the feasible end; the BPDN solution is the lasso path point
    # whose residual equals eps
    (lam_hi, x_hi), (lam_lo, x_lo) = above, below
    best = None
    nit = 0
    for _ in range(params.refine_steps):
        lam = np.sqrt(lam_hi * lam_lo)
        sol = lasso_fista(A, y, lam, nonneg=params.nonneg, x0=x_lo, lipschitz=L,
                          tol=params.tol, max_iter=params.max_iter, obj_rtol=params.obj_rtol)
        nit += sol.nit
        trace.extend(sol.objective_trace)
        res = float(np.linalg.norm(A @ sol.x - y))
        if res <= eps:
            lam_lo, x_lo, best = lam, sol.x, sol
        else:
            lam_hi, x_hi = lam, sol.x
    if best is None:
        best = lasso_fista(A, y, lam_lo, nonneg=params.nonneg, x0=x_lo, lipschitz=L,
                           tol=params.tol, max_iter=params.max_iter, obj_rtol=params.obj_rtol)
        nit += best.nit
        x_lo = best.x
    return x_lo, best, lam_lo, nit


def cs_reconstruct(system, params=None):
    """Nonnegative basis-pursuit denoising ``min ||x||_1 s.t. ||Ax - y|| <= eps``.

    Solved along a geometric lasso continuation (``lam`` from
    ``0.5 ||A^T y||_inf`` down by ``lambda_ratio``), stopping at the first
    ``lam`` whose residual meets ``eps`` and bisecting to the boundary.
    """
    params = params or SolverParams()
    A0, y0 = system.A, system.y
    if not (np.all(np.isfinite(A0)) and np.all(np.isfinite(y0))):
        raise ValueError("sensing system contains non-finite entries")
    scaled = normalize_system(system, params.normalize) if params.normalize != "none" else system
    A, y = scaled.A, scaled.y
    # global rescale so the solver works near unit magnitudes
    a_scale = float(np.abs(A).max()) or 1.0
    y_scale = float(np.abs(y).max()) or 1.0
    p = params
    if p.epsilon is not None:
        p = replace(p, epsilon=p.epsilon / y_scale)
    with threadpool_limits(limits=1, user_api="blas"):
        x, info = _solve_bpdn(A / a_scale, y / y_scale, p)
    x = x * (y_scale / a_scale)
    x = scaled.unscale_solution(x)
    residual = float(np.linalg.norm(A0 @ x - y0))
    if info["status"] != "converged":
        log.warning("cs_reconstruct finished with status %s", info["status"])
    return ReconResult(
        estimate=x.reshape(system.roi.shape),
        pitch=system.roi.pitch,
        iterations=info["nit"],
        final_residual=residual,
        objective_trace=info["trace"],
        solver_status=info["status"],
        roi=system.roi,
        info={"lambda": info["lam"] * a_scale * y_scale, "epsilon": info["eps"] * y_scale,
              "kkt": info["kkt"]},
    )


def bp_oracle_enumerate(A, y, k_max, nonneg=False, rtol=1e-9):
    """Minimum-l1 feasible point over all supports of size <= ``k_max``.

    Test oracle: exhaustive least squares over supports, so restricted to
    ``n <= 60`` and ``k_max <= 4``. Returns the zero vector if ``y == 0``;
    raises if no support reproduces ``y``.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = A.shape
    if n > 60 or k_max > 4:
        raise ValueError(f"enumeration guard: need n <= 60 and k_max <= 4 (got n={n}, k_max={k_max})")
    ynorm = float(np.linalg.norm(y))
    best, best_l1 = np.zeros(n), np.inf
    if ynorm == 0:
        return best
    for k in range(1, min(k_max, n) + 1):
        for support in itertools.combinations(range(n), k):
            cols = A[:, support]
            coef, *_ = np.linalg.lstsq(cols, y, rcond=None)
            if np.linalg.norm(cols @ coef - y) > rtol * ynorm:
                continue
            if nonneg and np.any(coef < -rtol * np.abs(coef).max()):
                continue
            l1 = float(np.abs(coef).sum())
            if l1 < best_l1 - 1e-12 * l1:
                best_l1 = l1
                best = np.zeros(n)
                best[list(support)] = coef
    if not np.isfinite(best_l1):
        raise ValueError(f"no support of size <= {k_max} reproduces y")
    return best
