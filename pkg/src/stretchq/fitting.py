"""Per-direction stretched-exponential fitting and a diffusion tensor baseline.

The stretched fit minimises, independently for every gradient direction,

    0.5 * sum_q [S(q) - S0 * exp(-(b(q) D)**alpha)]**2

over a box ``D_BOUNDS x ALPHA_BOUNDS``. All direction problems of a volume are
solved together by a vectorised projected Levenberg-Marquardt iteration; each
problem keeps its own damping, iteration count and stopping state, so the
result for one direction never depends on which others share its batch.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .acquisition import group_shells
from .exceptions import DataError, RankDeficientError, UnderdeterminedFitError
from .signal_model import ALPHA_BOUNDS, D_BOUNDS, EPS_E, StretchedParams

logger = logging.getLogger(__name__)

D_SCALE = 1e-3  # internal unit for D, keeps both parameters O(1)
FALLBACK_D = 0.7e-3
FALLBACK_ALPHA = 0.8
INIT_ALPHA_RANGE = (0.3, 1.0)
LAMBDA_FLOOR = 1e-6  # mm^2/s, DTI eigenvalue floor
SNAP_TOL = 1e-6  # relative distance within which a converged parameter may snap to its bound
CHUNK = 4096  # direction problems per work item; fixed so results ignore thread count

CONVERGED = 1
D_AT_BOUND = 2
ALPHA_AT_BOUND = 4
DEGRADED_INIT = 8


@dataclass(frozen=True)
class FitOptions:
    d_bounds: tuple = D_BOUNDS
    alpha_bounds: tuple = ALPHA_BOUNDS
    xtol: float = 1e-10
    gtol: float = 1e-8
    max_iter: int = 200
    eps_e: float = EPS_E

    def __post_init__(self):
        lo, hi = self.d_bounds
        if not 0 < lo < hi:
            raise ValueError(f"invalid D bounds {self.d_bounds}")
        lo, hi = self.alpha_bounds
        if not 0 < lo < hi <= 1:
            raise ValueError(f"invalid alpha bounds {self.alpha_bounds}")
        if self.max_iter < 1 or self.xtol <= 0 or self.gtol <= 0:
            raise ValueError("tolerances must be positive and max_iter >= 1")

    def to_dict(self):
        return {
            "d_bounds": list(self.d_bounds),
            "alpha_bounds": list(self.alpha_bounds),
            "xtol": self.xtol,
            "gtol": self.gtol,
            "max_iter": self.max_iter,
            "eps_e": self.eps_e,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("d_bounds", "alpha_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class DirectionFit:
    direction: np.ndarray
    params: StretchedParams
    rss: float
    n_iter: int
    converged: bool
    at_bound: tuple
    degraded_init: bool = False


@dataclass(frozen=True)
class StretchedVoxelFit:
    fits: list
    s0: float
    voxel_index: tuple = (0, 0, 0)

    @property
    def D(self):
        return np.array([f.params.D for f in self.fits])

    @property
    def alpha(self):
        return np.array([f.params.alpha for f in self.fits])

    @property
    def converged(self):
        return np.array([f.converged for f in self.fits])


@dataclass
class StretchedFitVolume:
    """Fitted ``(D, alpha)`` per voxel and direction.

    ``members`` maps every fitted direction to its measurement index on each
    acquisition shell (``shell_b`` lists all shells, -1 when absent), so that
    measured-signal estimators can be evaluated on any shell later.
    """

    directions: np.ndarray  # (K, 3)
    D: np.ndarray  # (X, Y, Z, K)
    alpha: np.ndarray
    rss: np.ndarray
    n_iter: np.ndarray
    flags: np.ndarray
    s0: np.ndarray  # (X, Y, Z)
    mask: np.ndarray
    tau: float
    fit_shells: np.ndarray
    shell_b: np.ndarray
    members: np.ndarray  # (K, n_shells)
    options: FitOptions = field(default_factory=FitOptions)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def converged(self):
        return (self.flags & CONVERGED).astype(bool)

    def voxel(self, index):
        index = tuple(index)
        fits = []
        for k in range(self.directions.shape[0]):
            fl = int(self.flags[index + (k,)])
            fits.append(
                DirectionFit(
                    direction=self.directions[k],
                    params=StretchedParams(float(self.D[index + (k,)]), float(self.alpha[index + (k,)])),
                    rss=float(self.rss[index + (k,)]),
                    n_iter=int(self.n_iter[index + (k,)]),
                    converged=bool(fl & CONVERGED),
                    at_bound=(bool(fl & D_AT_BOUND), bool(fl & ALPHA_AT_BOUND)),
                    degraded_init=bool(fl & DEGRADED_INIT),
                )
            )
        return StretchedVoxelFit(fits, float(self.s0[index]), index)


# ---------------------------------------------------------------------------
# initialisation


def _init_batch(b, E, valid):
    """Log-log slope initialisation; returns (D0, alpha0, degraded)."""
    b_lo_masked = np.where(valid, b, np.inf)
    b_hi_masked = np.where(valid, b, -np.inf)
    lo = np.argmin(b_lo_masked, axis=-1)
    hi = np.argmax(b_hi_masked, axis=-1)
    take = lambda a, i: np.take_along_axis(a, i[..., None], axis=-1)[..., 0]  # noqa: E731
    b_lo, b_hi = take(b, lo), take(b, hi)
    ok = np.any(valid, axis=-1) & (b_hi > b_lo)
    e_lo = np.where(ok, take(E, lo), 0.5)
    e_hi = np.where(ok, take(E, hi), 0.25)
    b_lo = np.where(ok, b_lo, 1.0)
    b_hi = np.where(ok, b_hi, 2.0)
    y_lo = np.log(-np.log(e_lo))
    y_hi = np.log(-np.log(e_hi))
    alpha0 = np.clip((y_hi - y_lo) / (np.log(b_hi) - np.log(b_lo)), *INIT_ALPHA_RANGE)
    d0 = (-np.log(e_lo)) ** (1.0 / alpha0) / b_lo
    alpha0 = np.where(ok, alpha0, FALLBACK_ALPHA)
    d0 = np.where(ok, d0, FALLBACK_D)
    return d0, alpha0, ~ok


def init_stretched(b, S, s0, d_bounds=D_BOUNDS, alpha_bounds=ALPHA_BOUNDS, eps_e=EPS_E):
    """Initial ``(D, alpha)`` from the log-log slope of ``-log(S/s0)`` against b.

    Returns ``(StretchedParams, degraded)``; ``degraded`` is True when fewer
    than two distinct valid b-values exist and the fixed fallback is used.
    """
    b = np.asarray(b, dtype=float)
    E = np.asarray(S, dtype=float) / s0
    valid = (b > 0) & (E >= eps_e) & (E <= 1 - eps_e)
    d0, a0, degraded = _init_batch(b[None], E[None], valid[None])
    d0 = float(np.clip(d0[0], *d_bounds))
    a0 = float(np.clip(a0[0], *alpha_bounds))
    return StretchedParams(d0, a0), bool(degraded[0])


# ---------------------------------------------------------------------------
# batched projected Levenberg-Marquardt


def _model(b, u, alpha):
    z = b * (u[..., None] * D_SCALE)
    logz = np.log(z)
    t = np.exp(alpha[..., None] * logz)
    m = np.exp(-t)
    return m, t, logz


def _cost(b, E, w, u, alpha):
    m, _, _ = _model(b, u, alpha)
    r = (m - E) * w
    return 0.5 * np.einsum("...k,...k->...", r, r)


def _solve_batch(b, E, w, d0, a0, opts):
    """Solve M independent 2-parameter problems; arrays are (M, K)."""
    lo = np.array([opts.d_bounds[0] / D_SCALE, opts.alpha_bounds[0]])
    hi = np.array([opts.d_bounds[1] / D_SCALE, opts.alpha_bounds[1]])
    x = np.clip(np.stack([d0 / D_SCALE, a0], axis=-1), lo, hi)
    M = x.shape[0]
    mu = np.full(M, 1e-3)
    nu = np.full(M, 2.0)
    n_iter = np.zeros(M, dtype=np.int32)
    done = np.zeros(M, dtype=bool)
    converged = np.zeros(M, dtype=bool)

    for _ in range(opts.max_iter + 1):
        m, t, logz = _model(b, x[:, 0], x[:, 1])
        r = (m - E) * w
        cost = 0.5 * np.einsum("mk,mk->m", r, r)
        # d m / d u and d m / d alpha
        J = np.stack([-m * x[:, 1:2] * t / x[:, 0:1], -m * t * logz], axis=-1) * w[..., None]
        g = np.einsum("mki,mk->mi", J, r)
        H = np.einsum("mki,mkj->mij", J, J)

        pg = x - np.clip(x - g, lo, hi)
        grad_ok = np.max(np.abs(pg), axis=1) < opts.gtol
        # First-order optimality marks convergence. Iteration goes on until the
        # step stalls; accepted steps never raise the cost, so this only polishes.
        converged |= grad_ok & ~done
        done |= n_iter >= opts.max_iter
        if done.all():
            break

        # Parameters sitting on a bound with the gradient pushing outward are frozen.
        frozen = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        diag = np.maximum(np.einsum("mii->mi", H), 1e-12)
        A = H + mu[:, None, None] * (diag[:, :, None] * np.eye(2))
        A = np.where(frozen[:, :, None] | frozen[:, None, :], 0.0, A)
        A[:, 0, 0] = np.where(frozen[:, 0], 1.0, A[:, 0, 0])
        A[:, 1, 1] = np.where(frozen[:, 1], 1.0, A[:, 1, 1])
        rhs = np.where(frozen, 0.0, -g)
        det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
        det = np.where(det == 0, 1e-300, det)
        step = np.stack(
            [
                (A[:, 1, 1] * rhs[:, 0] - A[:, 0, 1] * rhs[:, 1]) / det,
                (A[:, 0, 0] * rhs[:, 1] - A[:, 1, 0] * rhs[:, 0]) / det,
            ],
            axis=-1,
        )
        x_new = np.clip(x + step, lo, hi)
        dx = x_new - x
        predicted = -(np.einsum("mi,mi->m", g, dx) + 0.5 * np.einsum("mi,mij,mj->m", dx, H, dx))
        with np.errstate(over="ignore", invalid="ignore"):
            cost_new = _cost(b, E, w, x_new[:, 0], x_new[:, 1])
            rho = (cost - cost_new) / predicted
        accept = (~done) & np.isfinite(cost_new) & (cost_new < cost) & (predicted > 0)

        tiny = np.linalg.norm(dx, axis=1) <= opts.xtol * (opts.xtol + np.linalg.norm(x, axis=1))
        small_step = accept & tiny
        x = np.where(accept[:, None], x_new, x)
        active = ~done
        n_iter += active
        rho_c = np.where(accept, rho, 0.0)
        mu = np.where(accept, mu * np.maximum(1.0 / 3.0, 1.0 - (2.0 * rho_c - 1.0) ** 3), mu * nu)
        nu = np.where(accept, 2.0, nu * 2.0)
        stalled = active & (mu > 1e20)
        converged |= small_step & active
        done |= (tiny & active) | stalled
        mu = np.minimum(mu, 1e20)

    # Snap parameters lying next to a bound onto it when that costs nothing.
    final_cost = _cost(b, E, w, x[:, 0], x[:, 1])
    for i in range(2):
        for bound in (lo[i], hi[i]):
            near = np.abs(x[:, i] - bound) <= SNAP_TOL * abs(bound)
            if near.any():
                xs = x.copy()
                xs[near, i] = bound
                c = _cost(b, E, w, xs[:, 0], xs[:, 1])
                # allow rounding-level cost differences (attenuations carry ~1e-16 error)
                take = near & (c <= final_cost * (1 + 1e-10) + 1e-30 * b.shape[1])
                x = np.where(take[:, None], xs, x)
                final_cost = np.where(take, c, final_cost)
    return x[:, 0] * D_SCALE, x[:, 1], final_cost, n_iter, converged


def _fit_problems(b, S, s0, opts, init=None):
    """Fit problems given as (M, K) b-values and signals with per-problem s0.

    ``init`` optionally overrides the starting point with (M,) arrays (D, alpha).
    Returns a dict of (M,) arrays: D, alpha, rss, n_iter, flags.
    """
    E = S / s0[:, None]
    valid = (b > 0) & np.isfinite(E) & (E >= opts.eps_e) & (E <= 1 - opts.eps_e)
    n_distinct = np.array(
        [np.unique(bb[vv]).size for bb, vv in zip(b, valid)], dtype=int
    ) if b.shape[0] else np.zeros(0, dtype=int)
    solvable = n_distinct >= 2
    w = valid.astype(float)
    b_safe = np.where(valid, b, 1.0)
    E_safe = np.where(valid, E, 0.5)
    d0, a0, degraded = _init_batch(b_safe, E_safe, valid)
    if init is not None:
        d0, a0 = (np.broadcast_to(np.asarray(v, dtype=float), d0.shape) for v in init)
        degraded = np.zeros_like(degraded)
    d0 = np.clip(d0, *opts.d_bounds)
    a0 = np.clip(a0, *opts.alpha_bounds)
    D, alpha, cost, n_iter, conv = _solve_batch(b_safe, E_safe, w, d0, a0, opts)
    D = np.where(solvable, D, d0)
    alpha = np.where(solvable, alpha, a0)
    conv &= solvable
    n_iter = np.where(solvable, n_iter, 0)
    rss = np.where(solvable, 2.0 * cost * s0**2, np.nan)
    flags = (
        conv * CONVERGED
        + ((D <= opts.d_bounds[0]) | (D >= opts.d_bounds[1])) * D_AT_BOUND
        + ((alpha <= opts.alpha_bounds[0]) | (alpha >= opts.alpha_bounds[1])) * ALPHA_AT_BOUND
        + degraded * DEGRADED_INIT
    ).astype(np.uint8)
    return {"D": D, "alpha": alpha, "rss": rss, "n_iter": n_iter.astype(np.int32), "flags": flags}


def _fit_chunked(b, S, s0, opts, threads=1):
    M = b.shape[0]
    bounds = [(i, min(i + CHUNK, M)) for i in range(0, M, CHUNK)]
    work = lambda ij: _fit_problems(b[ij[0]:ij[1]], S[ij[0]:ij[1]], s0[ij[0]:ij[1]], opts)  # noqa: E731
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(ij) for ij in bounds]
    keys = ("D", "alpha", "rss", "n_iter", "flags")
    if not parts:
        return {k: np.zeros(0) for k in keys}
    return {k: np.concatenate([p[k] for p in parts]) for k in keys}


def fit_stretched_direction(b, S, s0, options=None, direction=(0.0, 0.0, 1.0), init=None):
    """Fit ``(D, alpha)`` to the samples of one gradient direction.

    Parameters
    ----------
    b, S : array_like
        b-values [s/mm^2] and signals of the samples along the direction.
    s0 : float
        Non-diffusion-weighted baseline signal.
    options : FitOptions, optional
    init : StretchedParams, optional
        Starting point; the log-log slope initialisation by default.

    Returns
    -------
    DirectionFit
    """
    opts = options or FitOptions()
    b = np.asarray(b, dtype=float).reshape(-1)
    S = np.asarray(S, dtype=float).reshape(-1)
    if b.shape != S.shape:
        raise DataError(f"{b.size} b-values but {S.size} signals")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(b))):
        raise DataError("non-finite signal or b-value")
    if not s0 > 0:
        raise DataError(f"baseline signal must be positive, got {s0}")
    E = S / s0
    valid = (b > 0) & (E >= opts.eps_e) & (E <= 1 - opts.eps_e)
    if np.unique(b[valid]).size < 2:
        raise UnderdeterminedFitError(
            "need at least 2 samples at distinct b > 0 with attenuation inside the clamp window"
        )
    start = None if init is None else (init.D, init.alpha)
    res = _fit_problems(b[None], S[None], np.array([float(s0)]), opts, start)
    fl = int(res["flags"][0])
    return DirectionFit(
        direction=np.asarray(direction, dtype=float),
        params=StretchedParams(float(res["D"][0]), float(res["alpha"][0])),
        rss=float(res["rss"][0]),
        n_iter=int(res["n_iter"][0]),
        converged=bool(fl & CONVERGED),
        at_bound=(bool(fl & D_AT_BOUND), bool(fl & ALPHA_AT_BOUND)),
        degraded_init=bool(fl & DEGRADED_INIT),
    )


def _shell_columns(bundles, shell_subset, b_tolerance):
    centers = bundles.shell_b_centers
    if shell_subset is None:
        return np.arange(centers.size)
    cols = []
    for sb in shell_subset:
        k = int(np.argmin(np.abs(centers - sb)))
        if abs(centers[k] - sb) > b_tolerance:
            raise DataError(
                f"shell b = {sb:g} not in acquisition (shells: "
                + ", ".join(f"{c:g}" for c in centers) + ")"
            )
        cols.append(k)
    return np.unique(cols)


def baseline_signal(data, scheme, b_tolerance=25.0):
    """Mean of the b0 measurements along the last axis."""
    b0 = np.flatnonzero(scheme.bvals <= b_tolerance)
    if b0.size == 0:
        raise DataError("no b = 0 measurement; supply the baseline signal explicitly")
    return np.mean(np.asarray(data, dtype=float)[..., b0], axis=-1)


def fit_stretched_volume(data, scheme, bundles, mask=None, shell_subset=None, options=None,
                         threads=1, s0=None, b_tolerance=25.0):
    """Fit every complete direction bundle in every masked voxel.

    Parameters
    ----------
    data : ndarray, shape (X, Y, Z, N)
        Diffusion-weighted signals.
    scheme : GradientScheme
    bundles : DirectionBundleSet
        Direction bundles over all acquisition shells.
    mask : ndarray of bool, shape (X, Y, Z), optional
    shell_subset : sequence of float, optional
        b-values of the shells entering the fit; all shells by default.
    options : FitOptions, optional
    threads : int
        Worker threads; the output is identical for any value.
    s0 : ndarray, optional
        Baseline signal per voxel, defaults to the mean of the b0 volumes.

    Returns
    -------
    StretchedFitVolume
    """
    opts = options or FitOptions()
    data = np.asarray(data, dtype=float)
    if data.ndim != 4:
        raise DataError(f"expected a 4-D volume, got shape {data.shape}")
    if data.shape[-1] != scheme.n_measurements:
        raise DataError(
            f"volume has {data.shape[-1]} measurements but gradient table has {scheme.n_measurements}"
        )
    spatial = data.shape[:3]
    mask = np.ones(spatial, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != spatial:
        raise DataError(f"mask shape {mask.shape} does not match volume {spatial}")
    if s0 is None:
        s0 = baseline_signal(data, scheme, b_tolerance)
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), spatial).copy()
    bad = mask & ~(np.isfinite(s0) & (s0 > 0))
    if bad.any():
        logger.warning("%d masked voxel(s) with non-positive baseline excluded", int(bad.sum()))
        mask = mask & ~bad

    cols = _shell_columns(bundles, shell_subset, b_tolerance)
    if cols.size < 2:
        raise UnderdeterminedFitError("stretched fitting needs at least two shells")
    keep = np.all(bundles.members[:, cols] >= 0, axis=1)
    if not keep.any():
        raise UnderdeterminedFitError("no direction is present on every selected shell")
    members = bundles.members[keep]
    idx = members[:, cols]  # (K, n_sh)
    K = idx.shape[0]

    vox = np.argwhere(mask)
    S = data[mask][:, idx].reshape(-1, idx.shape[1])  # (V*K, n_sh)
    b = np.broadcast_to(scheme.bvals[idx], (vox.shape[0], K, idx.shape[1])).reshape(-1, idx.shape[1])
    s0_rep = np.repeat(s0[mask], K)
    if not np.all(np.isfinite(S)):
        raise DataError("non-finite signal inside the mask")
    res = _fit_chunked(np.ascontiguousarray(b), S, s0_rep, opts, threads)

    out = {}
    for key, fill, dtype in (("D", np.nan, float), ("alpha", np.nan, float), ("rss", np.nan, float),
                             ("n_iter", 0, np.int32), ("flags", 0, np.uint8)):
        arr = np.full(spatial + (K,), fill, dtype=dtype)
        arr[mask] = res[key].reshape(-1, K)
        out[key] = arr
    return StretchedFitVolume(
        directions=bundles.canonical[keep].copy(),
        s0=np.where(mask, s0, np.nan),
        mask=mask,
        tau=scheme.tau,
        fit_shells=bundles.shell_b_centers[cols].copy(),
        shell_b=bundles.shell_b_centers.copy(),
        members=members.copy(),
        options=opts,
        **out,
    )


def fit_stretched_voxel(voxel_signals, scheme, bundles, shell_subset=None, options=None,
                        s0=None, voxel_index=(0, 0, 0), b_tolerance=25.0):
    """Fit all complete direction bundles of a single voxel."""
    sig = np.asarray(voxel_signals, dtype=float).reshape(-1)
    if s0 is None:
        s0 = float(baseline_signal(sig, scheme, b_tolerance))
    if not s0 > 0:
        raise DataError(f"baseline signal must be positive, got {s0}")
    vol = fit_stretched_volume(sig[None, None, None, :], scheme, bundles, shell_subset=shell_subset,
                               options=options, s0=s0, b_tolerance=b_tolerance)
    fit = vol.voxel((0, 0, 0))
    return StretchedVoxelFit(fit.fits, fit.s0, tuple(voxel_index))


# ---------------------------------------------------------------------------
# diffusion tensor


@dataclass(frozen=True)
class TensorFit:
    components: np.ndarray  # Dxx, Dyy, Dzz, Dxy, Dxz, Dyz
    eigenvalues: np.ndarray  # descending
    converged: bool
    s0: float = 1.0

    @property
    def tensor(self):
        return components_to_tensor(self.components)


def components_to_tensor(c):
    c = np.asarray(c, dtype=float)
    T = np.empty(c.shape[:-1] + (3, 3))
    T[..., 0, 0], T[..., 1, 1], T[..., 2, 2] = c[..., 0], c[..., 1], c[..., 2]
    T[..., 0, 1] = T[..., 1, 0] = c[..., 3]
    T[..., 0, 2] = T[..., 2, 0] = c[..., 4]
    T[..., 1, 2] = T[..., 2, 1] = c[..., 5]
    return T


def dti_design_matrix(bvals, bvecs):
    g = np.asarray(bvecs, dtype=float)
    b = np.asarray(bvals, dtype=float)
    return np.column_stack([
        np.ones_like(b),
        -b * g[:, 0] ** 2, -b * g[:, 1] ** 2, -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1], -2 * b * g[:, 0] * g[:, 2], -2 * b * g[:, 1] * g[:, 2],
    ])


def _dti_selection(scheme, b_subset, b_tolerance):
    grouping = group_shells(scheme, b_tolerance)
    sel = [grouping.b0_indices]
    if b_subset is None:
        sel.extend(grouping.shell_members)
    else:
        for sb in b_subset:
            sel.append(grouping.shell_members[grouping.shell_index(sb)])
    if grouping.b0_indices.size == 0:
        raise DataError("tensor fit needs a b = 0 measurement")
    return np.concatenate(sel)


def _dti_wls(X, S):
    """Weighted log-linear fit for a batch of voxels; S is (V, N)."""
    y = np.log(np.maximum(S, 1e-12))
    beta, *_ = np.linalg.lstsq(X, y.T, rcond=None)
    w = np.exp(X @ beta).T ** 2  # (V, N)
    XtWX = np.einsum("ni,vn,nj->vij", X, w, X)
    XtWy = np.einsum("ni,vn,vn->vi", X, w, y)
    return np.linalg.solve(XtWX, XtWy[..., None])[..., 0]


def _dti_refine(X, S, beta, opts):
    """Levenberg-Marquardt refinement on S = s0 exp(-b g'Dg) for one voxel."""
    A = -X[:, 1:]  # rows b g_i g_j (off-diagonals doubled)
    x0 = np.concatenate([[np.exp(beta[0])], beta[1:] / D_SCALE])
    scale = max(abs(x0[0]), 1e-12)

    def resid(p):
        return (p[0] * scale * np.exp(-A @ (p[1:] * D_SCALE)) - S) / scale

    def jac(p):
        e = np.exp(-A @ (p[1:] * D_SCALE))
        J = np.empty((S.size, 7))
        J[:, 0] = e
        J[:, 1:] = -(p[0] * e)[:, None] * A * D_SCALE
        return J

    p0 = np.concatenate([[1.0], x0[1:]])
    res = least_squares(resid, p0, jac=jac, method="lm", xtol=opts.xtol, gtol=opts.gtol,
                        ftol=1e-15, max_nfev=opts.max_iter * 8)
    return res.x[0] * scale, res.x[1:] * D_SCALE, res.status > 0


def _eigen(components):
    ev = np.linalg.eigvalsh(components_to_tensor(components))[..., ::-1]
    return np.maximum(ev, LAMBDA_FLOOR)


def fit_dti(voxel_signals, scheme, b_subset=None, refine=True, options=None, b_tolerance=25.0):
    """Diffusion tensor of one voxel.

    Weighted log-linear least squares, optionally refined by Levenberg-Marquardt
    on the exponential model. Eigenvalues are sorted descending and floored at
    ``LAMBDA_FLOOR``.
    """
    opts = options or FitOptions()
    S = np.asarray(voxel_signals, dtype=float).reshape(-1)
    if S.size != scheme.n_measurements:
        raise DataError(f"{S.size} signals but gradient table has {scheme.n_measurements}")
    sel = _dti_selection(scheme, b_subset, b_tolerance)
    X = dti_design_matrix(scheme.bvals[sel], scheme.directions[sel])
    if np.linalg.matrix_rank(X) < 7:
        raise RankDeficientError("tensor fit needs at least 6 non-collinear directions plus a baseline")
    beta = _dti_wls(X, S[sel][None])[0]
    s0, comps, conv = float(np.exp(beta[0])), beta[1:], True
    if refine:
        s0, comps, conv = _dti_refine(X, S[sel], beta, opts)
    return TensorFit(np.asarray(comps), _eigen(comps), bool(conv), s0)


def fit_dti_volume(data, scheme, b_subset=None, mask=None, refine=True, options=None, b_tolerance=25.0):
    """Tensor fit over a 4-D volume; returns (components, eigenvalues, converged)."""
    opts = options or FitOptions()
    data = np.asarray(data, dtype=float)
    spatial = data.shape[:3]
    mask = np.ones(spatial, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sel = _dti_selection(scheme, b_subset, b_tolerance)
    X = dti_design_matrix(scheme.bvals[sel], scheme.directions[sel])
    if np.linalg.matrix_rank(X) < 7:
        raise RankDeficientError("tensor fit needs at least 6 non-collinear directions plus a baseline")
    S = data[mask][:, sel]
    beta = _dti_wls(X, S)
    comps = beta[:, 1:].copy()
    conv = np.ones(S.shape[0], dtype=bool)
    if refine:
        for v in range(S.shape[0]):
            _, comps[v], conv[v] = _dti_refine(X, S[v], beta[v], opts)
    out_c = np.full(spatial + (6,), np.nan)
    out_e = np.full(spatial + (3,), np.nan)
    out_ok = np.zeros(spatial, dtype=bool)
    out_c[mask] = comps
    out_e[mask] = _eigen(comps)
    out_ok[mask] = conv
    return out_c, out_e, out_ok
