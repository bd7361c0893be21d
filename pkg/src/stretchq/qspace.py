"""Q-space moments M_n = int ||q||^n E(q) d^3q of the stretched representation.

RTOP, QMSD and QMFD are M_0, M_2 and M_4. Three routes are provided:

* ``moment_direct``: per-direction closed-form radial integrals evaluated from
  one shell's attenuations and the fitted stretching exponents;
* ``moment_expansion``: a second-order series approximation of the same
  direction average, built from shell means of ``-log E`` and ``alpha``;
* ``moment_analytic``: the surface integral of the radial closed form for
  given ``D(g)`` and ``alpha(g)`` fields under a spherical quadrature rule.

Direction averages over a shell stand for (1/4pi) times the integral over
the unit sphere, so both shell estimators carry a factor 2*pi*q**(n+3).
All evaluations run in log space; a measure that overflows a double raises
``EstimationError``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import __version__
from .acquisition import group_shells, q_from_b
from .exceptions import DataError, EstimationError
from .fitting import fit_dti_volume
from .signal_model import EPS_E
from .sphere import SphereRule, lebedev, real_sh_basis, symmetric_directions, uniform_rule

logger = logging.getLogger(__name__)

ESTIMATORS = ("direct", "expansion")
MEASURES = (("rtop", 0), ("qmsd", 2), ("qmfd", 4))


@dataclass(frozen=True)
class MomentResult:
    n: int
    value: float
    estimator: str
    shell_b: float | None = None
    n_clamped: int = 0

    def __float__(self):
        return float(self.value)


def _check_inputs(E, alpha, eps):
    E = np.asarray(E, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), E.shape)
    if np.any(~np.isfinite(E)):
        raise DataError("non-finite attenuation")
    if np.any(~(alpha > 0)) or np.any(alpha > 1):
        raise DataError("stretching exponents must lie in (0, 1]")
    Ec = np.clip(E, eps, 1.0 - eps)
    return Ec, alpha, Ec != E


def _weighted_mean(x, w):
    return np.sum(w * x, axis=-1) / np.sum(w, axis=-1)


def _log_weighted_mean_exp(logt, w):
    # log( sum w exp(logt) / sum w ), stable for large logt
    ref = np.max(np.where(w > 0, logt, -np.inf), axis=-1, keepdims=True)
    ref = np.where(np.isfinite(ref), ref, 0.0)
    s = np.sum(w * np.exp(logt - ref), axis=-1)
    return np.log(s / np.sum(w, axis=-1)) + ref[..., 0]


def _finish(log_value, what):
    with np.errstate(over="ignore"):
        val = np.exp(log_value)
    if np.any(np.isinf(val)):
        raise EstimationError(f"{what} overflows double precision (stretching exponent too small?)")
    return val


def direct_values(E, alpha, q, n, weights, eps=EPS_E):
    """Vectorised direct estimator over the last axis; ``weights`` 0 excludes."""
    Ec, alpha, _ = _check_inputs(E, alpha, eps)
    p = (n + 3) / (2.0 * alpha)
    logt = gammaln(p) - np.log(alpha) - p * np.log(-np.log(Ec))
    log_v = np.log(2 * np.pi) + (n + 3) * np.log(q) + _log_weighted_mean_exp(logt, weights)
    return _finish(log_v, f"M_{n}")


def expansion_values(E, alpha, q, n, weights, eps=EPS_E):
    """Vectorised second-order expansion estimator over the last axis."""
    Ec, alpha, _ = _check_inputs(E, alpha, eps)
    X = -np.log(Ec)
    k = n + 3.0
    m1 = _weighted_mean(X, weights)
    if np.any(~(m1 > 0)):
        raise EstimationError("mean of -log E must be positive")
    m2 = _weighted_mean(X * X, weights)
    a1 = _weighted_mean(alpha, weights)
    a2 = _weighted_mean(alpha * alpha, weights)
    p_bar = _weighted_mean(k / (2.0 * alpha), weights)
    log_a = _log_weighted_mean_exp(gammaln(k / (2.0 * alpha)) - 3.0 * np.log(alpha), weights) - np.log(8.0)
    bracket = k * (k + 2.0 * a1) * m2 / m1**2 + (8.0 * a2 - 2.0 * k * a1 - k * k)
    log_v = np.log(2 * np.pi) + k * np.log(q) + log_a - p_bar * np.log(m1) + np.log(bracket)
    return _finish(log_v, f"M_{n}")


def _shell_weights(n_dirs, weights):
    if weights is None:
        return np.ones(n_dirs)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n_dirs,) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with one entry per direction")
    return w


def moment_direct(E_shell, alphas, q, n, weights=None, shell_b=None, eps=EPS_E):
    """Direct shell estimate of M_n.

    ``M_n = 2 pi q^(n+3) < Gamma((n+3)/(2a)) a^-1 (-log E)^(-(n+3)/(2a)) >``
    where ``<.>`` is the (optionally weighted) mean over the shell's
    directions.

    Parameters
    ----------
    E_shell : array_like, shape (N,)
        Attenuations on one shell; clamped into ``[eps, 1 - eps]``.
    alphas : array_like, shape (N,) or scalar
        Stretching exponents per direction.
    q : float
        q-magnitude of the shell [1/mm].
    n : int
        Moment order (0 for RTOP, 2 for QMSD, 4 for QMFD).
    weights : array_like, optional
        Quadrature weights of the directions; uniform by default.
    """
    E = np.asarray(E_shell, dtype=float).reshape(-1)
    if E.size == 0:
        raise EstimationError("empty shell")
    if not q > 0:
        raise ValueError("q must be positive")
    _, _, clamped = _check_inputs(E, np.broadcast_to(alphas, E.shape), eps)
    if clamped.any():
        logger.debug("%d attenuation(s) clamped in direct estimator", int(clamped.sum()))
    v = direct_values(E, np.broadcast_to(alphas, E.shape), q, n, _shell_weights(E.size, weights), eps)
    return MomentResult(n, float(v), "direct", shell_b, int(clamped.sum()))


def moment_expansion(E_shell, alphas, q, n, weights=None, shell_b=None, eps=EPS_E):
    """Second-order series-expansion estimate of M_n from one shell.

    Uses only shell means: of ``-log E``, of its square, of ``alpha`` and
    ``alpha**2``, of ``(n+3)/(2 alpha)`` and of ``Gamma((n+3)/(2 alpha)) alpha^-3``.
    For direction-constant inputs it coincides with :func:`moment_direct`.
    """
    E = np.asarray(E_shell, dtype=float).reshape(-1)
    if E.size == 0:
        raise EstimationError("empty shell")
    if not q > 0:
        raise ValueError("q must be positive")
    _, _, clamped = _check_inputs(E, np.broadcast_to(alphas, E.shape), eps)
    v = expansion_values(E, np.broadcast_to(alphas, E.shape), q, n, _shell_weights(E.size, weights), eps)
    return MomentResult(n, float(v), "expansion", shell_b, int(clamped.sum()))


def _field(fn, points):
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(points), dtype=float), points.shape[:1])
    return np.broadcast_to(np.asarray(fn, dtype=float), points.shape[:1])


def log_surface_constant(tau, n):
    """log of 2^(-n-4) pi^(-n-3) tau^(-(n+3)/2)."""
    return -(n + 4) * np.log(2.0) - (n + 3) * np.log(np.pi) - 0.5 * (n + 3) * np.log(tau)


def moment_analytic(D_fn, alpha_fn, tau, n, quadrature=None):
    """M_n as a spherical quadrature of the exact radial integral.

    Parameters
    ----------
    D_fn, alpha_fn : callable or float
        Direction fields; callables map an (N, 3) array of unit vectors to (N,).
    tau : float
        Effective diffusion time [s].
    n : int
    quadrature : SphereRule or array_like (N, 3), optional
        Rule to integrate with. A bare direction array gets uniform weights.
        Defaults to a 131st-order Lebedev rule.
    """
    if quadrature is None:
        rule = lebedev(131)
    elif isinstance(quadrature, SphereRule):
        rule = quadrature
    else:
        rule = uniform_rule(quadrature)
    D = _field(D_fn, rule.points)
    a = _field(alpha_fn, rule.points)
    if np.any(~(D > 0)) or np.any(~(a > 0)) or np.any(a > 1):
        raise DataError("D must be positive and alpha in (0, 1] on the sphere")
    p = (n + 3) / (2.0 * a)
    logt = gammaln(p) - np.log(a) - 0.5 * (n + 3) * np.log(D)
    ref = logt.max()
    log_v = log_surface_constant(tau, n) + ref + np.log(np.dot(rule.weights, np.exp(logt - ref)))
    return MomentResult(n, float(_finish(log_v, f"M_{n}")), "analytic")


def rtop_dti(eigenvalues, tau, convention="gaussian", floor=1e-6):
    """RTOP from diffusion tensor eigenvalues.

    ``convention="gaussian"`` gives the exact Gaussian propagator value
    ``(4 pi tau)^-1.5 (l1 l2 l3)^-0.5``; ``convention="3pi"`` uses the
    prefactor ``(3 pi tau)^-1.5`` instead.
    """
    ev = np.asarray(eigenvalues, dtype=float)
    if np.any(~(ev >= floor)):
        raise DataError(f"eigenvalue below floor {floor:g}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    c = {"gaussian": 4.0, "3pi": 3.0}.get(convention)
    if c is None:
        raise ValueError(f"unknown convention {convention!r}")
    out = (c * np.pi * tau) ** -1.5 * np.prod(ev, axis=-1) ** -0.5
    return out if out.ndim else float(out)


def gaussian_tensor_moments(tensors, tau, n, quadrature=None):
    """M_n of Gaussian propagators with (..., 3, 3) diffusion tensors."""
    rule = quadrature or lebedev(131)
    T = np.asarray(tensors, dtype=float)
    D = np.einsum("ki,...ij,kj->...k", rule.points, T, rule.points)
    if np.any(~(D > 0)):
        raise DataError("tensor is not positive definite")
    logt = gammaln((n + 3) / 2.0) - 0.5 * (n + 3) * np.log(D)
    ref = logt.max(axis=-1, keepdims=True)
    s = np.log(np.einsum("k,...k->...", rule.weights, np.exp(logt - ref)))
    return _finish(log_surface_constant(tau, n) + ref[..., 0] + s, f"M_{n}")


# ---------------------------------------------------------------------------
# volume maps


@dataclass
class QMaps:
    rtop: np.ndarray
    qmsd: np.ndarray
    qmfd: np.ndarray
    metadata: dict = field(default_factory=dict)

    def items(self):
        return (("rtop", self.rtop), ("qmsd", self.qmsd), ("qmfd", self.qmfd))


def _resample_fields(values, valid, dirs, targets, order_l, lambda_reg):
    """SH-resample (V, K, F) per-direction fields onto target directions."""
    V, K, F = values.shape
    B = real_sh_basis(dirs, order_l)
    Bt = real_sh_basis(targets, order_l)
    ls = np.array([l for l in range(0, order_l + 1, 2) for _ in range(2 * l + 1)], dtype=float)
    P = lambda_reg * np.diag((ls * (ls + 1)) ** 2)
    out = np.empty((V, targets.shape[0], F))
    full = valid.all(axis=1)
    if full.any():
        coef = np.linalg.solve(B.T @ B + P, np.einsum("ki,vkf->ivf", B, values[full]).reshape(B.shape[1], -1))
        out[full] = np.einsum("ti,ivf->vtf", Bt, coef.reshape(B.shape[1], int(full.sum()), F))
    for v in np.flatnonzero(~full):
        Bv = B[valid[v]]
        if Bv.shape[0] < B.shape[1] or np.linalg.matrix_rank(Bv) < B.shape[1]:
            out[v] = np.nan
            continue
        coef = np.linalg.solve(Bv.T @ Bv + P, Bv.T @ values[v, valid[v]])
        out[v] = Bt @ coef
    return out


def _estimate(estimator, E, alpha, w, q, n):
    if estimator == "direct":
        return direct_values(E, alpha, q, n, w)
    if estimator == "expansion":
        return expansion_values(E, alpha, q, n, w)
    raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")


def _maps_from_fields(E, alpha, valid, q, estimator, spatial, mask):
    """E, alpha, valid are (V, K) over masked voxels."""
    usable = valid.any(axis=1)
    if not usable.all():
        logger.warning("%d masked voxel(s) without a usable direction set to NaN", int((~usable).sum()))
    maps = {}
    for name, n in MEASURES:
        vals = np.full(E.shape[0], np.nan)
        if usable.any():
            Eu = np.where(valid[usable], E[usable], 0.5)
            au = np.where(valid[usable], alpha[usable], 1.0)
            vals[usable] = _estimate(estimator, Eu, au, valid[usable].astype(float), q, n)
        out = np.full(spatial, np.nan)
        out[mask] = vals
        maps[name] = out
    return maps


def compute_maps(fit, shell_b, estimator="direct", e_source="fitted", data=None, mask=None,
                 b_tolerance=25.0, sh_resample=None):
    """RTOP, QMSD and QMFD maps at one shell from a fitted volume.

    Parameters
    ----------
    fit : StretchedFitVolume
    shell_b : float
        b-value of the acquisition shell to evaluate at.
    estimator : {"direct", "expansion"}
    e_source : {"fitted", "measured"}
        ``fitted`` predicts the shell attenuations from each direction's fit,
        ``measured`` divides the acquired shell signals (``data`` required)
        by the baseline and pairs them with the fitted exponents.
    mask : ndarray of bool, optional
        Restricts the fit mask further.
    sh_resample : tuple (order_l, lambda_reg, n_targets), optional
        Resample ``-log E`` and ``alpha`` onto ``n_targets`` near-uniform
        directions through an even spherical-harmonic fit before averaging.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    k = int(np.argmin(np.abs(fit.shell_b - shell_b))) if fit.shell_b.size else -1
    if k < 0 or abs(fit.shell_b[k] - shell_b) > b_tolerance:
        raise DataError(
            f"shell b = {shell_b:g} not in acquisition (shells: "
            + ", ".join(f"{c:g}" for c in fit.shell_b) + ")"
        )
    m = fit.mask if mask is None else (fit.mask & np.asarray(mask, dtype=bool))
    if not m.any():
        raise DataError("empty mask")
    q = float(q_from_b(shell_b, fit.tau))
    D = fit.D[m]
    alpha = fit.alpha[m]
    valid = fit.converged[m] & np.isfinite(D) & np.isfinite(alpha)
    if e_source == "fitted":
        E = np.exp(-((shell_b * np.where(valid, D, 1e-3)) ** np.where(valid, alpha, 1.0)))
    elif e_source == "measured":
        if data is None:
            raise DataError("measured attenuation requires the diffusion data")
        idx = fit.members[:, k]
        present = idx >= 0
        sig = np.asarray(data, dtype=float)[m][:, np.where(present, idx, 0)]
        E = sig / fit.s0[m][:, None]
        valid &= present[None, :] & np.isfinite(E)
    else:
        raise ValueError(f"unknown e_source {e_source!r}")
    dirs = fit.directions
    if sh_resample is not None:
        order_l, lam, n_t = sh_resample
        targets = symmetric_directions(int(n_t))
        # -log E and alpha are smooth and antipodally symmetric; resample those.
        x = -np.log(np.clip(E, EPS_E, 1 - EPS_E))
        res = _resample_fields(np.stack([x, alpha], axis=-1), valid, dirs, targets, order_l, lam)
        E = np.exp(-np.maximum(res[..., 0], 1e-12))
        alpha = np.clip(res[..., 1], 1e-2, 1.0)
        valid = np.isfinite(res).all(axis=-1)
        E = np.where(valid, E, 0.5)
        alpha = np.where(valid, alpha, 1.0)
    maps = _maps_from_fields(E, alpha, valid, q, estimator, fit.shape, m)
    meta = {
        "estimator": estimator,
        "e_source": e_source,
        "shell_b": float(fit.shell_b[k]),
        "shell_subset": [float(b) for b in fit.fit_shells],
        "tau": fit.tau,
        "sh_resample": list(sh_resample) if sh_resample else None,
        "software": f"stretchq {__version__}",
    }
    return QMaps(maps["rtop"], maps["qmsd"], maps["qmfd"], meta)


def compute_gaussian_maps(data, scheme, shell_b, mask=None, s0=None, b_tolerance=25.0):
    """Single-shell Gaussian estimator: the direct estimator with alpha = 1.

    Uses every measurement of the chosen shell and the acquired signals.
    """
    from .fitting import baseline_signal

    data = np.asarray(data, dtype=float)
    spatial = data.shape[:3]
    mask = np.ones(spatial, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("empty mask")
    grouping = group_shells(scheme, b_tolerance)
    k = grouping.shell_index(shell_b)
    idx = grouping.shell_members[k]
    if s0 is None:
        s0 = baseline_signal(data, scheme, b_tolerance)
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), spatial)
    E = data[mask][:, idx] / s0[mask][:, None]
    valid = np.isfinite(E) & (s0[mask][:, None] > 0)
    q = float(q_from_b(grouping.shell_b_centers[k], scheme.tau))
    maps = _maps_from_fields(np.where(valid, E, 0.5), np.ones_like(E), valid, q, "direct", spatial, mask)
    meta = {
        "estimator": "gaussian",
        "e_source": "measured",
        "shell_b": float(grouping.shell_b_centers[k]),
        "shell_subset": [float(grouping.shell_b_centers[k])],
        "tau": scheme.tau,
        "software": f"stretchq {__version__}",
    }
    return QMaps(maps["rtop"], maps["qmsd"], maps["qmfd"], meta)


def compute_dti_maps(data, scheme, b_subset=None, mask=None, convention="gaussian", refine=True,
                     b_tolerance=25.0):
    """Gaussian-propagator measures from a tensor fit.

    RTOP uses :func:`rtop_dti` with the chosen ``convention``; QMSD and QMFD
    integrate the Gaussian propagator of the fitted tensor.
    """
    from .fitting import components_to_tensor

    data = np.asarray(data, dtype=float)
    spatial = data.shape[:3]
    mask = np.ones(spatial, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("empty mask")
    comps, evals, _ = fit_dti_volume(data, scheme, b_subset, mask, refine=refine, b_tolerance=b_tolerance)
    rtop = np.full(spatial, np.nan)
    rtop[mask] = rtop_dti(evals[mask], scheme.tau, convention)
    # Tensor with floored eigenvalues, consistent with the RTOP above.
    T = components_to_tensor(comps[mask])
    w, vecs = np.linalg.eigh(T)
    T = np.einsum("vij,vj,vkj->vik", vecs, np.maximum(w, 1e-6), vecs)
    out = {"rtop": rtop}
    for name, n in MEASURES[1:]:
        arr = np.full(spatial, np.nan)
        arr[mask] = gaussian_tensor_moments(T, scheme.tau, n)
        out[name] = arr
    meta = {
        "estimator": "dti",
        "convention": convention,
        "shell_b": None,
        "shell_subset": None if b_subset is None else [float(b) for b in b_subset],
        "tau": scheme.tau,
        "software": f"stretchq {__version__}",
    }
    return QMaps(out["rtop"], out["qmsd"], out["qmfd"], meta)
