"""Brute-force reference values for q-space moments.

``brute_force_moment`` integrates ``||q||^n exp(-(4 pi^2 tau q^2 D(g))**alpha(g))``
over R^3 with a tensor-product rule: Gauss-Legendre in q on a truncated
radial interval, times a Gauss-Legendre x trapezoid rule on the sphere. It
never uses the closed-form radial integral, which makes it an independent
check of the estimators in :mod:`stretchq.qspace`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gamma

from .exceptions import QuadratureError
from .sphere import gauss_product_rule


@dataclass(frozen=True)
class QuadratureSpec:
    """Node counts and truncation of the brute-force rule.

    ``q_max=None`` truncates every direction where its exponent reaches
    ``tail_exponent`` (integrand ~ exp(-40) by default); a number fixes one
    radial cut-off for all directions.
    """

    radial_nodes: int = 128
    sphere_theta: int = 24
    q_max: float | None = None
    tol: float = 1e-6
    max_refinements: int = 3
    tail_exponent: float = 40.0

    def __post_init__(self):
        if self.radial_nodes < 2 or self.sphere_theta < 2:
            raise ValueError("node counts must be >= 2")
        if self.q_max is not None and not self.q_max > 0:
            raise ValueError("q_max must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


class BruteForceResult(NamedTuple):
    value: float
    rel_error: float
    n_nodes: int

    def __float__(self):
        return float(self.value)


def _field(fn, points):
    v = fn(points) if callable(fn) else fn
    return np.broadcast_to(np.asarray(v, dtype=float), points.shape[:1])


def _evaluate(D_fn, alpha_fn, tau, n, n_rad, n_theta, q_scale, spec):
    rule = gauss_product_rule(n_theta, 2 * n_theta)
    D = _field(D_fn, rule.points)
    a = _field(alpha_fn, rule.points)
    if np.any(~(D > 0)) or np.any(~(a > 0)):
        raise ValueError("integrand must decay: D > 0 and alpha > 0 everywhere")
    c = 4.0 * np.pi**2 * tau * D
    if spec.q_max is None:
        q_max = np.sqrt(spec.tail_exponent ** (1.0 / a) / c) * q_scale
    else:
        q_max = np.full(D.shape, spec.q_max * q_scale)
    x, w = np.polynomial.legendre.leggauss(n_rad)
    q = 0.5 * (x[None, :] + 1.0) * q_max[:, None]
    wq = 0.5 * w[None, :] * q_max[:, None]
    f = q ** (n + 2) * np.exp(-((c[:, None] * q * q) ** a[:, None]))
    radial = np.sum(wq * f, axis=1)
    return float(np.dot(rule.weights, radial)), len(rule) * n_rad


def brute_force_moment(D_fn, alpha_fn, tau, n, spec=None):
    """Numerically integrate M_n over R^3.

    The rule is refined (radial nodes, sphere nodes and radial cut-off all
    doubled) until successive values agree to ``spec.tol`` relative.

    Returns
    -------
    BruteForceResult
        Value, relative change at the last refinement, node count.

    Raises
    ------
    QuadratureError
        If the refinement cap is reached before agreement.
    """
    spec = spec or QuadratureSpec()
    n_rad, n_theta, scale = spec.radial_nodes, spec.sphere_theta, 1.0
    prev, _ = _evaluate(D_fn, alpha_fn, tau, n, n_rad, n_theta, scale, spec)
    err = np.inf
    for _ in range(spec.max_refinements):
        n_rad, n_theta, scale = 2 * n_rad, 2 * n_theta, 2.0 * scale
        cur, nodes = _evaluate(D_fn, alpha_fn, tau, n, n_rad, n_theta, scale, spec)
        err = abs(cur - prev) / abs(cur)
        if err < spec.tol:
            return BruteForceResult(cur, err, nodes)
        prev = cur
    raise QuadratureError(f"no convergence: relative change {err:.3g} > tol {spec.tol:g}")


def isotropic_gaussian_moment(D, tau, n):
    """Closed form of M_n for E(q) = exp(-4 pi^2 tau q^2 D).

    4 pi * int_0^inf q^(n+2) exp(-a q^2) dq = 2 pi Gamma((n+3)/2) a^(-(n+3)/2).
    """
    a = 4.0 * np.pi**2 * tau * D
    return 2.0 * np.pi * gamma((n + 3) / 2.0) * a ** (-(n + 3) / 2.0)
