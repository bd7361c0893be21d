"""Self-checks of the moment estimators against closed forms and quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acquisition import q_from_b
from .oracle import brute_force_moment, isotropic_gaussian_moment
from .qspace import gaussian_tensor_moments, moment_analytic, moment_direct, moment_expansion, rtop_dti
from .sphere import symmetric_directions

TAU = 0.058 - 0.029 / 3.0
D_ISO = 0.7e-3


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    reference: float
    tol: float

    @property
    def rel_err(self):
        return abs(self.value - self.reference) / abs(self.reference)

    @property
    def passed(self):
        return bool(self.rel_err <= self.tol)


def gaussian_suite(tau=TAU, D=D_ISO, shell_b=1000.0, n_directions=256, tol=1e-6):
    """Every route on an isotropic alpha = 1 field against the Gaussian closed form."""
    q = float(q_from_b(shell_b, tau))
    # E is the same along every direction, so only the count matters
    E = np.full(n_directions, np.exp(-shell_b * D))
    checks = []
    for n in (0, 2, 4):
        ref = isotropic_gaussian_moment(D, tau, n)
        vals = {
            "direct": moment_direct(E, 1.0, q, n).value,
            "expansion": moment_expansion(E, 1.0, q, n).value,
            "analytic": moment_analytic(D, 1.0, tau, n).value,
            "brute_force": brute_force_moment(D, 1.0, tau, n).value,
            "dti": rtop_dti([D, D, D], tau) if n == 0 else float(gaussian_tensor_moments(D * np.eye(3), tau, n)),
        }
        checks += [Check(f"gaussian M{n} {k}", v, ref, tol) for k, v in vals.items()]
    return checks


def random_fields(n_fields=20, seed=0, ev_range=(0.2e-3, 2e-3), alpha_range=(0.5, 1.0)):
    """Seeded SPD tensors with eigenvalues in ``ev_range`` and one alpha each."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_fields):
        Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
        Q = Q * np.sign(np.diag(R))
        T = Q @ np.diag(rng.uniform(*ev_range, 3)) @ Q.T
        out.append((0.5 * (T + T.T), float(rng.uniform(*alpha_range))))
    return out


def oracle_suite(tau=TAU, n_fields=20, seed=0, shell_b=3000.0, n_directions=256,
                 direct_tol=1e-2, analytic_tol=1e-3, radial_tol=1e-6):
    """Quadrature comparisons on isotropic and random anisotropic fields."""
    checks = []
    for a in (0.5, 0.75, 1.0):
        for n in (0, 2, 4):
            ref = brute_force_moment(D_ISO, a, tau, n).value
            checks.append(Check(f"isotropic a={a} M{n} analytic", moment_analytic(D_ISO, a, tau, n).value,
                                ref, radial_tol))
    dirs = symmetric_directions(n_directions)
    q = float(q_from_b(shell_b, tau))
    for i, (T, a) in enumerate(random_fields(n_fields, seed)):
        dfn = lambda g, T=T: np.einsum("ni,ij,nj->n", g, T, g)  # noqa: E731
        E = np.exp(-((shell_b * dfn(dirs)) ** a))
        for n in (0, 2, 4):
            ref = brute_force_moment(dfn, a, tau, n).value
            checks.append(Check(f"field {i} M{n} direct", moment_direct(E, a, q, n).value, ref, direct_tol))
            checks.append(Check(f"field {i} M{n} analytic", moment_analytic(dfn, a, tau, n).value, ref,
                                analytic_tol))
    return checks


SUITES = {"gaussian": gaussian_suite, "oracle": oracle_suite}


def format_table(checks):
    lines = [f"{'check':<34} {'value':>14} {'reference':>14} {'rel_err':>10} {'tol':>8}  status"]
    for c in checks:
        lines.append(f"{c.name:<34} {c.value:>14.6e} {c.reference:>14.6e} {c.rel_err:>10.2e} {c.tol:>8.0e}  "
                     + ("PASS" if c.passed else "FAIL"))
    return "\n".join(lines)
