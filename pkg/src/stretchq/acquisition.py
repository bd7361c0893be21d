"""Gradient tables: parsing, shell grouping, direction matching and resampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import GradientTableError, RankDeficientError
from .sphere import n_sh_coefficients, real_sh_basis, sh_degrees

logger = logging.getLogger(__name__)

DEFAULT_B_TOLERANCE = 25.0  # s/mm^2
DEFAULT_ANGULAR_TOL = 1.0  # degrees
DEFAULT_SH_ORDER = 6
DEFAULT_SH_LAMBDA = 0.006
UNIT_NORM_TOL = 1e-6


def q_from_b(b, tau):
    """q-magnitude [1/mm] for b-value [s/mm^2] and effective diffusion time [s]."""
    return np.sqrt(np.asarray(b, dtype=float) / (4.0 * np.pi**2 * tau))


def b_from_q(q, tau):
    return 4.0 * np.pi**2 * tau * np.asarray(q, dtype=float) ** 2


def effective_diffusion_time(small_delta, big_delta):
    """tau = Delta - delta/3, all in seconds."""
    tau = big_delta - small_delta / 3.0
    if not tau > 0:
        raise GradientTableError(f"effective diffusion time must be positive, got {tau}")
    return tau


@dataclass(frozen=True)
class GradientScheme:
    """Acquisition geometry.

    Attributes
    ----------
    directions : ndarray, shape (N, 3)
        Unit gradient directions (zero vectors allowed where b = 0).
    bvals : ndarray, shape (N,)
        b-values in s/mm^2.
    tau : float
        Effective diffusion time in seconds.
    q_mags : ndarray, shape (N,)
        Derived q magnitudes in 1/mm.
    """

    directions: np.ndarray
    bvals: np.ndarray
    tau: float
    q_mags: np.ndarray = field(init=False)
    warnings: tuple = ()

    def __post_init__(self):
        dirs = np.array(self.directions, dtype=float)
        bvals = np.array(self.bvals, dtype=float).reshape(-1)
        tau = float(self.tau)
        if dirs.ndim != 2 or dirs.shape[1] != 3:
            raise GradientTableError(f"directions must have shape (N, 3), got {dirs.shape}")
        if dirs.shape[0] != bvals.shape[0]:
            raise GradientTableError(
                f"length mismatch: {bvals.shape[0]} b-values but {dirs.shape[0]} gradient vectors"
            )
        if not (np.all(np.isfinite(dirs)) and np.all(np.isfinite(bvals))):
            raise GradientTableError("gradient table contains non-finite entries")
        if np.any(bvals < 0):
            raise GradientTableError(f"negative b-value(s): {bvals[bvals < 0].tolist()}")
        if not (np.isfinite(tau) and tau > 0):
            raise GradientTableError(f"tau must be positive, got {tau}")
        norms = np.linalg.norm(dirs, axis=1)
        zero = norms == 0
        if np.any(zero & (bvals > 0)):
            bad = np.flatnonzero(zero & (bvals > 0)).tolist()
            raise GradientTableError(f"zero gradient vector with b > 0 at indices {bad}")
        notes = list(self.warnings)
        off = ~zero & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if np.any(off):
            msg = f"renormalised {int(off.sum())} non-unit gradient vector(s)"
            notes.append(msg)
            logger.warning(msg)
        dirs[~zero] /= norms[~zero, None]
        for arr in (dirs, bvals):
            arr.setflags(write=False)
        q = q_from_b(bvals, tau)
        q.setflags(write=False)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "q_mags", q)
        object.__setattr__(self, "warnings", tuple(notes))

    @property
    def n_measurements(self):
        return self.bvals.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return GradientScheme(self.directions[idx], self.bvals[idx], self.tau)


def _parse_rows(text, what):
    rows = []
    for line in text.strip().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError as exc:
            raise GradientTableError(f"{what}: {exc}") from None
    return rows


def parse_gradient_scheme(bvals_text, bvecs_text, tau):
    """Build a GradientScheme from FSL-style bvals/bvecs text.

    ``bvecs_text`` may be 3 rows of N values (FSL) or N rows of 3; a 3x3 table
    is read as 3xN.
    """
    brows = _parse_rows(bvals_text, "bvals")
    bvals = np.array([v for row in brows for v in row], dtype=float)
    vrows = _parse_rows(bvecs_text, "bvecs")
    if not vrows:
        raise GradientTableError("bvecs: empty table")
    widths = {len(r) for r in vrows}
    if len(widths) != 1:
        raise GradientTableError(f"bvecs: ragged rows with lengths {sorted(widths)}")
    vecs = np.array(vrows, dtype=float)
    if vecs.shape[0] == 3:
        vecs = vecs.T
    elif vecs.shape[1] != 3:
        raise GradientTableError(f"bvecs: expected 3xN or Nx3, got {vecs.shape[0]}x{vecs.shape[1]}")
    if vecs.shape[0] != bvals.shape[0]:
        raise GradientTableError(
            f"length mismatch: {bvals.shape[0]} b-values but {vecs.shape[0]} gradient vectors"
        )
    return GradientScheme(vecs, bvals, tau)


def read_gradient_scheme(bvals_path, bvecs_path, tau):
    with open(bvals_path) as fb, open(bvecs_path) as fv:
        return parse_gradient_scheme(fb.read(), fv.read(), tau)


def format_bvals(scheme):
    return " ".join(f"{b:.10g}" for b in scheme.bvals) + "\n"


def format_bvecs(scheme):
    return "".join(" ".join(f"{v:.10g}" for v in row) + "\n" for row in scheme.directions.T)


@dataclass(frozen=True)
class ShellGrouping:
    shell_b_centers: np.ndarray
    shell_members: tuple
    b0_indices: np.ndarray
    b_tolerance: float = DEFAULT_B_TOLERANCE

    @property
    def n_shells(self):
        return len(self.shell_members)

    def shell_index(self, b):
        """Index of the shell whose centre lies within tolerance of ``b``."""
        if self.n_shells == 0:
            raise GradientTableError("acquisition has no diffusion-weighted shells")
        k = int(np.argmin(np.abs(self.shell_b_centers - b)))
        if abs(self.shell_b_centers[k] - b) > self.b_tolerance:
            raise GradientTableError(
                f"b = {b:g} is not an acquired shell; shells are "
                + ", ".join(f"{c:g}" for c in self.shell_b_centers)
            )
        return k


def group_shells(scheme, b_tolerance=DEFAULT_B_TOLERANCE):
    """Cluster measurements into b0 and shells by 1-D single linkage on b."""
    if not b_tolerance > 0:
        raise ValueError("b_tolerance must be positive")
    b = scheme.bvals
    b0 = np.flatnonzero(b <= b_tolerance)
    rest = np.flatnonzero(b > b_tolerance)
    # Stable sort on (b, index) keeps the result independent of input order.
    order = rest[np.lexsort((rest, b[rest]))]
    members, current = [], []
    for i in order:
        if current and b[i] - b[current[-1]] > b_tolerance:
            members.append(current)
            current = []
        current.append(i)
    if current:
        members.append(current)
    members = tuple(np.array(sorted(m), dtype=int) for m in members)
    centers = np.array([b[m].mean() for m in members], dtype=float)
    return ShellGrouping(centers, members, b0, float(b_tolerance))


@dataclass(frozen=True)
class DirectionBundleSet:
    """Per-direction bundles of measurements across shells.

    ``members[k, s]`` is the measurement index of bundle ``k`` on shell ``s``
    or -1 when the bundle is absent from that shell.
    """

    canonical: np.ndarray
    members: np.ndarray
    shell_b_centers: np.ndarray

    @property
    def complete(self):
        return np.all(self.members >= 0, axis=1)

    @property
    def n_complete(self):
        return int(self.complete.sum())

    def __len__(self):
        return self.members.shape[0]

    def restrict(self, shell_columns):
        cols = np.asarray(shell_columns, dtype=int)
        keep = np.all(self.members[:, cols] >= 0, axis=1)
        return DirectionBundleSet(
            self.canonical[keep], self.members[keep][:, cols], self.shell_b_centers[cols]
        )


def match_directions(scheme, grouping, angular_tol=DEFAULT_ANGULAR_TOL):
    """Greedy cross-shell matching of gradient directions.

    Bundles are seeded from the first shell; a direction on another shell
    joins the closest unfilled bundle whose canonical direction lies within
    ``angular_tol`` degrees, up to antipodal sign. Unmatched directions open
    new (incomplete) bundles.
    """
    if grouping.n_shells == 0:
        raise GradientTableError("no diffusion-weighted shell to match directions on")
    cos_tol = np.cos(np.deg2rad(angular_tol))
    n_shells = grouping.n_shells
    dirs = scheme.directions
    canonical = [dirs[i] for i in grouping.shell_members[0]]
    rows = [[int(i)] + [-1] * (n_shells - 1) for i in grouping.shell_members[0]]
    for s in range(1, n_shells):
        cand = grouping.shell_members[s]
        cos = np.abs(np.array(canonical) @ dirs[cand].T)
        taken = np.zeros(len(cand), dtype=bool)
        for k in range(len(canonical)):
            c = np.where(taken, -1.0, cos[k])
            j = int(np.argmax(c))
            # A small slack absorbs rounding of |cos| for identical vectors.
            if c[j] >= cos_tol - 1e-12:
                rows[k][s] = int(cand[j])
                taken[j] = True
        for j in np.flatnonzero(~taken):
            canonical.append(dirs[cand[j]])
            row = [-1] * n_shells
            row[s] = int(cand[j])
            rows.append(row)
    bundles = DirectionBundleSet(
        np.array(canonical, dtype=float).reshape(-1, 3),
        np.array(rows, dtype=int).reshape(-1, n_shells),
        grouping.shell_b_centers.copy(),
    )
    if bundles.n_complete == 0:
        logger.warning("no direction is present on every shell; per-direction fitting impossible")
    return bundles


def resample_shell_sh(signals, directions, target_directions,
                      order_l=DEFAULT_SH_ORDER, lambda_reg=DEFAULT_SH_LAMBDA):
    """Resample one shell onto new directions through an even-order SH fit.

    The fit is a Laplace-Beltrami regularised least-squares problem; with
    ``lambda_reg=0`` any signal in the span of the basis is reproduced exactly.
    """
    signals = np.asarray(signals, dtype=float)
    if not np.all(np.isfinite(signals)):
        raise ValueError("signals must be finite")
    basis = real_sh_basis(directions, order_l)
    n_coef = n_sh_coefficients(order_l)
    if basis.shape[0] < n_coef or np.linalg.matrix_rank(basis) < n_coef:
        raise RankDeficientError(
            f"{basis.shape[0]} directions cannot determine {n_coef} SH coefficients (L={order_l})"
        )
    ls = np.array([l for l, _ in sh_degrees(order_l)], dtype=float)
    penalty = np.diag((ls * (ls + 1)) ** 2)
    coef = np.linalg.solve(basis.T @ basis + lambda_reg * penalty, basis.T @ signals)
    return real_sh_basis(target_directions, order_l) @ coef
