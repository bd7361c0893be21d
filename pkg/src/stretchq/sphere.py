"""Point sets, quadrature rules and a real spherical-harmonic basis on S^2."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import lebedev_rule
from scipy.special import sph_harm_y


@dataclass(frozen=True)
class SphereRule:
    """Nodes on the unit sphere with weights summing to 4*pi."""

    points: np.ndarray
    weights: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or w.shape != (pts.shape[0],):
            raise ValueError("points must be (N, 3) and weights (N,)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.points.shape[0]

    def integrate(self, fn):
        return float(np.dot(self.weights, fn(self.points)))


def uniform_rule(points, name="uniform"):
    """Equal-weight rule over a given direction set (weights 4*pi/N)."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    return SphereRule(pts, np.full(n, 4.0 * np.pi / n), name)


def gauss_product_rule(n_theta, n_phi=None):
    """Gauss-Legendre in cos(theta) times the trapezoid rule in phi.

    Exact for spherical polynomials of degree ``< min(2 n_theta, n_phi)``.
    """
    if n_phi is None:
        n_phi = 2 * n_theta
    x, wx = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1.0 - ct**2)
    pts = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    w = np.repeat(wx, n_phi) * (2.0 * np.pi / n_phi)
    return SphereRule(pts, w, f"gauss{n_theta}x{n_phi}")


def lebedev(order=131):
    """Lebedev-Laikov rule of the given polynomial order (scipy tables)."""
    x, w = lebedev_rule(order)
    return SphereRule(x.T.copy(), w, f"lebedev{order}")


def fibonacci_directions(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5.0**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


@lru_cache(maxsize=32)
def _relaxed(n, antipodal, iters):
    # Repulsion on the sphere, seeded deterministically from a Fibonacci lattice.
    # With antipodal=True each point also repels the mirror images of the others.
    p = fibonacci_directions(2 * n if antipodal else n)
    if antipodal:
        p = p[:n] * np.where(p[:n, 2:3] < 0, -1.0, 1.0)
    idx = np.arange(n)
    for _ in range(iters):
        others = np.vstack([p, -p]) if antipodal else p
        diff = p[:, None, :] - others[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[idx, idx] = np.inf
        force = np.einsum("ij,ijk->ik", d2**-1.5, diff)
        force -= np.einsum("ij,ij->i", force, p)[:, None] * p
        p = p + force * (0.05 / (n * np.abs(force).max()))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
    p.setflags(write=False)
    return p


def electrostatic_directions(n, antipodal=True, iters=2000):
    """Near-uniform unit vectors from an electrostatic repulsion relaxation.

    With ``antipodal=True`` the ``n`` vectors are optimised as ``n`` antipodal
    pairs, the usual construction for diffusion gradient tables.
    """
    return np.array(_relaxed(int(n), bool(antipodal), int(iters)))


def symmetric_directions(n_total, iters=2000):
    """``n_total`` (even) directions made of ``n_total/2`` antipodal pairs."""
    if n_total % 2:
        raise ValueError("n_total must be even")
    half = electrostatic_directions(n_total // 2, antipodal=True, iters=iters)
    return np.vstack([half, -half])


def cart2sphere(points):
    pts = np.asarray(points, dtype=float)
    r = np.linalg.norm(pts, axis=-1)
    theta = np.arccos(np.clip(pts[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    phi = np.arctan2(pts[..., 1], pts[..., 0])
    return r, theta, phi


def sh_degrees(order_l):
    """(l, m) pairs of the even-order real basis, l = 0, 2, ..., order_l."""
    if order_l < 0 or order_l % 2:
        raise ValueError("order_l must be a non-negative even integer")
    return [(l, m) for l in range(0, order_l + 1, 2) for m in range(-l, l + 1)]


def n_sh_coefficients(order_l):
    return (order_l + 1) * (order_l + 2) // 2


def real_sh_basis(points, order_l):
    """Real, antipodally symmetric spherical-harmonic design matrix.

    Returns an array of shape (N, n_coef) using the orthonormal convention
    ``sqrt(2) Re Y_l^m`` for m > 0, ``Y_l^0`` for m = 0 and
    ``sqrt(2) Im Y_l^|m|`` for m < 0.
    """
    _, theta, phi = cart2sphere(points)
    cols = []
    for l, m in sh_degrees(order_l):
        y = sph_harm_y(l, abs(m), theta, phi)
        if m > 0:
            cols.append(np.sqrt(2.0) * y.real)
        elif m < 0:
            cols.append(np.sqrt(2.0) * y.imag)
        else:
            cols.append(y.real)
    return np.stack(cols, axis=-1)
