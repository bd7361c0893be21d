"""Stretched-exponential (Kohlrausch) signal model and its inverse.

``E(b) = exp(-(b D)**alpha)`` with ``D`` in mm^2/s, ``b`` in s/mm^2 and
``0 < alpha <= 1``; ``alpha = 1`` is mono-exponential (Gaussian) decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidAttenuationError

EPS_E = 1e-6
D_BOUNDS = (1e-6, 1e-2)  # mm^2/s
ALPHA_BOUNDS = (1e-2, 1.0)


@dataclass(frozen=True)
class StretchedParams:
    D: float
    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.D) and self.D > 0):
            raise ValueError(f"D must be positive, got {self.D}")
        if not (0 < self.alpha <= 1):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    def attenuation(self, b):
        return predict_attenuation(b, self.D, self.alpha)


def predict_attenuation(b, D, alpha):
    """Normalised signal ``exp(-(b D)**alpha)``; broadcasts over arrays."""
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise ValueError("b-values must be non-negative")
    return np.exp(-((b * D) ** alpha))


def clamp_attenuation(E, eps=EPS_E):
    """Clip attenuations into ``[eps, 1 - eps]``.

    Returns the clipped array and a boolean array marking modified entries.
    """
    E = np.asarray(E, dtype=float)
    clipped = np.clip(E, eps, 1.0 - eps)
    return clipped, clipped != E


def invert_diffusivity(E, alpha, q, tau, eps=EPS_E):
    """Apparent diffusivity reproducing attenuation ``E`` at q-magnitude ``q``.

    ``D = (-log E)**(1/alpha) / (4 pi^2 tau q^2)`` after clamping ``E`` into
    ``[eps, 1 - eps]``. Attenuations outside ``(0, 1)`` are rejected.
    """
    E = np.asarray(E, dtype=float)
    if not np.all(np.isfinite(E)) or np.any(E <= 0) or np.any(E >= 1):
        raise InvalidAttenuationError("attenuation must lie strictly inside (0, 1)")
    q = np.asarray(q, dtype=float)
    if np.any(q <= 0):
        raise ValueError("q must be positive")
    Ec, _ = clamp_attenuation(E, eps)
    D = (-np.log(Ec)) ** (1.0 / np.asarray(alpha, dtype=float)) / (4.0 * np.pi**2 * tau * q**2)
    return D if D.ndim else float(D)
