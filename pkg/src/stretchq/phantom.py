"""Synthetic multi-shell acquisitions with known stretched-exponential truth.

Each region carries a diffusion tensor ``T`` and a stretching exponent; the
signal of a measurement with direction ``g`` and b-value ``b`` is
``s0 * exp(-(b g'Tg)**alpha)``. Optional Rician noise is added as
``sqrt((S + n1)**2 + n2**2)`` with ``n1, n2 ~ N(0, (s0/SNR)**2)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .acquisition import GradientScheme, effective_diffusion_time
from .exceptions import DataError
from .qspace import moment_analytic
from .sphere import electrostatic_directions, lebedev
from .volume_io import Volume4D

# delta/Delta = 29/58 ms (in vivo human protocol) and 4/14 ms (ex vivo rat)
HUMAN_TAU = effective_diffusion_time(0.029, 0.058)
EXVIVO_TAU = effective_diffusion_time(0.004, 0.014)
HUMAN_SHELLS = tuple(range(200, 3001, 200))
HUMAN_SUBSET = (200, 1000, 1800, 2400, 3000)
SWEEP_SHELLS = (1000, 2000, 3000, 3400, 3800, 4200, 4600, 5000)


def multishell_scheme(shells, n_directions=33, n_b0=1, tau=HUMAN_TAU, directions=None):
    """Scheme with ``n_b0`` baselines then the same direction table on every shell."""
    dirs = electrostatic_directions(n_directions) if directions is None else np.asarray(directions, float)
    vecs = [np.zeros((n_b0, 3))] + [dirs] * len(shells)
    bvals = [np.zeros(n_b0)] + [np.full(dirs.shape[0], float(b)) for b in shells]
    return GradientScheme(np.vstack(vecs), np.concatenate(bvals), tau)


def human_scheme(shells=HUMAN_SUBSET, n_directions=33, tau=HUMAN_TAU):
    return multishell_scheme(shells, n_directions, 1, tau)


def tensor_from_eigen(eigenvalues, euler_deg=(0.0, 0.0, 0.0)):
    """Symmetric tensor with the given eigenvalues, rotated by z-y-x Euler angles."""
    R = Rotation.from_euler("zyx", euler_deg, degrees=True).as_matrix()
    return R @ np.diag(np.asarray(eigenvalues, dtype=float)) @ R.T


@dataclass
class Region:
    tensor: np.ndarray
    alpha: float
    mask: object = None  # None (all voxels), bool array, or callable(i, j, k) -> bool array
    name: str = ""

    def voxel_mask(self, dims):
        if self.mask is None:
            return np.ones(dims, dtype=bool)
        if callable(self.mask):
            return np.asarray(self.mask(*np.indices(dims)), dtype=bool)
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != tuple(dims):
            raise DataError(f"region mask shape {m.shape} does not match dims {tuple(dims)}")
        return m


@dataclass
class PhantomSpec:
    dims: tuple
    regions: list
    scheme: GradientScheme
    s0: float = 1000.0
    noise: str = "none"
    snr: float | None = None
    seed: int = 0
    voxel_size: tuple = (2.5, 2.5, 2.5)

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DataError(f"dims must be three positive integers, got {self.dims}")
        if not self.s0 > 0:
            raise DataError("s0 must be positive")
        if not self.regions:
            raise DataError("phantom needs at least one region")
        for r in self.regions:
            T = np.asarray(r.tensor, dtype=float)
            if T.shape != (3, 3) or not np.allclose(T, T.T, rtol=0, atol=1e-15):
                raise DataError(f"region {r.name!r}: tensor must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(T).min() <= 0:
                raise DataError(f"region {r.name!r}: tensor is not positive definite")
            if not 0 < r.alpha <= 1:
                raise DataError(f"region {r.name!r}: alpha must lie in (0, 1]")
        if self.noise not in ("none", "rician"):
            raise DataError(f"unknown noise model {self.noise!r}")
        if self.noise == "rician" and not (self.snr and self.snr > 0):
            raise DataError("rician noise requires SNR > 0")


@dataclass
class PhantomTruth:
    tensor: np.ndarray  # (X, Y, Z, 3, 3)
    alpha: np.ndarray
    labels: np.ndarray  # region index per voxel
    rtop: np.ndarray
    qmsd: np.ndarray
    qmfd: np.ndarray
    region_names: list = field(default_factory=list)

    def direction_diffusivity(self, directions):
        """Ground-truth D(g) = g'Tg per voxel for each given direction."""
        return np.einsum("ki,...ij,kj->...k", directions, self.tensor, directions)


def region_labels(spec):
    labels = np.full(spec.dims, -1, dtype=int)
    for i, region in enumerate(spec.regions):
        labels[region.voxel_mask(spec.dims)] = i
    if np.any(labels < 0):
        raise DataError(f"regions leave {int((labels < 0).sum())} voxel(s) uncovered")
    return labels


def rician(signal, sigma, seed):
    """Add Rician noise with one counter-based stream per voxel.

    Voxel ``v`` (C order over the spatial axes) draws from Philox keyed by
    ``seed`` with its counter's high word set to ``v``, so the result does not
    depend on evaluation order.
    """
    signal = np.asarray(signal, dtype=float)
    flat = signal.reshape(-1, signal.shape[-1])
    out = np.empty_like(flat)
    for v in range(flat.shape[0]):
        rng = np.random.Generator(np.random.Philox(counter=[0, 0, 0, v], key=int(seed)))
        n = rng.normal(0.0, sigma, (2, flat.shape[1]))
        out[v] = np.sqrt((flat[v] + n[0]) ** 2 + n[1] ** 2)
    return out.reshape(signal.shape)


def generate_phantom(spec):
    """Simulate the acquisition described by ``spec``.

    Later regions override earlier ones where they overlap; every voxel must
    be covered. Truth moments use a 131st-order Lebedev rule.

    Returns
    -------
    (Volume4D, PhantomTruth)
    """
    spec.validate()
    labels = region_labels(spec)
    scheme = spec.scheme
    dims = tuple(spec.dims)
    data = np.empty(dims + (scheme.n_measurements,))
    tensor = np.empty(dims + (3, 3))
    alpha = np.empty(dims)
    truth = {name: np.empty(dims) for name in ("rtop", "qmsd", "qmfd")}
    rule = lebedev(131)
    for i, region in enumerate(spec.regions):
        m = labels == i
        if not m.any():
            continue
        T = np.asarray(region.tensor, dtype=float)
        d = np.einsum("ni,ij,nj->n", scheme.directions, T, scheme.directions)
        data[m] = spec.s0 * np.exp(-((scheme.bvals * d) ** region.alpha))
        tensor[m] = T
        alpha[m] = region.alpha
        dfn = lambda g, T=T: np.einsum("ni,ij,nj->n", g, T, g)  # noqa: E731
        for name, n in (("rtop", 0), ("qmsd", 2), ("qmfd", 4)):
            truth[name][m] = moment_analytic(dfn, region.alpha, scheme.tau, n, rule).value
    if spec.noise == "rician":
        data = rician(data, spec.s0 / spec.snr, spec.seed)
    affine = np.diag([*spec.voxel_size, 1.0])
    vol = Volume4D(data, affine, header={"descrip": "stretchq phantom"})
    return vol, PhantomTruth(tensor, alpha, labels, truth["rtop"], truth["qmsd"], truth["qmfd"],
                             [r.name for r in spec.regions])


# ---------------------------------------------------------------------------
# presets and JSON


def default_regions(dims):
    """Three tissue-like regions: anisotropic background, core, and a CSF-like box."""
    X, Y, Z = dims
    core = lambda i, j, k: (np.abs(i - (X - 1) / 2) < X / 4) & (np.abs(j - (Y - 1) / 2) < Y / 4)  # noqa: E731
    edge = lambda i, j, k: (i < max(1, X // 8)) & (j < max(1, Y // 8))  # noqa: E731
    return [
        Region(tensor_from_eigen([1.7e-3, 0.35e-3, 0.3e-3], (30, 20, 10)), 0.75, None, "wm"),
        Region(tensor_from_eigen([0.9e-3, 0.8e-3, 0.75e-3], (-40, 60, 0)), 0.85, core, "gm"),
        Region(tensor_from_eigen([2.2e-3, 2.1e-3, 2.0e-3]), 0.95, edge, "csf"),
    ]


def mild_regions(dims):
    """One region per x slab: FA below ~0.25, mean diffusivity and alpha varying smoothly."""
    X = dims[0]
    regions = []
    for i in range(X):
        t = i / max(X - 1, 1)
        md = 0.6e-3 + 0.5e-3 * t
        ev = md * np.array([1.0 + 0.3 * (1 - t), 1.0 - 0.1 * (1 - t), 1.0 - 0.2 * (1 - t)])
        regions.append(Region(tensor_from_eigen(ev, (25 * i, 15, 5 * i)), 0.7 + 0.25 * t,
                              lambda a, b, c, i=i: a == i, f"slab{i}"))
    return regions


def preset_spec(name="human", dims=(16, 16, 4), noise="none", snr=None, seed=0, s0=1000.0):
    """Named phantom configurations.

    ``human``: five shells b = 200..3000, 33 directions, tau from 29/58 ms.
    ``sweep``: shells 1000, 2000, 3000 then up to 5000 in steps of 400.
    ``two-region``: human protocol; isotropic alpha = 1 core in an
    anisotropic alpha = 0.7 background.
    ``mild``: human protocol; weakly anisotropic slabs along x.
    """
    if name == "human":
        scheme, regions = human_scheme(), default_regions(dims)
    elif name == "sweep":
        scheme = multishell_scheme(SWEEP_SHELLS, 33, 1, HUMAN_TAU)
        regions = [
            Region(tensor_from_eigen([1.5e-3, 0.4e-3, 0.35e-3], (20, 35, 0)), 0.7, None, "aniso"),
            Region(tensor_from_eigen([0.8e-3, 0.7e-3, 0.6e-3], (0, 0, 45)), 0.7,
                   lambda i, j, k: i >= dims[0] // 2, "iso"),
        ]
    elif name == "two-region":
        scheme = human_scheme()
        regions = [
            Region(tensor_from_eigen([1.5e-3, 0.4e-3, 0.35e-3], (20, 35, 0)), 0.7, None, "aniso"),
            Region(0.7e-3 * np.eye(3), 1.0, lambda i, j, k: i >= dims[0] // 2, "iso"),
        ]
    elif name == "mild":
        scheme, regions = human_scheme(), mild_regions(dims)
    else:
        raise DataError(f"unknown phantom preset {name!r}")
    return PhantomSpec(tuple(dims), regions, scheme, s0, noise, snr, seed)


def _region_from_dict(d, dims):
    if "tensor" in d:
        T = np.asarray(d["tensor"], dtype=float).reshape(3, 3)
    else:
        T = tensor_from_eigen(d["eigenvalues"], d.get("euler_deg", (0, 0, 0)))
    mask = None
    if "box" in d:
        (x0, x1), (y0, y1), (z0, z1) = d["box"]
        mask = lambda i, j, k: (i >= x0) & (i < x1) & (j >= y0) & (j < y1) & (k >= z0) & (k < z1)  # noqa: E731
    elif "sphere" in d:
        c = np.asarray(d["sphere"]["center"], dtype=float)
        r2 = float(d["sphere"]["radius"]) ** 2
        mask = lambda i, j, k: (i - c[0]) ** 2 + (j - c[1]) ** 2 + (k - c[2]) ** 2 <= r2  # noqa: E731
    return Region(T, float(d["alpha"]), mask, d.get("name", ""))


def spec_from_dict(d):
    """Build a PhantomSpec from its JSON form.

    Either ``"preset"`` (plus optional ``dims``, ``noise``, ``seed``) or an
    explicit description with ``dims``, ``regions`` and ``protocol``.
    """
    noise = d.get("noise", "none")
    if isinstance(noise, dict):
        noise_type, snr = noise.get("type", "none"), noise.get("snr")
    else:
        noise_type, snr = noise, d.get("snr")
    dims = tuple(d.get("dims", (16, 16, 4)))
    seed = int(d.get("seed", 0))
    s0 = float(d.get("s0", 1000.0))
    if "preset" in d:
        return preset_spec(d["preset"], dims, noise_type, snr, seed, s0)
    proto = d.get("protocol", {})
    if "tau" in proto:
        tau = float(proto["tau"])
    elif "small_delta" in proto:
        tau = effective_diffusion_time(float(proto["small_delta"]), float(proto["big_delta"]))
    else:
        tau = HUMAN_TAU
    scheme = multishell_scheme(
        proto.get("shells", HUMAN_SUBSET), int(proto.get("n_directions", 33)), int(proto.get("n_b0", 1)), tau
    )
    regions = [_region_from_dict(r, dims) for r in d["regions"]]
    return PhantomSpec(dims, regions, scheme, s0, noise_type, snr, seed,
                       tuple(d.get("voxel_size", (2.5, 2.5, 2.5))))


def load_spec(path):
    with open(path) as fh:
        return spec_from_dict(json.load(fh))
