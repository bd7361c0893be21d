"""Comparisons between measure maps: correlations and b_max sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .acquisition import group_shells, match_directions
from .exceptions import DataError, UnderdeterminedFitError
from .fitting import fit_stretched_volume
from .qspace import MEASURES, compute_gaussian_maps, compute_maps

logger = logging.getLogger(__name__)

SWEEP_CONFIGS = ("stretched_fixed", "stretched_bmax", "gaussian_bmax")


def _paired(map_a, map_b, mask):
    a = np.asarray(map_a, dtype=float)
    b = np.asarray(map_b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"map shapes differ: {a.shape} vs {b.shape}")
    sel = np.isfinite(a) & np.isfinite(b)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape:
            raise DataError(f"mask shape {m.shape} does not match maps {a.shape}")
        sel &= m
    return a[sel], b[sel]


def pearson(map_a, map_b, mask=None):
    """Sample Pearson correlation over masked voxels finite in both maps.

    Raises
    ------
    DataError
        Fewer than two usable voxels, or a map with zero variance.
    """
    a, b = _paired(map_a, map_b, mask)
    if a.size < 2:
        raise DataError(f"need at least 2 usable voxels, got {a.size}")
    scale_a, scale_b = np.max(np.abs(a)), np.max(np.abs(b))
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(np.dot(a, a)), np.sqrt(np.dot(b, b))
    # a constant map leaves only rounding residue after centering
    tiny = 1e-13 * np.sqrt(a.size)
    if na <= tiny * scale_a or nb <= tiny * scale_b:
        raise DataError("zero variance: correlation undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def correlation_matrix(maps, mask=None):
    """Pairwise Pearson matrix for a dict of equally shaped maps.

    Returns
    -------
    names : list of str
    rho : ndarray, shape (n, n)
    """
    names = list(maps)
    rho = np.eye(len(names))
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            rho[i, j] = rho[j, i] = pearson(maps[names[i]], maps[names[j]], mask)
    return names, rho


def correlation_rows(names, rho):
    return [{"map": n, **{m: float(rho[i, j]) for j, m in enumerate(names)}} for i, n in enumerate(names)]


def scatter_pairs(maps, mask=None):
    """Per-voxel values of every map where all of them are finite.

    Rows carry the voxel index so external tools can rebuild correlograms.
    """
    names = list(maps)
    arrs = [np.asarray(maps[n], dtype=float) for n in names]
    sel = np.ones(arrs[0].shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    for a in arrs:
        sel &= np.isfinite(a)
    idx = np.argwhere(sel)
    rows = []
    for i, j, k in idx:
        row = {"i": int(i), "j": int(j), "k": int(k)}
        row.update({n: float(a[i, j, k]) for n, a in zip(names, arrs)})
        rows.append(row)
    return ["i", "j", "k"] + names, rows


# ---------------------------------------------------------------------------
# b_max sweep


@dataclass
class SweepResult:
    """Stability of measures as the largest fitted b-value grows.

    ``changes[config][measure][k]`` is the mean over masked voxels of
    ``|map(b_max[k+1]) - map(b_max[k])|``; ``levels`` holds the mean map
    value at each b_max.
    """

    b_max: list
    changes: dict
    levels: dict
    b_eval: float
    estimator: str = "direct"
    reference: str = "consecutive"
    configs: tuple = SWEEP_CONFIGS
    maps: dict = field(default_factory=dict, repr=False)

    def rows(self):
        out = []
        for cfg in self.configs:
            for name, _ in MEASURES:
                for k, change in enumerate(self.changes[cfg][name]):
                    out.append({
                        "config": cfg, "measure": name,
                        "b_max_from": self.b_max[k], "b_max_to": self.b_max[k + 1],
                        "mean_abs_change": float(change),
                        "mean_from": float(self.levels[cfg][name][k]),
                        "mean_to": float(self.levels[cfg][name][k + 1]),
                    })
        return out


SWEEP_FIELDS = ("config", "measure", "b_max_from", "b_max_to", "mean_abs_change", "mean_from", "mean_to")


def _mean_abs_change(a, b, mask):
    x, y = _paired(a, b, mask)
    return float(np.mean(np.abs(y - x))) if x.size else np.nan


def bmax_sweep(data, scheme, b_max_list, mask=None, b_eval=3000.0, estimator="direct",
               configs=SWEEP_CONFIGS, options=None, threads=1, b_tolerance=25.0, keep_maps=False):
    """Refit with shells up to each b_max and track how the measures move.

    Configurations: ``stretched_fixed`` evaluates the stretched estimator at
    ``b_eval``, ``stretched_bmax`` at the b_max shell itself, and
    ``gaussian_bmax`` applies the alpha = 1 single-shell estimator to the
    b_max shell data.

    Raises
    ------
    DataError
        A b_max that is not an acquired shell.
    UnderdeterminedFitError
        A b_max leaving fewer than two diffusion-weighted shells.
    """
    data = np.asarray(data, dtype=float)
    for cfg in configs:
        if cfg not in SWEEP_CONFIGS:
            raise ValueError(f"unknown sweep configuration {cfg!r}; choose from {SWEEP_CONFIGS}")
    grouping = group_shells(scheme, b_tolerance)
    bundles = match_directions(scheme, grouping)
    centers = grouping.shell_b_centers
    b_max_list = [float(b) for b in b_max_list]
    subsets = []
    for bm in b_max_list:
        if not np.any(np.abs(centers - bm) <= b_tolerance):
            raise DataError(f"b_max = {bm:g} is not an acquired shell")
        subset = centers[centers <= bm + b_tolerance]
        if subset.size < 2:
            raise UnderdeterminedFitError(f"b_max = {bm:g} leaves {subset.size} shell(s); need >= 2")
        subsets.append(subset)

    maps = {cfg: [] for cfg in configs}
    fit_mask = mask
    for bm, subset in zip(b_max_list, subsets):
        logger.info("sweep: fitting shells %s", ", ".join(f"{b:g}" for b in subset))
        if "stretched_fixed" in configs or "stretched_bmax" in configs:
            fit = fit_stretched_volume(data, scheme, bundles, fit_mask, subset, options, threads,
                                       b_tolerance=b_tolerance)
            if "stretched_fixed" in configs:
                maps["stretched_fixed"].append(compute_maps(fit, b_eval, estimator, b_tolerance=b_tolerance))
            if "stretched_bmax" in configs:
                maps["stretched_bmax"].append(compute_maps(fit, bm, estimator, b_tolerance=b_tolerance))
        if "gaussian_bmax" in configs:
            maps["gaussian_bmax"].append(compute_gaussian_maps(data, scheme, bm, fit_mask, b_tolerance=b_tolerance))

    changes, levels = {}, {}
    for cfg in configs:
        changes[cfg], levels[cfg] = {}, {}
        for name, _ in MEASURES:
            series = [getattr(m, name) for m in maps[cfg]]
            levels[cfg][name] = np.array([np.nanmean(s if mask is None else s[np.asarray(mask, bool)])
                                          for s in series])
            changes[cfg][name] = np.array([_mean_abs_change(series[k], series[k + 1], mask)
                                           for k in range(len(series) - 1)])
    return SweepResult(b_max_list, changes, levels, float(b_eval), estimator, "consecutive", tuple(configs),
                       maps if keep_maps else {})
