"""Figures written next to the CSV outputs (matplotlib, file backend only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import pearson  # noqa: E402
from .qspace import MEASURES  # noqa: E402

UNITS = {"rtop": "mm$^{-3}$", "qmsd": "mm$^{-5}$", "qmfd": "mm$^{-7}$"}


def _save(fig, path):
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def plot_map_panels(qmaps, path, index=None, title=None):
    """Axial slice of each measure side by side."""
    index = qmaps.rtop.shape[2] // 2 if index is None else index
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, (name, arr) in zip(axes, qmaps.items()):
        sl = np.asarray(arr)[:, :, index].T
        finite = sl[np.isfinite(sl)]
        lo, hi = np.percentile(finite, [2, 98]) if finite.size else (0.0, 1.0)
        im = ax.imshow(np.ma.masked_invalid(sl), origin="lower", cmap="gray", vmin=lo, vmax=hi)
        ax.set_title(f"{name.upper()} [{UNITS[name]}]")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, format="%.2e")
    meta = qmaps.metadata
    fig.suptitle(title or f"{meta.get('estimator', '')} estimator, b = {meta.get('shell_b')}")
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(result, path):
    """Mean absolute change between consecutive b_max values, one panel per measure."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
    x = np.asarray(result.b_max[1:], dtype=float)
    for ax, (name, _) in zip(axes, MEASURES):
        for cfg in result.configs:
            y = np.asarray(result.changes[cfg][name], dtype=float)
            ax.plot(x, y, marker="o", label=cfg)
        ax.set_yscale("symlog", linthresh=max(1e-12, 1e-6 * np.nanmax(np.abs(result.levels[result.configs[0]][name]))))
        ax.set_xlabel("b_max [s/mm$^2$]")
        ax.set_ylabel(f"mean |change| [{UNITS[name]}]")
        ax.set_title(name.upper())
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_correlogram(maps, path, mask=None, max_points=5000):
    """Pairwise scatter plots with Pearson coefficients above the diagonal."""
    names = list(maps)
    n = len(names)
    fig, axes = plt.subplots(n, n, figsize=(2.4 * n, 2.4 * n), squeeze=False)
    sel = np.ones(np.asarray(maps[names[0]]).shape, dtype=bool) if mask is None else np.asarray(mask, bool).copy()
    for nm in names:
        sel &= np.isfinite(maps[nm])
    vals = {nm: np.asarray(maps[nm])[sel] for nm in names}
    step = max(1, int(sel.sum()) // max_points)
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if i == j:
                ax.hist(vals[a], bins=30, color="0.4")
                ax.set_title(a, fontsize=9)
            elif i > j:
                ax.plot(vals[b][::step], vals[a][::step], ".", ms=2, color="k")
            else:
                try:
                    rho = pearson(maps[a], maps[b], sel)
                    ax.text(0.5, 0.5, f"{rho:.3f}", ha="center", va="center", fontsize=14)
                except ValueError:
                    ax.text(0.5, 0.5, "n/a", ha="center", va="center")
    fig.tight_layout()
    _save(fig, path)
