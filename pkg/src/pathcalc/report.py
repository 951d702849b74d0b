"""Figures for CLI runs, rendered from the same tables that go to CSV."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["residual_figures", "asian_figure", "gaussian_figure", "flow_figure",
           "paths_figure", "localtime_figure"]

_RC = {"figure.figsize": (6.0, 3.8), "axes.grid": True, "grid.alpha": 0.3,
       "font.size": 9, "savefig.dpi": 120}


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def residual_figures(out_dir, steps, residuals, rms, formula=""):
    """Histogram of per-path residuals at the finest grid and RMS against
    the step count (log-log, with an ``n^-1/2`` guide)."""
    paths = []
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        r = np.asarray(residuals[max(steps)])
        ax.hist(r, bins=min(50, max(5, r.size // 5)), color="C0", alpha=0.8)
        ax.set_xlabel("per-path residual")
        ax.set_ylabel("count")
        ax.set_title(f"{formula}, n = {max(steps)}")
        paths.append(_save(fig, out_dir, "residual_hist.png"))
        if len(steps) > 1:
            fig, ax = plt.subplots()
            s = np.array(sorted(steps), dtype=float)
            v = np.array([rms[int(n)] for n in s])
            ax.loglog(s, v, "o-", label="RMS residual")
            ax.loglog(s, v[0] * np.sqrt(s[0] / s), "k--", lw=0.8, label=r"$n^{-1/2}$")
            ax.set_xlabel("steps")
            ax.set_ylabel("RMS")
            ax.legend()
            paths.append(_save(fig, out_dir, "residual_rms.png"))
    return paths


def asian_figure(out_dir, times, mean, se, J0, bv):
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        a1.errorbar(times, mean, yerr=3 * se, fmt="o", ms=3, capsize=2, label="mean J(t)")
        a1.axhline(J0, color="k", lw=0.8, label="J(0)")
        a1.set_xlabel("t")
        a1.legend()
        a2.hist(bv, bins=min(40, max(5, len(bv) // 5)), color="C1", alpha=0.8)
        a2.set_xlabel("accumulated BV residual")
        return [_save(fig, out_dir, "asian.png")]


def gaussian_figure(out_dir, eps, gap, se, ref):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.errorbar(eps, gap, yerr=3 * np.asarray(se), fmt="o-", capsize=3)
        ax.set_xscale("log")
        ax.set_xlabel("eps")
        ax.set_ylabel(f"|E F - {ref:.4g}|")
        return [_save(fig, out_dir, "gaussian_limit.png")]


def flow_figure(out_dir, t, y, exact=None):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(t, y, lw=1.2, label="flow")
        if exact is not None:
            ax.plot(t, exact, "k--", lw=0.8, label="closed form")
            ax.legend()
        ax.set_xlabel("t")
        return [_save(fig, out_dir, "flow.png")]


def paths_figure(out_dir, paths, max_paths=20):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for p in paths[:max_paths]:
            ax.step(p.times, p.values[:, 0], where="post", lw=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("X")
        return [_save(fig, out_dir, "paths.png")]


def localtime_figure(out_dir, labels, lhs, lhs_se, bound):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        x = np.arange(len(labels))
        ax.bar(x - 0.2, lhs, 0.4, yerr=3 * np.asarray(lhs_se), label="E|integral|")
        ax.bar(x + 0.2, bound, 0.4, label="norm bound")
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.legend()
        return [_save(fig, out_dir, "localtime_bound.png")]
