"""Static SVG plots: Δφ histograms with fit overlay and R versus θ_ICS.

Plotting is best effort: :func:`safe_plot` logs and swallows any failure so
numeric outputs and exit codes never depend on matplotlib.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SVG_META = {"Date": None, "Creator": "tcsim"}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "tcsim"
    return plt


def safe_plot(fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except Exception as exc:  # plotting must never break a run
        log.warning("plot %s failed: %s", getattr(fn, "__name__", fn), exc)
        return False
    return True


def plot_r_series(series, path, title: str = "R versus θ_ICS") -> None:
    """Overlay R ± σ_R against θ_ICS bin centres for several series."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for k, s in enumerate(series):
        pts = [p for p in s.points if math.isfinite(p.R) and math.isfinite(p.sigma_R)]
        if not pts:
            continue
        x = np.array([p.theta_center for p in pts]) + 0.6 * (k - 0.5 * (len(series) - 1))
        ax.errorbar(x, [p.R for p in pts], yerr=[p.sigma_R for p in pts],
                    xerr=[p.half_width for p in pts], fmt="o", ms=4, capsize=2,
                    label=f"{s.mode} {s.frame} {s.sample}".strip())
    ax.axhline(1.0, color="0.6", lw=0.8, ls=":")
    ax.set_xlabel("θ_ICS (deg)")
    ax.set_ylabel("R")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def plot_dphi_panels(h, series, path, title: str = "", corrected=None) -> None:
    """One panel per θ_ICS slice: histogram as fitted (corrected where the
    point says so) and the fitted A cos 2Δφ + B."""
    plt = _pyplot()
    pts = {p.theta_lo: p for p in series.points}
    n = h.shape[0]
    cols = min(4, n)
    rows = int(math.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.4 * rows), squeeze=False)
    centers = 0.5 * (h.dphi_edges[:-1] + h.dphi_edges[1:])
    fine = np.linspace(-math.pi, math.pi, 241)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        if i >= n:
            ax.axis("off")
            continue
        lo = float(h.theta_edges[i])
        p = pts.get(lo)
        src = corrected if (corrected is not None and p is not None and p.corrected) else h
        ax.errorbar(np.degrees(centers), src.counts[i], yerr=np.sqrt(src.sumw2[i]), fmt=".", ms=3)
        if p is not None and math.isfinite(p.A):
            ax.plot(np.degrees(fine), p.A * np.cos(2 * fine) + p.B, "r-", lw=1)
        label = f"{lo:g}–{float(h.theta_edges[i + 1]):g}°"
        if p is not None:
            label += f"  R={p.R:.2f}±{p.sigma_R:.2f}"
        ax.set_title(label, fontsize=8)
        ax.tick_params(labelsize=7)
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def plot_report(report: dict, acc, mixed: dict, out: Path) -> None:
    from .analysis import RSeries, acceptance_correct

    series = [RSeries.from_dict(s) for s in report["series"]]
    plot_r_series(series, out / "r_vs_theta_ics.svg", f"R versus θ_ICS ({report['mode']})")
    for s in series:
        h = acc.real[(s.frame, s.sample)]
        corr = None
        m = mixed.get((s.frame, s.sample))
        if m is not None:
            corr = _corrected_slices(h, m, acceptance_correct)
        plot_dphi_panels(h, s, out / f"dphi_{s.frame}_{s.sample}.svg",
                         f"{report['mode']} {s.frame} {s.sample}", corr)


def _corrected_slices(h, m, acceptance_correct):
    """Slice-wise corrected copy of ``h``; slices that cannot be corrected stay raw."""
    from .analysis import AnalysisError, Hist2D

    out = Hist2D(h.theta_edges, h.dphi_edges, h.counts.copy(), h.sumw2.copy())
    for i in range(h.shape[0]):
        sub_r = Hist2D(h.theta_edges[i:i + 2], h.dphi_edges, h.counts[i:i + 1], h.sumw2[i:i + 1])
        sub_m = Hist2D(h.theta_edges[i:i + 2], h.dphi_edges, m.counts[i:i + 1], m.sumw2[i:i + 1])
        try:
            c = acceptance_correct(sub_r, sub_m)
        except AnalysisError:
            continue
        out.counts[i] = c.counts[0]
        out.sumw2[i] = c.sumw2[0]
    return out
