"""Figures written next to the metrics files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "savefig.dpi": 150,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curves(runs: dict, path) -> None:
    """Three panels per run: same-class distance, test accuracy, test CE.

    ``runs`` maps a legend label to a list of MetricsRecord.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
        panels = [("same_class_distance", "normalized same-class distance"),
                  ("test_acc", "test accuracy"), ("test_ce", "test cross-entropy")]
        for ax, (key, label) in zip(axes, panels):
            for name, records in runs.items():
                ax.plot([r.epoch for r in records], [getattr(r, key) for r in records], label=name)
            ax.set_xlabel("epoch")
            ax.set_ylabel(label)
        axes[0].legend(frameon=False)
        _save(fig, path)


def plot_sweep(rows: list[dict], path) -> None:
    rows = [r for r in rows if r.get("final_acc") is not None]
    if not rows:
        return
    lams = [r["lambda"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6, 2.6))
        a1.plot(lams, [r["final_acc"] for r in rows], "o-")
        a1.set_xlabel("lambda")
        a1.set_ylabel("final test accuracy")
        a2.plot(lams, [r["final_ce"] for r in rows], "o-", color="C3")
        a2.set_xlabel("lambda")
        a2.set_ylabel("final test CE")
        _save(fig, path)


def plot_diagnostics(reports, path) -> None:
    """Modality mass against separation and outlier gradient norm against distance."""
    by_name = {r.name: r for r in reports}
    mod, bound_report = by_name.get("modality_alignment"), by_name.get("gradient_bound")
    if mod is None and bound_report is None:
        return
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.5, 2.6))
        if mod is not None:
            ax = axes[0]
            ax.semilogy(mod.measured["ladder"], [max(v, 1e-300) for v in mod.measured["ladder_mass"]], "o-")
            ax.axhline(mod.tolerances["cross_mode_mass"], ls="--", color="0.5")
            ax.set_xlabel("mode separation / std")
            ax.set_ylabel("cross-mode weight")
        if bound_report is not None:
            ax = axes[1]
            norms = [max(v, 1e-300) for v in bound_report.measured["ladder_grad_norms"]]
            ax.semilogy(bound_report.measured["ladder"], norms, "s-", color="C2")
            ax.set_xlabel("outlier distance / sqrt(sigma)")
            ax.set_ylabel("matching gradient norm")
        _save(fig, path)
