"""Figure rendering for scenario reports.

Everything draws through the Agg backend into files; nothing opens a
window. Figures are a human-oriented companion to the machine-readable
reports and are not covered by the byte-determinism contract (PNG
encoders embed library metadata).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 130


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def strategy_figure(path, times, series_by_agent, utility_kind):
    """Per-agent strategy series against time.

    ``series_by_agent`` maps a label to either a 1-D series (proportions,
    or a single coefficient) or a dict of named coefficient series
    (feedback amounts).
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, series in series_by_agent.items():
        if isinstance(series, dict):
            for name, values in series.items():
                style = "-" if name == "intercept" else "--"
                ax.plot(times, values, style, label=f"{label} {name}")
        else:
            ax.plot(times, series, label=label)
    ylabel = "amount coefficient" if utility_kind == "cara" else "proportion of wealth"
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.set_title("equilibrium strategies")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def deviation_figure(path, reports):
    """Payoff gap against shift size with 2-SE error bars, one panel per agent."""
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 3.6), squeeze=False)
    for ax, rep in zip(axes[0], reports):
        eps = [row["epsilon"] for row in rep["sweep"]]
        diff = [row["diff"] for row in rep["sweep"]]
        err = [2.0 * row["diff_se"] for row in rep["sweep"]]
        ax.errorbar(eps, diff, yerr=err, fmt="o", capsize=3)
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.set_xlabel("constant shift")
        ax.set_ylabel("payoff gap vs equilibrium")
        ax.set_title(f"agent {rep['agent']} ({rep['verdict']})")
        ax.grid(alpha=0.3)
    return _save(fig, path)


def martingale_figure(path, times, means, rows):
    """Deflated-process sample means with the fitted drift lines."""
    times = np.asarray(times, dtype=float)
    means = np.asarray(means, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    for row in rows:
        j = row["agent"]
        curve = means[j]
        ax.plot(times, curve, label=f"agent {j} (slope {row['slope']:+.2e})")
        anchor = curve.mean() - row["slope"] * times.mean()
        ax.plot(times, anchor + row["slope"] * times, "--", lw=0.9,
                color=ax.get_lines()[-1].get_color())
    ax.set_xlabel("t")
    ax.set_ylabel("deflated process mean")
    ax.set_title("drift diagnostic")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def convergence_figure(path, result):
    """Median gap to the limiting constant against population size."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(result["n_values"], result["median_gap"], "o-")
    ax.set_xlabel("population size n")
    ax.set_ylabel("median |C1 - K1|")
    ax.set_title(f"approach to the limit (K1 = {result['K1']:.4f})")
    ax.grid(alpha=0.3, which="both")
    return _save(fig, path)
