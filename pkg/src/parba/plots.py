"""Figure rendering for report output (file-based, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def save_convergence_figure(series: dict[str, list[float]], path,
                            title: str = "Convergence") -> None:
    """Sigma0-vs-iteration curves for one or more runs, written to ``path``.

    Args:
        series: label -> per-iteration sigma0 values (pixels).
        path: output image path (format from the extension, e.g. .png).
        title: figure title.
    """
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for label, values in series.items():
        ax.plot(range(1, len(values) + 1), values, marker="o", markersize=3.5,
                linewidth=1.2, label=label)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel(r"$\sigma_0$ [pixel]")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_deletion_figure(series: dict[str, list[int]], path,
                         title: str = "Deletions per iteration") -> None:
    """Per-iteration deleted-observation counts as step plots."""
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    for label, values in series.items():
        ax.step(range(1, len(values) + 1), values, where="mid", label=label)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("deleted observations")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
