"""Figure rendering for analyzer reports: safe versus broken deployments
per factory, written to an image file alongside the tabular output."""

from __future__ import annotations

from pathlib import Path

from .analyzer import TableRow


def render_safe_broken_figure(rows: list[TableRow], path: str | Path, dpi: int = 150) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    factories = [r for r in rows if r.factory != "total"]
    names = [r.factory for r in factories]
    safe = [r.safe for r in factories]
    broken = [r.broken for r in factories]

    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(names))
    ax.bar(x, safe, width=0.6, label="safe", color="#3a7d44")
    ax.bar(x, broken, width=0.6, bottom=safe, label="broken (worst case)", color="#b3484e")
    for i, r in enumerate(factories):
        ax.annotate(
            f"{r.safe_pct}%",
            (i, r.safe / 2),
            ha="center",
            va="center",
            color="white",
            fontsize=9,
        )
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.set_ylabel("deployments")
    ax.set_title("Deployments adaptable without consumer changes")
    ax.legend(loc="upper right")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=dpi)
    plt.close(fig)
    return out
