"""PNG figures for the report directory, rendered headless with matplotlib's Agg canvas."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .records import EvalRecord

_PANELS = (("original", "before compression"), ("proposed", "after compression"))


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    # no Software chunk, so identical data gives identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def plot_curves(cells: Sequence[EvalRecord], path: str | Path) -> Path:
    """Detection rate against adversary data access, one panel per compression phase."""
    fig = Figure(figsize=(10, 4))
    axes = fig.subplots(1, 2, sharey=True)
    attacks = sorted({c.attack for c in cells})
    for ax, (state, title) in zip(axes, _PANELS):
        for kind in attacks:
            pts = sorted((c.p, c.adr) for c in cells if c.state == state and c.attack == kind and c.adr is not None)
            if pts:
                ax.plot([p for p, _ in pts], [100 * a for _, a in pts], marker="o", label=kind.upper())
        ax.set_title(title)
        ax.set_xlabel("adversary data access (%)")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("detection rate (%)")
    axes[0].legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_table(rows: Sequence[EvalRecord], path: str | Path) -> Path:
    """Serialized size and clean accuracy per model state. Latency is left to the CSV."""
    fig = Figure(figsize=(9, 3.5))
    ax_size, ax_acc = fig.subplots(1, 2)
    names = [r.state for r in rows]
    ax_size.bar(names, [r.size_bytes / 1e6 for r in rows], color="tab:blue")
    ax_size.set_ylabel("size (MB)")
    ax_acc.bar(names, [100 * (r.accuracy or 0) for r in rows], color="tab:green")
    ax_acc.set_ylabel("clean accuracy (%)")
    lo = min(100 * (r.accuracy or 0) for r in rows)
    ax_acc.set_ylim(max(0, lo - 5), 100)
    for ax in (ax_size, ax_acc):
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    return _save(fig, Path(path))
