"""Matplotlib figures rendered alongside the delimited CLI reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .synthfit import SweepRow

_RC = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}

# Drop the mpl-version tag so identical inputs produce identical bytes.
_PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    fig.savefig(path, metadata=_PNG_METADATA if path.suffix == ".png" else None)
    plt.close(fig)


def plot_stride_sweep(rows: list[SweepRow], path: str | Path) -> None:
    """Decoder error versus stride, composite against the argmax baseline."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        strides = [r.stride for r in rows]
        ax.plot(
            strides,
            [r.argmax_mean_error for r in rows],
            "o-",
            label="argmax decode",
        )
        ax.plot(
            strides,
            [r.composite_mean_error for r in rows],
            "s-",
            label="composite decode",
        )
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xticks(strides, [str(s) for s in strides])
        ax.set_xlabel("stride (px/cell)")
        ax.set_ylabel("mean keypoint error (px)")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_loss_traces(traces: list[tuple[float, ...]], path: str | Path) -> None:
    """Per-instance fit loss curves on a log scale."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for i, trace in enumerate(traces):
            ax.plot(range(len(trace)), trace, lw=1.0, alpha=0.8, label=f"instance {i}")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        if len(traces) <= 8:
            ax.legend()
        fig.tight_layout()
        _save(fig, path)
