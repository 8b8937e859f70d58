"""Report figures, rendered off-screen to files."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "smfg",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, metadata={"Software": None} if path.suffix == ".png" else None)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def plot_sweep(sweep, path, reference=None, title=None) -> Path:
    """Value against tolerance, with detected jumps marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.step(sweep.epsilons, sweep.values, where="post", lw=1.2, label="solver")
        ax.plot(sweep.epsilons, sweep.values, ".", ms=3, color="C0")
        if reference is not None:
            ax.plot(sweep.epsilons, [reference(e) for e in sweep.epsilons], "--", lw=0.9,
                    color="C1", label="closed form")
        for j in sweep.jumps:
            ax.plot([j.right_epsilon], [j.left_value], "o", mfc="white", color="C3")
            ax.plot([j.right_epsilon], [j.right_value], "o", color="C3")
        ax.set_xlabel("equilibrium tolerance")
        ax.set_ylabel("leader value")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_bound_ratios(reports, path) -> Path:
    """Observed over bound ratios per time step and for the follower value."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, rep in enumerate(reports):
            ts = [row["t"] for row in rep.flow or []]
            ax.plot(ts, [row["ratio"] for row in rep.flow or []], "-", lw=0.6, alpha=0.6,
                    color="C0", label="flow" if i == 0 else None)
            if rep.value is not None:
                ax.plot([rep.T + 0.5], [rep.value["ratio"]], "x", color="C1",
                        label="value" if i == 0 else None)
        ax.axhline(1.0, color="k", lw=0.8)
        ax.set_xlabel("time step (value ratio at right)")
        ax.set_ylabel("observed / bound")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_relaxed(rows, path) -> Path:
    """Relaxed-action gap as the perturbation and relaxation shrink."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        eps = [r["epsilon_prime"] for r in rows]
        ax.plot(eps, [r["gap"] for r in rows], "o-", lw=1.0)
        ax.set_xscale("log")
        ax.invert_xaxis()
        ax.set_xlabel("relaxation (shrinking with the perturbation)")
        ax.set_ylabel("true value gap")
        fig.tight_layout()
        return _save(fig, path)
