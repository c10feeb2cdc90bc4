"""Headless matplotlib figures written as reproducible SVG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"svg.hashsalt": "psdlab", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def draw_psd_panels(pairs, ladder, rows, cols, path, labels=None) -> None:
    sizes = np.array(ladder.openings)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
        for k, ax in enumerate(axes.flat):
            if k >= len(pairs):
                ax.set_visible(False)
                continue
            truth, pred = pairs[k]
            ax.semilogx(sizes, truth, "o-", color="black", label="true")
            ax.semilogx(sizes, pred, "s--", color="tab:red", label="predicted")
            ax.set_ylim(-5, 105)
            ax.set_title(labels[k] if labels else f"sample {k + 1}")
            ax.set_xlabel("sieve opening (um)")
            ax.set_ylabel("% passing")
            ax.grid(True, which="both", alpha=0.3)
        axes.flat[0].legend(loc="upper left")
        fig.tight_layout()
        _save(fig, path)


def draw_sweep_lines(grid, axis: str, path) -> None:
    """RMSE (all sieves) against one axis; one line per combination of the other axes."""
    others = [a for a in grid.axes if a != axis]
    series = {}
    for res in grid.results:
        if res["report"] is None:
            continue
        key = tuple(res["cell"][a] for a in others)
        series.setdefault(key, []).append((res["cell"][axis], res["report"]["rmse_all"]))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        numeric = all(isinstance(v, (int, float)) for v in grid.axes[axis])
        for key, points in sorted(series.items(), key=lambda kv: str(kv[0])):
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            if not numeric:
                xs = [list(grid.axes[axis]).index(x) for x in xs]
            label = ", ".join(f"{a}={v}" for a, v in zip(others, key)) or None
            ax.plot(xs, ys, "o-", label=label)
        if not numeric:
            ax.set_xticks(range(len(grid.axes[axis])), [str(v) for v in grid.axes[axis]])
        ax.set_xlabel(axis)
        ax.set_ylabel("RMSE all sieves (% passing)")
        ax.grid(True, alpha=0.3)
        if others and series:
            ax.legend()
        fig.tight_layout()
        _save(fig, path)


def draw_history(history, path) -> None:
    epochs = np.arange(1, len(history.val_rmse) + 1)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(epochs, history.val_rmse, "o-", label="validation RMSE")
        ax.plot(epochs, np.sqrt(2.0 * np.array(history.train_loss)), "s--", label="training RMSE (batch)")
        if history.best_epoch:
            ax.axvline(history.best_epoch, color="gray", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("% passing")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        _save(fig, path)
