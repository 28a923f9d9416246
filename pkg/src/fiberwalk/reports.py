"""Figure rendering for the CLI report paths (written next to the CSV output)."""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.constrained_layout.use": True,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def heatmap_figure(heatmap: np.ndarray, path, title: str = "segment importance") -> Path:
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    im = ax.imshow(heatmap, cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.grid(False)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def spectrum_figure(eigenvalues: np.ndarray, null_count: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.4, 3.0))
    lam = np.asarray(eigenvalues, dtype=float)
    idx = np.arange(lam.size)
    floor = max(lam.max(), 1.0) * 1e-18
    ax.semilogy(idx, np.maximum(lam, floor), ".", markersize=3)
    if null_count:
        ax.axvline(lam.size - null_count - 0.5, color="tab:red", lw=0.8,
                   label=f"null cut ({null_count} null)")
        ax.legend()
    ax.set_xlabel("eigenvalue index (descending)")
    ax.set_ylabel("eigenvalue")
    ax.set_title("pullback metric spectrum")
    return _save(fig, path)


def drift_figure(iters, outputs: np.ndarray, path, mode: str = "") -> Path:
    """Output displacement from the start, per recorded iteration."""
    fig, ax = plt.subplots(figsize=(4.4, 3.0))
    drift = np.linalg.norm(outputs - outputs[0], axis=1)
    ax.plot(iters, drift, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("|output - output_0|")
    ax.set_title(f"output drift{f' ({mode})' if mode else ''}")
    return _save(fig, path)


def trend_figure(iters, istar_values: np.ndarray, changed, path,
                 i_star: int) -> Path:
    """Original-class probability per decoded image, split by whether the
    argmax changed (C) or stayed (S)."""
    fig, ax = plt.subplots(figsize=(4.8, 3.0))
    iters = np.asarray(iters)
    vals = np.asarray(istar_values)
    changed = np.asarray(sorted(changed), dtype=int)
    mask = np.zeros(len(vals), dtype=bool)
    mask[changed] = True
    ax.scatter(iters[~mask], vals[~mask], s=8, label="stable (S)",
               color="tab:blue")
    if mask.any():
        ax.scatter(iters[mask], vals[mask], s=8, label="changed (C)",
                   color="tab:orange")
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"p(class {i_star})")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("prediction trend of the original class")
    ax.legend()
    return _save(fig, path)


def loss_figure(losses, eval_accuracies, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.4, 3.0))
    epochs = np.arange(1, len(losses) + 1)
    ax.plot(epochs, losses, lw=1.2, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    if eval_accuracies:
        ax2 = ax.twinx()
        ax2.plot(epochs[: len(eval_accuracies)], eval_accuracies, lw=1.0,
                 color="tab:green", label="eval accuracy")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1)
        ax2.grid(False)
    ax.set_title("training progress")
    return _save(fig, path)
