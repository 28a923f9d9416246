"""Feature importance from the pullback metric's per-segment eigenvalues.

Each input segment (an image patch here) owns a contiguous hidden-size block
of embedding coordinates. The largest eigenvalue of the metric's diagonal
block over a segment equals the squared spectral norm of the Jacobian
restricted to that segment: the strongest first-order output response to
moving that segment alone. Higher score, more sensitive segment.
"""
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import format_csv
from .network import Network, NetworkError, forward
from .geometry import pullback_metric

Array = np.ndarray


@dataclass(frozen=True)
class ImportanceMap:
    """Non-negative score per segment, with optional image-grid layout."""

    scores: Array
    grid: tuple[int, int] | None = None  # (rows, cols) of the patch grid
    patch_size: int | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("scores must be a finite non-negative vector")
        object.__setattr__(self, "scores", s)
        if self.grid is not None and self.grid[0] * self.grid[1] != s.size:
            raise ValueError("grid does not match the number of segments")

    def to_csv(self) -> str:
        return format_csv(["segment", "score"],
                          [[i, v] for i, v in enumerate(self.scores)])

    @staticmethod
    def from_csv(text: str) -> "ImportanceMap":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        return ImportanceMap(np.array([float(r[1]) for r in rows]))


@dataclass(frozen=True)
class GroundTruth:
    """Per-token annotation averages in [0, 1]."""

    tokens: tuple[str, ...]
    values: Array

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("annotation averages must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def load_ground_truth(path) -> list[GroundTruth]:
    """Parse the line-delimited format: <token> <score> per line, blank lines
    separate sentences."""
    sentences, tokens, values = [], [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            if tokens:
                sentences.append(GroundTruth(tuple(tokens), np.array(values)))
                tokens, values = [], []
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise ValueError(f"bad ground-truth line: {raw!r}")
        tokens.append(parts[0])
        values.append(float(parts[1]))
    if tokens:
        sentences.append(GroundTruth(tuple(tokens), np.array(values)))
    if not sentences:
        raise ValueError("ground-truth file holds no sentences")
    return sentences


def feature_importance(net: Network, x) -> ImportanceMap:
    """Score every segment by the top eigenvalue of its diagonal metric block."""
    if net.embed_shape is None:
        raise NetworkError("network has no (tokens, hidden) embedding layout")
    tokens, hidden = net.embed_shape
    acts = forward(net, x)
    e = acts.at(net.embed_boundary)
    g = pullback_metric(net, e, from_layer=net.embed_boundary).matrix
    scores = np.empty(tokens)
    for i in range(tokens):
        block = g[i * hidden:(i + 1) * hidden, i * hidden:(i + 1) * hidden]
        top = np.linalg.eigvalsh(block)[-1]
        scores[i] = max(float(top), 0.0)  # clip eigensolver noise on PSD blocks
    grid = None
    patch = None
    for layer in net.layers[: net.embed_boundary]:
        if hasattr(layer, "grid") and hasattr(layer, "patch_size"):
            grid = (layer.grid, layer.grid)
            patch = layer.patch_size
    return ImportanceMap(scores=scores, grid=grid, patch_size=patch)


def _minmax(v: Array) -> tuple[Array, bool]:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v), True
    return (v - lo) / (hi - lo), False


def importance_heatmap(imap: ImportanceMap, normalization: str = "linear") -> Array:
    """Render scores as a grayscale image, one constant block per patch.

    Scores are min-max normalized to [0, 1] (optionally on a log scale);
    all-equal scores degenerate to uniform mid-gray.
    """
    if imap.grid is None or imap.patch_size is None:
        raise ValueError("importance map has no image-grid layout")
    if normalization not in ("linear", "log"):
        raise ValueError("normalization must be 'linear' or 'log'")
    values = imap.scores
    if normalization == "log":
        floor = values.max() * 1e-12 if values.max() > 0 else 1.0
        values = np.log(np.maximum(values, floor))
    norm, degenerate = _minmax(values)
    if degenerate:
        norm = np.full_like(norm, 0.5)
    tile = norm.reshape(imap.grid)
    return np.kron(tile, np.ones((imap.patch_size, imap.patch_size)))


def cosine_similarity_eval(pred, truth) -> float:
    """Cosine similarity after min-max normalizing both score vectors to [0, 1].

    A vector that collapses to all zeros after normalization makes the score
    undefined; it is reported as 0.0 with a warning.
    """
    p = np.asarray(pred.scores if isinstance(pred, ImportanceMap) else pred, dtype=np.float64)
    t = np.asarray(truth.values if isinstance(truth, GroundTruth) else truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("prediction and ground truth must be equal-length vectors")
    pn, p_flat = _minmax(p)
    tn, t_flat = _minmax(t)
    if p_flat or t_flat or not pn.any() or not tn.any():
        warnings.warn("degenerate score vector after normalization; similarity set to 0",
                      stacklevel=2)
        return 0.0
    return float(pn @ tn / (np.linalg.norm(pn) * np.linalg.norm(tn)))
