"""Decode explored embeddings back to images and track prediction changes.

The patch projection is affine and, when hidden size >= pixels per patch and
the projection is full column rank, has an exact left inverse through the
Moore-Penrose pseudoinverse. Decoding caps each recorded embedding to the
envelope of real-data embeddings, inverts it to patch pixels, and splices only
the explored segments into the original image.
"""
from dataclasses import dataclass

import numpy as np

from .explore import FeasibleBounds, Trajectory, project_feasible
from .fileio import format_csv
from .layers import PatchEmbed, PositionalAdd, softmax
from .network import Network, NetworkError, evaluate

Array = np.ndarray


@dataclass(frozen=True)
class DecodedBatch:
    """Images decoded from one trajectory, with class distributions."""

    images: Array       # (n, side*side) in [0, 1]
    predictions: Array  # (n, classes), rows sum to 1
    iters: tuple[int, ...]
    source: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.predictions.shape[0]:
            raise ValueError("images and predictions disagree in count")
        if np.any(self.images < 0.0) or np.any(self.images > 1.0):
            raise ValueError("decoded pixels must lie in [0, 1]")
        sums = self.predictions.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("prediction rows must sum to 1")

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class PredictionSplit:
    """Indices whose argmax left the original class (changed) or kept it
    (stable), plus the tracked probability of the original class."""

    i_star: int
    changed: tuple[int, ...]
    stable: tuple[int, ...]
    istar_values: Array

    def tag(self, index: int) -> str:
        return "C" if index in set(self.changed) else "S"


def _embedding_layers(net: Network) -> tuple[PatchEmbed, PositionalAdd | None]:
    patch = None
    pos = None
    for layer in net.layers[: net.embed_boundary]:
        if isinstance(layer, PatchEmbed):
            patch = layer
        elif isinstance(layer, PositionalAdd):
            pos = layer
    if patch is None:
        raise NetworkError("network has no patch-embedding layer to invert")
    return patch, pos


def embedding_bounds(images, net: Network) -> FeasibleBounds:
    """Per-dimension min/max envelope of the dataset's embeddings."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 1:
        imgs = imgs[None, :]
    if imgs.shape[0] == 0:
        raise ValueError("dataset is empty")
    emb = evaluate(net, imgs, from_layer=0, to_layer=net.embed_boundary)
    return FeasibleBounds(emb.min(axis=0), emb.max(axis=0))


def invert_patch_embedding(net: Network, e) -> Array:
    """Map an embedding matrix back to per-patch pixels, clamped to [0, 1].

    Subtracts the positional table and the projection bias, then applies the
    pseudoinverse of the patch projection row by row. Exact on embeddings in
    the projection's range; requires hidden >= pixels-per-patch and a full
    column rank projection.
    """
    patch, pos = _embedding_layers(net)
    px = patch.patch_size**2
    if patch.hidden < px:
        raise NetworkError(
            f"patch projection (hidden {patch.hidden} < {px} pixels) has no left "
            "inverse; decoding needs hidden >= pixels per patch"
        )
    sv = np.linalg.svd(patch.weight, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise NetworkError("patch projection is numerically rank deficient")
    rows = np.asarray(e, dtype=np.float64).reshape(patch.n_patches, patch.hidden)
    if pos is not None:
        rows = rows - pos.pos
    rows = rows - patch.bias
    pixels = rows @ np.linalg.pinv(patch.weight).T
    return np.clip(pixels, 0.0, 1.0)


def decode_trajectory(net: Network, traj: Trajectory, x_orig,
                      bounds: FeasibleBounds) -> DecodedBatch:
    """Decode every recorded point: cap to bounds, invert to patches, splice
    the explored segments into the original image, classify."""
    patch, _ = _embedding_layers(net)
    x0 = np.asarray(x_orig, dtype=np.float64)
    if x0.size != net.d_in:
        raise NetworkError("original image does not match the input space")
    orig_patches = patch.patchify(x0)
    if traj.selection is None:
        sel = np.arange(patch.n_patches)
    else:
        sel = np.asarray(traj.selection, dtype=np.intp)
        if sel.size and (sel.min() < 0 or sel.max() >= patch.n_patches):
            raise ValueError("trajectory selection outside the patch grid")
    images = np.empty((len(traj.points), net.d_in))
    for r, p in enumerate(traj.points):
        capped = project_feasible(p, bounds)
        decoded = invert_patch_embedding(net, capped)
        spliced = orig_patches.copy()
        spliced[sel] = decoded[sel]
        images[r] = patch.unpatchify(spliced)
    logits = evaluate(net, images, from_layer=0)
    return DecodedBatch(images=np.clip(images, 0.0, 1.0),
                        predictions=softmax(logits, axis=-1),
                        iters=tuple(traj.iters), source=traj.run_id)


def split_predictions(batch: DecodedBatch, i_star: int) -> PredictionSplit:
    """Partition decoded images by whether the argmax left class i_star."""
    n_classes = batch.predictions.shape[1]
    if not 0 <= i_star < n_classes:
        raise ValueError(f"i_star {i_star} outside [0, {n_classes})")
    winners = np.argmax(batch.predictions, axis=1)
    changed = tuple(int(i) for i in np.nonzero(winners != i_star)[0])
    stable = tuple(int(i) for i in np.nonzero(winners == i_star)[0])
    return PredictionSplit(i_star=i_star, changed=changed, stable=stable,
                           istar_values=batch.predictions[:, i_star].copy())


def prediction_trend_csv(batch: DecodedBatch, split: PredictionSplit) -> str:
    """CSV of (iteration, argmax, y_istar, set tag in {C, S}) per image."""
    winners = np.argmax(batch.predictions, axis=1)
    changed = set(split.changed)
    rows = []
    for r in range(len(batch)):
        rows.append([batch.iters[r], int(winners[r]),
                     float(split.istar_values[r]),
                     "C" if r in changed else "S"])
    return format_csv(["iteration", "argmax", "y_istar", "set"], rows)
