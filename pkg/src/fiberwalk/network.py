"""Networks as validated chains of smooth layers, with exact Jacobians.

A network is an ordered sequence of layers between flattened real spaces with
dimensions ``dims[0] .. dims[n]``. ``embed_boundary`` marks the manifold index
where the embedding map ends and the intermediate layers begin; exploration
and attribution operate on that space.

Jacobians are assembled column-wise by pushing the identity tangent block
through the analytic per-layer JVP rules, so they are exact up to rounding.
"""
from dataclasses import dataclass, field

import numpy as np

from .layers import (Affine, ClsPrepend, ClsSelect, Layer, LayerNorm,
                     MLPBlock, PatchEmbed, PositionalAdd, ResidualAdd,
                     SelfAttention)
from .seeding import rng_stream

Array = np.ndarray

RANK_RTOL = 1e-10  # smallest/largest singular value ratio treated as rank loss


class NetworkError(ValueError):
    """Raised for structurally invalid networks or invalid evaluation input."""


@dataclass(frozen=True)
class Network:
    """Immutable layer chain. Safe to share across threads; all evaluation
    paths are pure."""

    layers: tuple[Layer, ...]
    embed_boundary: int = 0
    embed_shape: tuple[int, int] | None = None  # (tokens, hidden) at boundary
    hyper: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise NetworkError("network needs at least one layer")
        dims = [self.layers[0].d_in]
        for idx, layer in enumerate(self.layers):
            if layer.d_in != dims[-1]:
                raise NetworkError(
                    f"layer {idx} ({layer.kind}) expects input dim {layer.d_in}, "
                    f"previous layer produces {dims[-1]}"
                )
            dims.append(layer.d_out)
        object.__setattr__(self, "dims", tuple(dims))
        if not 0 <= self.embed_boundary <= len(self.layers):
            raise NetworkError("embed_boundary outside the manifold chain")
        if self.embed_shape is not None:
            t, h = self.embed_shape
            if t * h != dims[self.embed_boundary]:
                raise NetworkError("embed_shape inconsistent with boundary dim")
        for idx, layer in enumerate(self.layers):
            for mat in layer.rank_checked():
                smax = np.linalg.norm(mat, 2)
                if smax == 0.0:
                    raise NetworkError(f"layer {idx} ({layer.kind}) has a zero weight matrix")
                smin = np.linalg.svd(mat, compute_uv=False)[-1]
                if smin <= RANK_RTOL * smax:
                    raise NetworkError(
                        f"layer {idx} ({layer.kind}) weight matrix is numerically "
                        f"rank deficient (s_min/s_max = {smin / smax:.3e})"
                    )

    dims: tuple[int, ...] = field(init=False, compare=False)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def d_out(self) -> int:
        return self.dims[-1]


@dataclass
class Activations:
    """Per-manifold points produced by a forward pass starting at from_layer."""

    from_layer: int
    points: list[Array]

    @property
    def output(self) -> Array:
        return self.points[-1]

    def at(self, manifold: int) -> Array:
        """Point on manifold M_manifold (absolute index)."""
        return self.points[manifold - self.from_layer]


def _check_point(net: Network, x, from_layer: int) -> Array:
    if not 0 <= from_layer <= net.n_layers:
        raise NetworkError(f"from_layer {from_layer} outside [0, {net.n_layers}]")
    p = np.asarray(x, dtype=np.float64)
    if p.shape[-1] != net.dims[from_layer]:
        raise NetworkError(
            f"point has dim {p.shape[-1]}, manifold {from_layer} has dim "
            f"{net.dims[from_layer]}"
        )
    if not np.all(np.isfinite(p)):
        raise NetworkError("non-finite input point")
    return p


def forward(net: Network, x, from_layer: int = 0) -> Activations:
    """Evaluate the suffix map starting at manifold ``from_layer`` and keep
    every intermediate point."""
    p = _check_point(net, x, from_layer)
    if p.ndim != 1:
        raise NetworkError("forward takes a single flat point; use evaluate for batches")
    points = [p]
    for layer in net.layers[from_layer:]:
        points.append(layer.forward(points[-1]))
    return Activations(from_layer=from_layer, points=points)


def evaluate(net: Network, x, from_layer: int = 0, to_layer: int | None = None) -> Array:
    """Batched evaluation ``(..., d_from) -> (..., d_to)`` without keeping
    intermediates."""
    p = _check_point(net, x, from_layer)
    stop = net.n_layers if to_layer is None else to_layer
    if not from_layer <= stop <= net.n_layers:
        raise NetworkError("to_layer must lie between from_layer and the output")
    for layer in net.layers[from_layer:stop]:
        p = layer.forward(p)
    return p


def jvp_block(net: Network, x, tangents, from_layer: int = 0) -> Array:
    """Push a block of tangents (m, d) through the differential of the suffix
    map at x; returns (m, d_out)."""
    p = _check_point(net, x, from_layer)
    t = np.asarray(tangents, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != p.size:
        raise NetworkError("tangent block must be (m, d) at the base point")
    for layer in net.layers[from_layer:]:
        t = layer.jvp(p, t)
        p = layer.forward(p)
    return t


def jvp(net: Network, x, v, from_layer: int = 0) -> Array:
    """Directional derivative J v of the suffix map at x."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise NetworkError("jvp takes a single tangent vector")
    return jvp_block(net, x, v[None, :], from_layer)[0]


JACOBIAN_CHUNK = 256  # tangent columns per pass, caps attention temporaries


def jacobian(net: Network, x, from_layer: int = 0) -> Array:
    """Full Jacobian (d_out, d_in) of the suffix map at x; column j equals
    jvp on the j-th basis vector. Large inputs are processed in tangent
    chunks to bound memory."""
    p = _check_point(net, x, from_layer)
    eye = np.eye(p.size)
    if p.size <= JACOBIAN_CHUNK:
        return jvp_block(net, p, eye, from_layer).T
    blocks = [jvp_block(net, p, chunk, from_layer)
              for chunk in np.array_split(eye, int(np.ceil(p.size / JACOBIAN_CHUNK)))]
    return np.concatenate(blocks, axis=0).T


def finite_diff_jacobian(net: Network, x, eps: float = 1e-5, from_layer: int = 0) -> Array:
    """Central-difference Jacobian estimate; the independent oracle used by
    the test suite."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = _check_point(net, x, from_layer)
    cols = []
    for j in range(p.size):
        step = np.zeros_like(p)
        step[j] = eps
        hi = evaluate(net, p + step, from_layer)
        lo = evaluate(net, p - step, from_layer)
        cols.append((hi - lo) / (2.0 * eps))
    return np.stack(cols, axis=1)


def subnetwork(net: Network, start: int, stop: int) -> Network:
    """The chain of layers mapping M_start to M_stop as a standalone network."""
    if not 0 <= start < stop <= net.n_layers:
        raise NetworkError("invalid subnetwork bounds")
    eb = min(max(net.embed_boundary - start, 0), stop - start)
    return Network(net.layers[start:stop], embed_boundary=eb)


def build_tiny_vit(patch_size: int, hidden: int, layers: int, heads: int,
                   classes: int, image_side: int, seed: int = 0,
                   mlp_ratio: int = 4) -> Network:
    """Small vision transformer for square grayscale images.

    Chain: patch embedding, positional add, class-token prepend, ``layers``
    pre-norm attention + MLP residual blocks, class-token select, affine head.
    The embedding boundary sits after the positional add, so exploration acts
    on the flattened (n_patches, hidden) matrix.
    """
    if image_side % patch_size:
        raise NetworkError("image side must be divisible by the patch size")
    if hidden % heads:
        raise NetworkError("hidden size must be divisible by the head count")
    rng = rng_stream(seed, "vit-init")
    n_patches = (image_side // patch_size) ** 2
    tokens = n_patches + 1
    head_dim = hidden // heads
    px = patch_size**2

    def saw(*shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    chain: list[Layer] = [
        PatchEmbed(saw(hidden, px, fan_in=px), np.zeros(hidden),
                   image_side, patch_size),
        PositionalAdd(0.02 * rng.standard_normal((n_patches, hidden))),
        ClsPrepend(0.02 * rng.standard_normal(hidden), tokens=n_patches),
    ]
    d_ff = mlp_ratio * hidden
    for _ in range(layers):
        attn = SelfAttention(
            saw(heads, head_dim, hidden, fan_in=hidden),
            saw(heads, head_dim, hidden, fan_in=hidden),
            saw(heads, head_dim, hidden, fan_in=hidden),
            saw(heads, hidden, head_dim, fan_in=head_dim),
            tokens=tokens,
        )
        mlp = MLPBlock(saw(d_ff, hidden, fan_in=hidden), np.zeros(d_ff),
                       saw(hidden, d_ff, fan_in=d_ff), np.zeros(hidden),
                       tokens=tokens)
        ln_attn = LayerNorm(np.ones(hidden), np.zeros(hidden), width=tokens * hidden)
        ln_mlp = LayerNorm(np.ones(hidden), np.zeros(hidden), width=tokens * hidden)
        chain.append(ResidualAdd([ln_attn, attn]))
        chain.append(ResidualAdd([ln_mlp, mlp]))
    chain.append(ClsSelect(hidden, tokens=tokens))
    chain.append(Affine(saw(classes, hidden, fan_in=hidden), np.zeros(classes)))

    hyper = {"patch_size": patch_size, "hidden": hidden, "layers": layers,
             "heads": heads, "classes": classes, "image_side": image_side,
             "mlp_ratio": mlp_ratio, "seed": seed}
    return Network(tuple(chain), embed_boundary=2,
                   embed_shape=(n_patches, hidden), hyper=hyper)


# Named configurations: "desk" keeps a 1000-step exploration tractable on a
# laptop CPU; "paper4x4" mirrors the 4-layer/4-head reference model; "decode"
# has hidden >= pixels-per-patch so the patch projection is left-invertible;
# "fig1" uses 2x2 patches on 28x28 images (a 14x14 heatmap grid).
VIT_PRESETS = {
    "desk": {"patch_size": 4, "hidden": 8, "layers": 2, "heads": 2,
             "classes": 10, "image_side": 28},
    "paper4x4": {"patch_size": 4, "hidden": 16, "layers": 4, "heads": 4,
                 "classes": 10, "image_side": 28},
    "decode": {"patch_size": 4, "hidden": 16, "layers": 2, "heads": 2,
               "classes": 10, "image_side": 28},
    "fig1": {"patch_size": 2, "hidden": 8, "layers": 2, "heads": 2,
             "classes": 10, "image_side": 28},
}


def build_preset(name: str, seed: int = 0, **overrides) -> Network:
    if name not in VIT_PRESETS:
        raise NetworkError(f"unknown preset {name!r}; choose from {sorted(VIT_PRESETS)}")
    cfg = dict(VIT_PRESETS[name])
    cfg.update(overrides)
    return build_tiny_vit(seed=seed, **cfg)
