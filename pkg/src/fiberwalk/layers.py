"""Smooth layer kinds: forward maps and their exact tangent (JVP) rules.

Every layer is a smooth map between flattened real vector spaces. ``forward``
accepts any leading batch shape ``(..., d_in)``; ``jvp`` linearizes at a single
point and pushes a block of tangent vectors ``(m, d_in)`` through in one pass,
so a full Jacobian is just the tangent block ``I_d``.

Token-structured layers (attention, layer norm, MLP) view the flat vector as a
row-major ``(tokens, hidden)`` matrix.
"""
import numpy as np
from scipy.special import expit, ndtr

Array = np.ndarray

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Array, axis: int = -1) -> Array:
    """Numerically stable softmax along ``axis``."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _norm_pdf(x: Array) -> Array:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _as_f64(a, name: str) -> Array:
    out = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


class Layer:
    """Base class; concrete layers set kind, d_in and d_out."""

    kind = "base"
    d_in: int
    d_out: int

    def forward(self, x: Array) -> Array:
        raise NotImplementedError

    def jvp(self, x: Array, tangents: Array) -> Array:
        """Push tangents (m, d_in) through the differential at x (d_in,)."""
        raise NotImplementedError

    def weights(self) -> list[tuple[str, Array]]:
        """Weight arrays in declaration order (empty for parameter-free kinds)."""
        return []

    def rank_checked(self) -> list[Array]:
        """Projection matrices subject to the numerical full-rank check."""
        return []

    def meta(self) -> dict:
        """Shape metadata needed to rebuild the layer (no weight values)."""
        return {}

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"{type(self).__name__}(d_in={self.d_in}, d_out={self.d_out})"


class Affine(Layer):
    """y = W x + b."""

    kind = "affine"

    def __init__(self, weight, bias=None):
        self.weight = _as_f64(weight, "weight")
        if self.weight.ndim != 2:
            raise ValueError("affine weight must be 2-D")
        d_out, d_in = self.weight.shape
        self.bias = (
            np.zeros(d_out) if bias is None else _as_f64(bias, "bias").reshape(d_out)
        )
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        return x @ self.weight.T + self.bias

    def jvp(self, x, tangents):
        return tangents @ self.weight.T

    def weights(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def rank_checked(self):
        return [self.weight]


class _Elementwise(Layer):
    """Shared scaffolding for coordinate-wise activations."""

    def __init__(self, dim: int):
        self.d_in = self.d_out = int(dim)

    def _fn(self, x):
        raise NotImplementedError

    def _dfn(self, x):
        raise NotImplementedError

    def forward(self, x):
        return self._fn(x)

    def jvp(self, x, tangents):
        return tangents * self._dfn(x)

    def meta(self):
        return {"dim": self.d_in}


class Sigmoid(_Elementwise):
    kind = "sigmoid"

    def _fn(self, x):
        return expit(x)

    def _dfn(self, x):
        s = expit(x)
        return s * (1.0 - s)


class Tanh(_Elementwise):
    kind = "tanh"

    def _fn(self, x):
        return np.tanh(x)

    def _dfn(self, x):
        t = np.tanh(x)
        return 1.0 - t * t


class Gelu(_Elementwise):
    """Exact Gaussian-CDF form x * Phi(x); derivative Phi(x) + x * phi(x)."""

    kind = "gelu"

    def _fn(self, x):
        return x * ndtr(x)

    def _dfn(self, x):
        return ndtr(x) + x * _norm_pdf(x)


class Softmax(Layer):
    """Softmax over the whole vector; differential J v = s*(v - <s, v>)."""

    kind = "softmax"

    def __init__(self, dim: int):
        self.d_in = self.d_out = int(dim)

    def forward(self, x):
        return softmax(x, axis=-1)

    def jvp(self, x, tangents):
        s = softmax(x)
        return s * (tangents - (tangents @ s)[..., None])

    def meta(self):
        return {"dim": self.d_in}


class LayerNorm(Layer):
    """Per-token normalization: each consecutive hidden-size block of the flat
    vector is centered, scaled to unit variance (with epsilon), then gained
    and shifted."""

    kind = "layer_norm"

    def __init__(self, gain, bias, width: int | None = None, eps: float = 1e-5):
        self.gain = _as_f64(gain, "gain").reshape(-1)
        self.bias = _as_f64(bias, "bias").reshape(-1)
        if self.gain.shape != self.bias.shape:
            raise ValueError("gain and bias must have equal length")
        self.hidden = self.gain.size
        self.eps = float(eps)
        self.d_in = self.d_out = int(width) if width is not None else self.hidden
        if self.d_in % self.hidden:
            raise ValueError("layer width must be a multiple of the hidden size")
        self.tokens = self.d_in // self.hidden

    def _stats(self, rows):
        mu = rows.mean(axis=-1, keepdims=True)
        c = rows - mu
        sd = np.sqrt((c * c).mean(axis=-1, keepdims=True) + self.eps)
        return c, sd

    def normalized(self, x):
        """(x - mean) / sqrt(var + eps) per token, before gain and bias."""
        rows = x.reshape(*x.shape[:-1], self.tokens, self.hidden)
        c, sd = self._stats(rows)
        return (c / sd).reshape(x.shape)

    def forward(self, x):
        rows = x.reshape(*x.shape[:-1], self.tokens, self.hidden)
        c, sd = self._stats(rows)
        out = self.gain * (c / sd) + self.bias
        return out.reshape(x.shape)

    def jvp(self, x, tangents):
        rows = x.reshape(self.tokens, self.hidden)
        c, sd = self._stats(rows)
        t = tangents.reshape(-1, self.tokens, self.hidden)
        dc = t - t.mean(axis=-1, keepdims=True)
        # d(c/sd) = dc/sd - c * mean(c*dc) / sd^3
        dsd_term = c * (c * dc).mean(axis=-1, keepdims=True) / (sd**3)
        out = self.gain * (dc / sd - dsd_term)
        return out.reshape(tangents.shape[0], self.d_out)

    def weights(self):
        return [("gain", self.gain), ("bias", self.bias)]

    def meta(self):
        return {"width": self.d_in, "eps": self.eps}


class SelfAttention(Layer):
    """Bidirectional multi-head softmax attention over all tokens.

    Per head i: Q = X Wq_i^T, K = X Wk_i^T, V = X Wv_i^T, scores = Q K^T / sqrt(dh),
    rows softmaxed, output = sum_i (A_i V_i) Wo_i^T. No masking, no dropout.
    """

    kind = "self_attention"

    def __init__(self, wq, wk, wv, wo, tokens: int):
        self.wq = _as_f64(wq, "wq")  # (heads, dh, h)
        self.wk = _as_f64(wk, "wk")
        self.wv = _as_f64(wv, "wv")
        self.wo = _as_f64(wo, "wo")  # (heads, h, dh)
        if self.wq.ndim != 3:
            raise ValueError("attention projections must be (heads, dh, h)")
        self.heads, self.head_dim, self.hidden = self.wq.shape
        for name, w in (("wk", self.wk), ("wv", self.wv)):
            if w.shape != self.wq.shape:
                raise ValueError(f"{name} shape mismatch")
        if self.wo.shape != (self.heads, self.hidden, self.head_dim):
            raise ValueError("wo must be (heads, hidden, dh)")
        self.tokens = int(tokens)
        self.d_in = self.d_out = self.tokens * self.hidden
        self.scale = 1.0 / np.sqrt(self.head_dim)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.tokens, self.hidden)

    def forward(self, x):
        X = self._split(x)
        out = np.zeros_like(X)
        for i in range(self.heads):
            q = X @ self.wq[i].T
            k = X @ self.wk[i].T
            v = X @ self.wv[i].T
            attn = softmax(self.scale * (q @ np.swapaxes(k, -1, -2)), axis=-1)
            out = out + (attn @ v) @ self.wo[i].T
        return out.reshape(x.shape)

    def jvp(self, x, tangents):
        X = x.reshape(self.tokens, self.hidden)
        m, tks, dh = tangents.shape[0], self.tokens, self.head_dim
        flat = tangents.reshape(m * tks, self.hidden)
        out = np.zeros((m * tks, self.hidden))
        for i in range(self.heads):
            q, k, v = X @ self.wq[i].T, X @ self.wk[i].T, X @ self.wv[i].T
            attn = softmax(self.scale * (q @ k.T), axis=-1)
            dq = (flat @ self.wq[i].T).reshape(m, tks, dh)
            dk = (flat @ self.wk[i].T).reshape(m, tks, dh)
            dv = flat @ self.wv[i].T
            # dS[m,t,s] = scale * (dq[m,t,:].k[s,:] + q[t,:].dk[m,s,:])
            ds = dq.reshape(m * tks, dh) @ k.T
            ds = ds.reshape(m, tks, tks)
            ds += np.swapaxes((dk.reshape(m * tks, dh) @ q.T).reshape(m, tks, tks), 1, 2)
            ds *= self.scale
            # row-wise softmax differential, fused: da = attn*ds - attn*rowsum(attn*ds)
            ds *= attn
            ds -= attn * ds.sum(axis=-1, keepdims=True)
            do = (ds.reshape(m * tks, tks) @ v).reshape(m, tks, dh)
            # attn @ dv over the token axis, one GEMM: (t,s) x (s, m*dh)
            do += (attn @ dv.reshape(m, tks, dh).transpose(1, 0, 2).reshape(tks, m * dh)) \
                .reshape(tks, m, dh).transpose(1, 0, 2)
            out += do.reshape(m * tks, dh) @ self.wo[i].T
        return out.reshape(m, self.d_out)

    def weights(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]

    def rank_checked(self):
        mats = []
        for w in (self.wq, self.wk, self.wv, self.wo):
            mats.extend(w[i] for i in range(self.heads))
        return mats

    def meta(self):
        return {"heads": self.heads, "head_dim": self.head_dim,
                "hidden": self.hidden, "tokens": self.tokens}


class MLPBlock(Layer):
    """Per-token two-layer network with exact GeLU: W2 gelu(W1 x + b1) + b2."""

    kind = "mlp_block"

    def __init__(self, w1, b1, w2, b2, tokens: int):
        self.w1 = _as_f64(w1, "w1")  # (d_ff, h)
        self.b1 = _as_f64(b1, "b1").reshape(-1)
        self.w2 = _as_f64(w2, "w2")  # (h, d_ff)
        self.b2 = _as_f64(b2, "b2").reshape(-1)
        self.d_ff, self.hidden = self.w1.shape
        if self.w2.shape != (self.hidden, self.d_ff):
            raise ValueError("w2 must be (hidden, d_ff)")
        self.tokens = int(tokens)
        self.d_in = self.d_out = self.tokens * self.hidden

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.tokens, self.hidden)

    def forward(self, x):
        X = self._split(x)
        z = X @ self.w1.T + self.b1
        out = (z * ndtr(z)) @ self.w2.T + self.b2
        return out.reshape(x.shape)

    def jvp(self, x, tangents):
        X = x.reshape(self.tokens, self.hidden)
        z = X @ self.w1.T + self.b1
        dgelu = ndtr(z) + z * _norm_pdf(z)
        T = tangents.reshape(-1, self.tokens, self.hidden)
        dz = T @ self.w1.T
        out = (dgelu * dz) @ self.w2.T
        return out.reshape(tangents.shape[0], self.d_out)

    def weights(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def rank_checked(self):
        return [self.w1, self.w2]

    def meta(self):
        return {"hidden": self.hidden, "d_ff": self.d_ff, "tokens": self.tokens}


class ResidualAdd(Layer):
    """x + g(x) where g is an inner chain of layers with matching endpoints."""

    kind = "residual_add"

    def __init__(self, inner):
        self.inner = tuple(inner)
        if not self.inner:
            raise ValueError("residual block needs at least one inner layer")
        d = self.inner[0].d_in
        for prev, nxt in zip(self.inner, self.inner[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError("inner chain dimensions do not compose")
        if self.inner[-1].d_out != d:
            raise ValueError("residual inner chain must preserve dimension")
        self.d_in = self.d_out = d

    def forward(self, x):
        y = x
        for layer in self.inner:
            y = layer.forward(y)
        return x + y

    def jvp(self, x, tangents):
        y, t = x, tangents
        for layer in self.inner:
            t = layer.jvp(y, t)
            y = layer.forward(y)
        return tangents + t

    def weights(self):
        out = []
        for i, layer in enumerate(self.inner):
            out.extend((f"inner{i}.{name}", arr) for name, arr in layer.weights())
        return out

    def rank_checked(self):
        out = []
        for layer in self.inner:
            out.extend(layer.rank_checked())
        return out


class PatchEmbed(Layer):
    """Split a square image into non-overlapping patches and project each
    flattened patch through the same affine map: row i of the output matrix is
    W p_i + b."""

    kind = "patch_embed"

    def __init__(self, weight, bias, image_side: int, patch_size: int):
        self.weight = _as_f64(weight, "weight")  # (hidden, patch_size^2)
        self.bias = _as_f64(bias, "bias").reshape(-1)
        self.image_side = int(image_side)
        self.patch_size = int(patch_size)
        if self.image_side % self.patch_size:
            raise ValueError("image side must be divisible by the patch size")
        self.grid = self.image_side // self.patch_size
        self.n_patches = self.grid * self.grid
        self.hidden, px = self.weight.shape
        if px != self.patch_size**2:
            raise ValueError("projection width must equal pixels per patch")
        self.d_in = self.image_side**2
        self.d_out = self.n_patches * self.hidden

    def patchify(self, x):
        """(..., side^2) -> (..., n_patches, patch_size^2), row-major both ways."""
        p, g = self.patch_size, self.grid
        img = x.reshape(*x.shape[:-1], g, p, g, p)
        img = np.swapaxes(img, -3, -2)  # (..., g, g, p, p)
        return img.reshape(*x.shape[:-1], self.n_patches, p * p)

    def unpatchify(self, patches):
        p, g = self.patch_size, self.grid
        img = patches.reshape(*patches.shape[:-2], g, g, p, p)
        img = np.swapaxes(img, -3, -2)
        return img.reshape(*patches.shape[:-2], self.d_in)

    def forward(self, x):
        emb = self.patchify(x) @ self.weight.T + self.bias
        return emb.reshape(*x.shape[:-1], self.d_out)

    def jvp(self, x, tangents):
        emb = self.patchify(tangents) @ self.weight.T
        return emb.reshape(tangents.shape[0], self.d_out)

    def weights(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def rank_checked(self):
        return [self.weight]

    def meta(self):
        return {"image_side": self.image_side, "patch_size": self.patch_size,
                "hidden": self.hidden}


class PositionalAdd(Layer):
    """Add a fixed positional matrix to the (tokens, hidden) embedding."""

    kind = "positional_add"

    def __init__(self, pos):
        self.pos = _as_f64(pos, "pos")
        if self.pos.ndim != 2:
            raise ValueError("positional table must be (tokens, hidden)")
        self.tokens, self.hidden = self.pos.shape
        self.d_in = self.d_out = self.pos.size

    def forward(self, x):
        return x + self.pos.reshape(-1)

    def jvp(self, x, tangents):
        return tangents

    def weights(self):
        return [("pos", self.pos)]

    def meta(self):
        return {"tokens": self.tokens, "hidden": self.hidden}


class ClsPrepend(Layer):
    """Prepend a learned class token row to the embedding matrix."""

    kind = "cls_prepend"

    def __init__(self, cls, tokens: int):
        self.cls = _as_f64(cls, "cls").reshape(-1)
        self.hidden = self.cls.size
        self.tokens = int(tokens)
        self.d_in = self.tokens * self.hidden
        self.d_out = (self.tokens + 1) * self.hidden

    def forward(self, x):
        lead = np.broadcast_to(self.cls, (*x.shape[:-1], self.hidden))
        return np.concatenate([lead, x], axis=-1)

    def jvp(self, x, tangents):
        zeros = np.zeros((tangents.shape[0], self.hidden))
        return np.concatenate([zeros, tangents], axis=-1)

    def weights(self):
        return [("cls", self.cls)]

    def meta(self):
        return {"tokens": self.tokens, "hidden": self.hidden}


class ClsSelect(Layer):
    """Keep only the class-token row of the embedding matrix."""

    kind = "cls_select"

    def __init__(self, hidden: int, tokens: int):
        self.hidden = int(hidden)
        self.tokens = int(tokens)
        self.d_in = self.tokens * self.hidden
        self.d_out = self.hidden

    def forward(self, x):
        return x[..., : self.hidden]

    def jvp(self, x, tangents):
        return tangents[..., : self.hidden]

    def meta(self):
        return {"hidden": self.hidden, "tokens": self.tokens}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Affine, Sigmoid, Tanh, Gelu, Softmax, LayerNorm, SelfAttention,
                MLPBlock, ResidualAdd, PatchEmbed, PositionalAdd, ClsPrepend,
                ClsSelect)
}
