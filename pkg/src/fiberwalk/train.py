"""Mini-batch training for the tiny ViT with hand-derived backprop.

The forward pass reuses the exact layer maps; gradients are written out per
layer kind. Plain momentum SGD is the default optimizer, with Adam available
as a preset. Training never mutates the input network: a private clone is
updated and a fresh immutable Network is returned.
"""
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .data import Dataset
from .layers import (Affine, ClsPrepend, ClsSelect, Gelu, LayerNorm, MLPBlock,
                     PatchEmbed, PositionalAdd, ResidualAdd, SelfAttention,
                     Sigmoid, Softmax, Tanh, softmax, _norm_pdf)
from .network import Network, evaluate
from .seeding import rng_stream

Array = np.ndarray


class TrainingDiverged(RuntimeError):
    def __init__(self, report):
        super().__init__("loss became non-finite; training aborted")
        self.report = report


@dataclass
class TrainReport:
    network: Network | None
    losses: list[float] = field(default_factory=list)
    eval_accuracies: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    eval_accuracy: float = float("nan")
    epochs: int = 0
    seed: int = 0
    elapsed_seconds: float = 0.0
    optimizer: str = "momentum"
    diverged: bool = False


def _clone_layer(layer):
    if isinstance(layer, Affine):
        return Affine(layer.weight.copy(), layer.bias.copy())
    if isinstance(layer, (Sigmoid, Tanh, Gelu, Softmax)):
        return type(layer)(layer.d_in)
    if isinstance(layer, LayerNorm):
        return LayerNorm(layer.gain.copy(), layer.bias.copy(),
                         width=layer.d_in, eps=layer.eps)
    if isinstance(layer, SelfAttention):
        return SelfAttention(layer.wq.copy(), layer.wk.copy(), layer.wv.copy(),
                             layer.wo.copy(), tokens=layer.tokens)
    if isinstance(layer, MLPBlock):
        return MLPBlock(layer.w1.copy(), layer.b1.copy(), layer.w2.copy(),
                        layer.b2.copy(), tokens=layer.tokens)
    if isinstance(layer, ResidualAdd):
        return ResidualAdd([_clone_layer(inner) for inner in layer.inner])
    if isinstance(layer, PatchEmbed):
        return PatchEmbed(layer.weight.copy(), layer.bias.copy(),
                          layer.image_side, layer.patch_size)
    if isinstance(layer, PositionalAdd):
        return PositionalAdd(layer.pos.copy())
    if isinstance(layer, ClsPrepend):
        return ClsPrepend(layer.cls.copy(), tokens=layer.tokens)
    if isinstance(layer, ClsSelect):
        return ClsSelect(layer.hidden, tokens=layer.tokens)
    raise TypeError(f"no trainer support for layer kind {layer.kind!r}")


def clone_network(net: Network) -> Network:
    return Network(tuple(_clone_layer(l) for l in net.layers),
                   embed_boundary=net.embed_boundary,
                   embed_shape=net.embed_shape, hyper=dict(net.hyper))


def _tok(layer, x):
    return x.reshape(x.shape[0], layer.tokens, layer.hidden)


def _fwd(layer, x):
    """Forward with the intermediates needed by _bwd. x is (batch, d_in)."""
    if isinstance(layer, Affine):
        return x @ layer.weight.T + layer.bias, x
    if isinstance(layer, (Sigmoid, Tanh, Gelu, Softmax)):
        return layer.forward(x), x
    if isinstance(layer, LayerNorm):
        rows = x.reshape(x.shape[0], layer.tokens, layer.hidden)
        mu = rows.mean(axis=-1, keepdims=True)
        c = rows - mu
        sd = np.sqrt((c * c).mean(axis=-1, keepdims=True) + layer.eps)
        xhat = c / sd
        y = (layer.gain * xhat + layer.bias).reshape(x.shape)
        return y, (xhat, sd)
    if isinstance(layer, SelfAttention):
        X = _tok(layer, x)
        per_head = []
        out = np.zeros_like(X)
        for i in range(layer.heads):
            q, k, v = X @ layer.wq[i].T, X @ layer.wk[i].T, X @ layer.wv[i].T
            attn = softmax(layer.scale * (q @ np.swapaxes(k, 1, 2)), axis=-1)
            o = attn @ v
            out += o @ layer.wo[i].T
            per_head.append((q, k, v, attn, o))
        return out.reshape(x.shape), (X, per_head)
    if isinstance(layer, MLPBlock):
        X = _tok(layer, x)
        z = X @ layer.w1.T + layer.b1
        g = z * ndtr(z)
        y = (g @ layer.w2.T + layer.b2).reshape(x.shape)
        return y, (X, z, g)
    if isinstance(layer, ResidualAdd):
        h = x
        caches = []
        for inner in layer.inner:
            h, cache = _fwd(inner, h)
            caches.append(cache)
        return x + h, caches
    if isinstance(layer, PatchEmbed):
        patches = layer.patchify(x)
        emb = patches @ layer.weight.T + layer.bias
        return emb.reshape(x.shape[0], layer.d_out), patches
    if isinstance(layer, (PositionalAdd, ClsPrepend, ClsSelect)):
        return layer.forward(x), None
    raise TypeError(f"no trainer support for layer kind {layer.kind!r}")


def _bwd(layer, d_out, cache, grads: dict, prefix: str):
    """Input gradient for d_out (batch, d_out); fills grads[prefix + name]."""
    if isinstance(layer, Affine):
        x = cache
        grads[prefix + "weight"] = d_out.T @ x
        grads[prefix + "bias"] = d_out.sum(axis=0)
        return d_out @ layer.weight
    if isinstance(layer, (Sigmoid, Tanh, Gelu)):
        return d_out * layer._dfn(cache)
    if isinstance(layer, Softmax):
        s = softmax(cache, axis=-1)
        return s * (d_out - (d_out * s).sum(axis=-1, keepdims=True))
    if isinstance(layer, LayerNorm):
        xhat, sd = cache
        dy = d_out.reshape(xhat.shape)
        grads[prefix + "gain"] = (dy * xhat).sum(axis=(0, 1))
        grads[prefix + "bias"] = dy.sum(axis=(0, 1))
        dxhat = dy * layer.gain
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sd
        return dx.reshape(d_out.shape)
    if isinstance(layer, SelfAttention):
        X, per_head = cache
        dY = _tok(layer, d_out)
        dX = np.zeros_like(X)
        gq, gk, gv, go = [], [], [], []
        for i in range(layer.heads):
            q, k, v, attn, o = per_head[i]
            do = dY @ layer.wo[i]
            go.append(np.einsum("bth,btd->hd", dY, o))
            da = do @ np.swapaxes(v, 1, 2)
            dv = np.swapaxes(attn, 1, 2) @ do
            ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
            ds *= layer.scale
            dq = ds @ k
            dk = np.swapaxes(ds, 1, 2) @ q
            gq.append(np.einsum("btd,bth->dh", dq, X))
            gk.append(np.einsum("btd,bth->dh", dk, X))
            gv.append(np.einsum("btd,bth->dh", dv, X))
            dX += dq @ layer.wq[i] + dk @ layer.wk[i] + dv @ layer.wv[i]
        grads[prefix + "wq"] = np.stack(gq)
        grads[prefix + "wk"] = np.stack(gk)
        grads[prefix + "wv"] = np.stack(gv)
        grads[prefix + "wo"] = np.stack(go)
        return dX.reshape(d_out.shape)
    if isinstance(layer, MLPBlock):
        X, z, g = cache
        dY = _tok(layer, d_out)
        grads[prefix + "w2"] = np.einsum("bth,btf->hf", dY, g)
        grads[prefix + "b2"] = dY.sum(axis=(0, 1))
        dg = dY @ layer.w2
        dz = dg * (ndtr(z) + z * _norm_pdf(z))
        grads[prefix + "w1"] = np.einsum("btf,bth->fh", dz, X)
        grads[prefix + "b1"] = dz.sum(axis=(0, 1))
        return (dz @ layer.w1).reshape(d_out.shape)
    if isinstance(layer, ResidualAdd):
        d = d_out
        for idx in reversed(range(len(layer.inner))):
            d = _bwd(layer.inner[idx], d, cache[idx], grads,
                     prefix + f"inner{idx}.")
        return d_out + d
    if isinstance(layer, PatchEmbed):
        patches = cache
        dE = d_out.reshape(d_out.shape[0], layer.n_patches, layer.hidden)
        grads[prefix + "weight"] = np.einsum("bnh,bnp->hp", dE, patches)
        grads[prefix + "bias"] = dE.sum(axis=(0, 1))
        return layer.unpatchify(dE @ layer.weight)
    if isinstance(layer, PositionalAdd):
        grads[prefix + "pos"] = d_out.sum(axis=0).reshape(layer.pos.shape)
        return d_out
    if isinstance(layer, ClsPrepend):
        grads[prefix + "cls"] = d_out[:, : layer.hidden].sum(axis=0)
        return d_out[:, layer.hidden:]
    if isinstance(layer, ClsSelect):
        dX = np.zeros((d_out.shape[0], layer.d_in))
        dX[:, : layer.hidden] = d_out
        return dX
    raise TypeError(f"no trainer support for layer kind {layer.kind!r}")


def loss_and_grads(net: Network, images: Array, labels: Array):
    """Mean cross-entropy on logits and the parameter gradients."""
    x = images
    caches = []
    for layer in net.layers:
        x, cache = _fwd(layer, x)
        caches.append(cache)
    logits = x
    probs = softmax(logits, axis=-1)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads: dict[str, Array] = {}
    d = dlogits
    for idx in reversed(range(net.n_layers)):
        d = _bwd(net.layers[idx], d, caches[idx], grads, f"{idx}.")
    return loss, grads


def _parameters(net: Network):
    """(key, array) pairs in declaration order, keys matching loss_and_grads."""
    out = []
    for idx, layer in enumerate(net.layers):
        for name, arr in layer.weights():
            out.append((f"{idx}.{name}", arr))
    return out


def accuracy(net: Network, ds: Dataset, batch: int = 512) -> float:
    hits = 0
    for start in range(0, len(ds), batch):
        logits = evaluate(net, ds.images[start:start + batch])
        hits += int((np.argmax(logits, axis=1) == ds.labels[start:start + batch]).sum())
    return hits / max(1, len(ds))


def train_tiny_vit(net: Network, data: Dataset, epochs: int, lr: float,
                   batch: int, seed: int, momentum: float = 0.9,
                   optimizer: str = "momentum", eval_data: Dataset | None = None,
                   ) -> TrainReport:
    """Train a private clone of ``net`` with mini-batch cross-entropy descent.

    Deterministic under a fixed seed; a non-finite loss aborts by raising
    TrainingDiverged with the partial report attached.
    """
    if optimizer not in ("momentum", "adam"):
        raise ValueError("optimizer must be 'momentum' or 'adam'")
    if np.any(data.labels < 0) or np.any(data.labels >= net.d_out):
        raise ValueError("labels outside the class range of the network head")
    started = time.monotonic()
    work = clone_network(net)
    params = _parameters(work)
    velocity = {key: np.zeros_like(arr) for key, arr in params}
    adam_m = {key: np.zeros_like(arr) for key, arr in params} if optimizer == "adam" else None
    adam_v = {key: np.zeros_like(arr) for key, arr in params} if optimizer == "adam" else None
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    rng = rng_stream(seed, "train")
    report = TrainReport(network=None, seed=seed, optimizer=optimizer)
    step_count = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(data), batch):
            idx = order[start:start + batch]
            loss, grads = loss_and_grads(work, data.images[idx], data.labels[idx])
            if not np.isfinite(loss):
                report.diverged = True
                report.epochs = epoch
                report.elapsed_seconds = time.monotonic() - started
                raise TrainingDiverged(report)
            epoch_loss += loss * idx.size
            seen += idx.size
            step_count += 1
            for key, arr in params:
                g = grads[key].reshape(arr.shape)
                if optimizer == "momentum":
                    vel = velocity[key]
                    vel *= momentum
                    vel -= lr * g
                    arr += vel
                else:
                    adam_m[key] = beta1 * adam_m[key] + (1 - beta1) * g
                    adam_v[key] = beta2 * adam_v[key] + (1 - beta2) * g * g
                    mhat = adam_m[key] / (1 - beta1**step_count)
                    vhat = adam_v[key] / (1 - beta2**step_count)
                    arr -= lr * mhat / (np.sqrt(vhat) + adam_eps)
        report.losses.append(epoch_loss / max(1, seen))
        if eval_data is not None:
            report.eval_accuracies.append(accuracy(work, eval_data))
    report.network = Network(work.layers, embed_boundary=work.embed_boundary,
                             embed_shape=work.embed_shape, hyper=dict(work.hyper))
    report.epochs = epochs
    report.train_accuracy = accuracy(work, data)
    if eval_data is not None:
        report.eval_accuracy = report.eval_accuracies[-1]
    report.elapsed_seconds = time.monotonic() - started
    return report
