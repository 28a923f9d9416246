import numpy as np
import pytest

from fiberwalk.layers import (Affine, ClsPrepend, ClsSelect, Gelu, LayerNorm,
                              MLPBlock, PatchEmbed, PositionalAdd, ResidualAdd,
                              SelfAttention, Sigmoid, Softmax, Tanh)
from fiberwalk.network import Network


def full_rank_matrix(rng, d_out, d_in, scale=1.0):
    """Gaussian matrix, rejection-resampled to stay clearly full rank."""
    while True:
        m = scale * rng.standard_normal((d_out, d_in))
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] > 1e-6 * s[0]:
            return m


def make_layer(kind, rng, tokens=3, hidden=4, heads=2):
    """One small instance of every layer kind, seeded."""
    width = tokens * hidden
    if kind == "affine":
        return Affine(full_rank_matrix(rng, 3, 5), rng.standard_normal(3))
    if kind == "sigmoid":
        return Sigmoid(5)
    if kind == "tanh":
        return Tanh(5)
    if kind == "gelu":
        return Gelu(5)
    if kind == "softmax":
        return Softmax(5)
    if kind == "layer_norm":
        return LayerNorm(rng.standard_normal(hidden), rng.standard_normal(hidden),
                         width=width)
    if kind == "self_attention":
        dh = hidden // heads
        return SelfAttention(
            full_rank_matrix(rng, heads * dh, hidden).reshape(heads, dh, hidden),
            full_rank_matrix(rng, heads * dh, hidden).reshape(heads, dh, hidden),
            full_rank_matrix(rng, heads * dh, hidden).reshape(heads, dh, hidden),
            full_rank_matrix(rng, heads * hidden, dh).reshape(heads, hidden, dh),
            tokens=tokens,
        )
    if kind == "mlp_block":
        d_ff = 2 * hidden
        return MLPBlock(full_rank_matrix(rng, d_ff, hidden), rng.standard_normal(d_ff),
                        full_rank_matrix(rng, hidden, d_ff), rng.standard_normal(hidden),
                        tokens=tokens)
    if kind == "residual_add":
        return ResidualAdd([
            LayerNorm(np.ones(hidden), np.zeros(hidden), width=width),
            MLPBlock(full_rank_matrix(rng, hidden, hidden), rng.standard_normal(hidden),
                     full_rank_matrix(rng, hidden, hidden), rng.standard_normal(hidden),
                     tokens=tokens),
        ])
    if kind == "patch_embed":
        return PatchEmbed(full_rank_matrix(rng, hidden, 4), rng.standard_normal(hidden),
                          image_side=6, patch_size=2)
    if kind == "positional_add":
        return PositionalAdd(rng.standard_normal((tokens, hidden)))
    if kind == "cls_prepend":
        return ClsPrepend(rng.standard_normal(hidden), tokens=tokens)
    if kind == "cls_select":
        return ClsSelect(hidden, tokens=tokens)
    raise ValueError(kind)


ALL_KINDS = ["affine", "sigmoid", "tanh", "gelu", "softmax", "layer_norm",
             "self_attention", "mlp_block", "residual_add", "patch_embed",
             "positional_add", "cls_prepend", "cls_select"]


def wiggly_curve(rng, dim, n):
    """Smooth random curve: line plus three sine modes."""
    t = np.linspace(0.0, 1.0, n)[:, None]
    a, b = rng.standard_normal((2, dim))
    c = rng.standard_normal((3, dim))
    w = np.array([1.0, 2.0, 3.0])[:, None]
    phases = rng.uniform(0, 2 * np.pi, size=(3, 1))
    return a + t * b + sum(0.5 * c[i] * np.sin(w[i] * t * 2 * np.pi + phases[i])
                           for i in range(3))


def smooth_net(rng, dims=(5, 7, 4), kinds=("sigmoid", "tanh")):
    """Random chain of affine maps interleaved with smooth activations."""
    from fiberwalk.layers import Gelu, Sigmoid, Tanh
    act = {"sigmoid": Sigmoid, "tanh": Tanh, "gelu": Gelu}
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append(Affine(full_rank_matrix(rng, b, a), rng.standard_normal(b)))
        layers.append(act[kinds[i % len(kinds)]](b))
    return Network(tuple(layers))


def coordinate_net():
    """f(x, y) = x; the fiber through any point is the vertical line."""
    return Network((Affine(np.array([[1.0, 0.0]]), np.zeros(1)),))


def identity_net(dim=2):
    return Network((Affine(np.eye(dim), np.zeros(dim)),))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


# ---- acceptance reporting -------------------------------------------------
# test_acceptance.py records one line per criterion; printed after the run.

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if ok else "FAIL"
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{status}  {name}{suffix}")
