"""Per-layer forward values and tangent rules against finite differences."""
import numpy as np
import pytest

from conftest import ALL_KINDS, make_layer
from fiberwalk.layers import Affine, Gelu, LayerNorm, Sigmoid, Softmax


def central_diff(layer, x, v, eps=1e-5):
    return (layer.forward(x + eps * v) - layer.forward(x - eps * v)) / (2 * eps)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_jvp_matches_finite_differences(kind, rng):
    layer = make_layer(kind, rng)
    for _ in range(100):
        x = rng.standard_normal(layer.d_in)
        v = rng.standard_normal(layer.d_in)
        got = layer.jvp(x, v[None, :])[0]
        ref = central_diff(layer, x, v)
        assert np.linalg.norm(got - ref) <= 1e-5 * (1.0 + np.linalg.norm(got))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_jvp_linear_in_tangent(kind, rng):
    layer = make_layer(kind, rng)
    x = rng.standard_normal(layer.d_in)
    v, w = rng.standard_normal((2, layer.d_in))
    lhs = layer.jvp(x, (2.0 * v - 3.0 * w)[None, :])[0]
    rhs = 2.0 * layer.jvp(x, v[None, :])[0] - 3.0 * layer.jvp(x, w[None, :])[0]
    assert np.allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_forward_batched_matches_single(kind, rng):
    # equal up to BLAS rounding (batched GEMM vs single GEMV dispatch)
    layer = make_layer(kind, rng)
    xs = rng.standard_normal((6, layer.d_in))
    batched = layer.forward(xs)
    for i, x in enumerate(xs):
        assert np.allclose(batched[i], layer.forward(x), rtol=1e-13, atol=1e-13)


def test_diagonal_affine_forward():
    layer = Affine(np.diag([2.0, 3.0]), np.zeros(2))
    assert np.array_equal(layer.forward(np.array([1.0, 1.0])), [2.0, 3.0])


def test_sigmoid_at_zero():
    assert np.allclose(Sigmoid(2).forward(np.zeros(2)), [0.5, 0.5])


def test_softmax_symmetry():
    out = Softmax(3).forward(np.zeros(3))
    assert np.allclose(out, np.full(3, 1.0 / 3.0))


def test_affine_jvp_is_weight_matrix():
    layer = Affine(np.diag([2.0, 3.0]), np.zeros(2))
    assert np.array_equal(layer.jvp(np.zeros(2), np.array([[1.0, 0.0]]))[0], [2.0, 0.0])


def test_sigmoid_derivative_at_zero(rng):
    layer = Sigmoid(1)
    x = np.zeros(1)
    v = np.ones(1)
    got = layer.jvp(x, v[None, :])[0]
    assert np.allclose(got, 0.25)
    assert np.allclose(got, central_diff(layer, x, v), atol=1e-8)


def test_softmax_shift_invariance():
    layer = Softmax(2)
    got = layer.jvp(np.zeros(2), np.ones((1, 2)))[0]
    assert np.allclose(got, 0.0, atol=1e-15)


def test_softmax_output_simplex_and_jacobian_kernel(rng):
    layer = Softmax(5)
    for _ in range(20):
        x = 3.0 * rng.standard_normal(5)
        out = layer.forward(x)
        assert np.all(out > 0) and abs(out.sum() - 1.0) < 1e-12
        # every Jacobian row is orthogonal to the all-ones direction
        assert np.linalg.norm(layer.jvp(x, np.ones((1, 5)))[0]) <= 1e-10


def test_gelu_derivative_at_zero():
    layer = Gelu(1)
    fd = central_diff(layer, np.zeros(1), np.ones(1))
    assert abs(fd[0] - 0.5) < 1e-6
    assert np.allclose(layer.jvp(np.zeros(1), np.ones((1, 1)))[0], 0.5)


def test_layer_norm_centers_and_scales(rng):
    # eps = 1e-5 only allows variance within 1e-6 of 1 when the input
    # variance is >> 10, so the check uses well-spread inputs.
    ln = LayerNorm(rng.standard_normal(8), rng.standard_normal(8), width=24)
    for _ in range(20):
        x = 30.0 * rng.standard_normal(24)
        rows = ln.normalized(x).reshape(3, 8)
        assert np.abs(rows.mean(axis=1)).max() <= 1e-9
        assert np.abs(rows.var(axis=1) - 1.0).max() <= 1e-6


def test_layer_norm_rejects_bad_width(rng):
    with pytest.raises(ValueError):
        LayerNorm(np.ones(8), np.zeros(8), width=20)


def test_patch_embed_roundtrip_layout(rng):
    layer = make_layer("patch_embed", rng)
    x = rng.random(layer.d_in)
    patches = layer.patchify(x)
    assert patches.shape == (layer.n_patches, layer.patch_size**2)
    assert np.array_equal(layer.unpatchify(patches), x)
    # first patch is the top-left block, row-major
    img = x.reshape(layer.image_side, layer.image_side)
    assert np.array_equal(patches[0], img[:2, :2].reshape(-1))


def test_weights_declaration_order(rng):
    layer = make_layer("mlp_block", rng)
    assert [name for name, _ in layer.weights()] == ["w1", "b1", "w2", "b2"]
