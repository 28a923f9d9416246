"""Segment importance scores, heatmap rendering, and the similarity scorer."""
import numpy as np
import pytest

from fiberwalk.attribution import (ImportanceMap, cosine_similarity_eval,
                                   feature_importance, importance_heatmap,
                                   load_ground_truth)
from fiberwalk.geometry import eigen_split, pullback_metric
from fiberwalk.layers import Affine, PatchEmbed, PositionalAdd, Tanh
from fiberwalk.network import Network, build_tiny_vit, forward
from conftest import full_rank_matrix


def patch_net(rng, side=4, patch=2, hidden=3, classes=2, head=None, pos=None):
    """PatchEmbed -> PositionalAdd -> (Tanh) -> Affine head."""
    n_patches = (side // patch) ** 2
    embed = PatchEmbed(full_rank_matrix(rng, hidden, patch * patch),
                       rng.standard_normal(hidden), side, patch)
    posl = PositionalAdd(pos if pos is not None
                         else rng.standard_normal((n_patches, hidden)))
    width = n_patches * hidden
    head_w = head if head is not None else full_rank_matrix(rng, classes, width)
    layers = (embed, posl, Tanh(width), Affine(head_w, np.zeros(classes)))
    return Network(layers, embed_boundary=2, embed_shape=(n_patches, hidden))


def test_zero_influence_segments_score_zero(rng):
    # head reads only segment 0's coordinates
    net = patch_net(rng, head=None)
    tokens, hidden = net.embed_shape
    head = np.zeros((2, tokens * hidden))
    head[:, :hidden] = full_rank_matrix(rng, 2, hidden)
    net = patch_net(rng, head=head)
    imap = feature_importance(net, rng.random(net.d_in))
    assert imap.scores[0] > 0
    g = pullback_metric(net, forward(net, np.zeros(net.d_in)).at(2), from_layer=2)
    lam_max = eigen_split(g).lambda_max
    assert np.all(imap.scores[1:] <= 1e-6 * lam_max)


def test_single_segment_scores_full_lambda_max(rng):
    net = patch_net(rng, side=4, patch=4, hidden=16)  # one patch only
    x = rng.random(net.d_in)
    imap = feature_importance(net, x)
    assert imap.scores.shape == (1,)
    e = forward(net, x).at(net.embed_boundary)
    dec = eigen_split(pullback_metric(net, e, from_layer=net.embed_boundary))
    assert imap.scores[0] == pytest.approx(dec.lambda_max, rel=1e-10)


def test_tied_segments_score_equally(rng):
    # zero positions, identical patch pixels, head columns tied over
    # segments 1 and 2: their metric blocks coincide
    side, patch, hidden = 4, 2, 3
    n_patches = 4
    head = rng.standard_normal((2, n_patches * hidden))
    head[:, 1 * hidden:2 * hidden] = head[:, 2 * hidden:3 * hidden]
    net = patch_net(rng, side=side, patch=patch, hidden=hidden, head=head,
                    pos=np.zeros((n_patches, hidden)))
    embed = net.layers[0]
    patches = rng.random((n_patches, patch * patch))
    patches[2] = patches[1]
    x = embed.unpatchify(patches)
    imap = feature_importance(net, x)
    assert abs(imap.scores[1] - imap.scores[2]) <= 1e-8


def test_patch_permutation_permutes_scores(rng):
    # with a zeroed positional table the network treats patch tokens
    # symmetrically, so permuting input patches permutes the scores
    net = build_tiny_vit(patch_size=4, hidden=8, layers=1, heads=2, classes=4,
                         image_side=8, seed=2)
    layers = list(net.layers)
    pos = layers[1]
    layers[1] = PositionalAdd(np.zeros_like(pos.pos))
    net = Network(tuple(layers), embed_boundary=net.embed_boundary,
                  embed_shape=net.embed_shape)
    embed = net.layers[0]
    x = rng.random(net.d_in)
    perm = rng.permutation(embed.n_patches)
    x_perm = embed.unpatchify(embed.patchify(x)[perm])
    base = feature_importance(net, x).scores
    permuted = feature_importance(net, x_perm).scores
    assert np.allclose(permuted, base[perm], rtol=1e-9, atol=1e-12)


def test_block_spectrum_bounds(rng):
    net = patch_net(rng)
    x = rng.random(net.d_in)
    imap = feature_importance(net, x)
    e = forward(net, x).at(net.embed_boundary)
    g = pullback_metric(net, e, from_layer=net.embed_boundary).matrix
    lam_max = eigen_split(g).lambda_max
    tokens, hidden = net.embed_shape
    block_traces = sum(np.trace(g[i * hidden:(i + 1) * hidden,
                                  i * hidden:(i + 1) * hidden])
                       for i in range(tokens))
    assert imap.scores.max() <= lam_max * (1 + 1e-12)
    assert lam_max <= block_traces * (1 + 1e-12)


def test_importance_map_validation_and_csv():
    with pytest.raises(ValueError):
        ImportanceMap(np.array([1.0, -0.5]))
    with pytest.raises(ValueError):
        ImportanceMap(np.array([1.0, 2.0, 3.0]), grid=(2, 2))
    imap = ImportanceMap(np.array([0.5, 1.5]))
    back = ImportanceMap.from_csv(imap.to_csv())
    assert np.array_equal(back.scores, imap.scores)


def test_heatmap_minmax_and_tiling():
    imap = ImportanceMap(np.array([0.0, 1.0]), grid=(1, 2), patch_size=2)
    img = importance_heatmap(imap)
    assert img.shape == (2, 4)
    assert np.array_equal(img[:, :2], np.zeros((2, 2)))
    assert np.array_equal(img[:, 2:], np.ones((2, 2)))


def test_heatmap_degenerate_scores_mid_gray():
    imap = ImportanceMap(np.full(4, 2.5), grid=(2, 2), patch_size=3)
    assert np.array_equal(importance_heatmap(imap), np.full((6, 6), 0.5))


def test_heatmap_fig_grid_reconstruction():
    imap = ImportanceMap(np.linspace(0, 1, 196), grid=(14, 14), patch_size=2)
    assert importance_heatmap(imap).shape == (28, 28)
    assert importance_heatmap(imap, normalization="log").shape == (28, 28)
    with pytest.raises(ValueError):
        importance_heatmap(imap, normalization="sqrt")
    with pytest.raises(ValueError):
        importance_heatmap(ImportanceMap(np.ones(3)))


def test_cosine_identical_vectors():
    assert cosine_similarity_eval([1.0, 2.0, 0.5], [1.0, 2.0, 0.5]) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_indicators():
    assert cosine_similarity_eval([1, 0, 0], [0, 1, 0]) == pytest.approx(0.0, abs=1e-12)


def test_cosine_minmax_alignment():
    assert cosine_similarity_eval([1.0, 2.0, 3.0], [0.0, 0.5, 1.0]) == pytest.approx(1.0, abs=1e-12)


def test_cosine_scale_invariance(rng):
    pred = rng.random(8)
    truth = rng.random(8)
    base = cosine_similarity_eval(pred, truth)
    for c in (0.1, 3.0, 1000.0):
        assert cosine_similarity_eval(c * pred, truth) == pytest.approx(base, abs=1e-12)


def test_cosine_degenerate_vector_flags():
    with pytest.warns(UserWarning):
        assert cosine_similarity_eval([1.0, 1.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity_eval([1.0, 2.0], [1.0, 2.0, 3.0])


def test_ground_truth_parsing(tmp_path):
    path = tmp_path / "truth.txt"
    path.write_text("the 0.0\nslur 1.0\nword 0.5\n\nother 0.25\n")
    sentences = load_ground_truth(path)
    assert len(sentences) == 2
    assert sentences[0].tokens == ("the", "slur", "word")
    assert np.array_equal(sentences[0].values, [0.0, 1.0, 0.5])
    assert sentences[1].tokens == ("other",)
    bad = tmp_path / "bad.txt"
    bad.write_text("token 2.0\n")
    with pytest.raises(ValueError):
        load_ground_truth(bad)
