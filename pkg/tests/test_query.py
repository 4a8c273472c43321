import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memseg import tensor as T
from memseg.query import (CoordGrid, PositionalEncoder, QueryHead, bilinear_baseline, nearest_lookup,
                          periodic_encode, query_mask, query_pixel, query_width)
from memseg.tensor import ShapeError, Tensor

from _gradcheck import gradcheck, jitter_params, weighted_sum


def brute_nearest(xq, h, w):
    centers = CoordGrid(h, w).centers()
    d2 = ((xq[:, None, :] - centers[None]) ** 2).sum(-1)
    flat = np.argmin(d2, axis=1)      # first minimum = smallest row, then column
    return np.stack([flat // w, flat % w], axis=1)


def test_coord_grid_centers():
    g = CoordGrid(2, 4)
    np.testing.assert_allclose(g.rows(), [-0.5, 0.5])
    np.testing.assert_allclose(g.cols(), [-0.75, -0.25, 0.25, 0.75])
    with pytest.raises(ValueError):
        CoordGrid(0, 3)


def test_nearest_lookup_corner():
    idx, center = nearest_lookup(np.array([0.9, 0.9]), CoordGrid(2, 2))
    assert tuple(idx) == (1, 1)
    np.testing.assert_allclose(center, [0.5, 0.5])


def test_nearest_lookup_at_center_has_zero_offset():
    g = CoordGrid(5, 3)
    idx, center = nearest_lookup(g.centers(), g)
    np.testing.assert_array_equal(center, g.centers())
    np.testing.assert_array_equal(idx[:, 0] * 3 + idx[:, 1], np.arange(15))


def test_nearest_lookup_ties_go_to_smaller_index():
    idx, _ = nearest_lookup(np.array([[0.0, 0.0]]), CoordGrid(2, 2))
    assert tuple(idx[0]) == (0, 0)


def test_nearest_lookup_matches_exhaustive_7x5(rng):
    xq = rng.uniform(-1, 1, size=(1000, 2))
    idx, _ = nearest_lookup(xq, CoordGrid(7, 5))
    np.testing.assert_array_equal(idx, brute_nearest(xq, 7, 5))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), seed=st.integers(0, 2**31))
def test_nearest_lookup_random_grids(h, w, seed):
    r = np.random.default_rng(seed)
    xq = r.uniform(-1, 1, size=(64, 2))
    # include exact boundaries between cells, where ties happen
    xq[:4] = [[-1 + 2 * (r.integers(0, h + 1)) / h, -1 + 2 * (r.integers(0, w + 1)) / w] for _ in range(4)]
    idx, center = nearest_lookup(xq, CoordGrid(h, w))
    centers = CoordGrid(h, w).centers()
    d2 = ((xq[:, None, :] - centers[None]) ** 2).sum(-1)
    # the chosen center is nearest up to rounding; away from ties it is the exhaustive answer
    np.testing.assert_allclose(((xq - center) ** 2).sum(-1), d2.min(1), atol=1e-12)
    clear = np.sort(d2, axis=1)[:, 1] - d2.min(1) > 1e-9 if d2.shape[1] > 1 else np.ones(len(xq), bool)
    np.testing.assert_array_equal(idx[clear], brute_nearest(xq, h, w)[clear])


def test_output_grid_partitions_into_quadrants():
    idx, _ = nearest_lookup(CoordGrid(8, 8).centers(), CoordGrid(2, 2))
    cell = (idx[:, 0] * 2 + idx[:, 1]).reshape(8, 8)
    expected = np.block([[np.zeros((4, 4)), np.ones((4, 4))], [2 * np.ones((4, 4)), 3 * np.ones((4, 4))]])
    np.testing.assert_array_equal(cell, expected)


# ---------------------------------------------------------------- encoding

def test_freqs_initialised():
    np.testing.assert_allclose(PositionalEncoder(4).freqs.data, 2 * np.exp([1, 2, 3, 4]))


def test_encode_zero_delta():
    enc = PositionalEncoder(3)
    out = periodic_encode(np.zeros((1, 2)), enc).data.reshape(2, 3, 2)
    np.testing.assert_array_equal(out[..., 0], 0.0)
    for axis in range(2):
        np.testing.assert_array_equal(out[axis, :, 1], enc.freqs.data)


def test_encode_parity(rng):
    enc = PositionalEncoder(4)
    d = rng.uniform(-0.3, 0.3, size=(5, 2))
    a = periodic_encode(d, enc).data.reshape(5, 2, 4, 2)
    b = periodic_encode(-d, enc).data.reshape(5, 2, 4, 2)
    np.testing.assert_allclose(b[..., 0], -a[..., 0], rtol=1e-15)
    np.testing.assert_array_equal(b[..., 1], a[..., 1])


def test_encode_direct_evaluation():
    enc = PositionalEncoder(2)
    w1, w2 = 2 * np.e, 2 * np.e ** 2
    s, c = np.sin(0.25), np.cos(0.25)
    expected = [w1 * s, w1 * c, w2 * s, w2 * c, 0.0, w1, 0.0, w2]
    np.testing.assert_allclose(periodic_encode(np.array([[0.25, 0.0]]), enc).data[0], expected, rtol=1e-15)


def test_encode_gradient_reaches_freqs(rng):
    enc = PositionalEncoder(3)
    d = rng.uniform(-0.5, 0.5, size=(4, 2))
    assert gradcheck(lambda: weighted_sum(periodic_encode(d, enc)), [enc.freqs]) < 1e-4


# ---------------------------------------------------------------- query head

@pytest.fixture
def parts(small_cfg, rng):
    c = small_cfg
    latent = Tensor(rng.normal(size=(1, c.feat_dim, 2, 3)), requires_grad=True)
    gb = Tensor(T.softmax(Tensor(rng.normal(size=(1, c.num_classes, 4, 4))), axis=1).data, requires_grad=True)
    gl = Tensor(T.softmax(Tensor(rng.normal(size=(1, c.num_classes, 8, 8))), axis=1).data, requires_grad=True)
    enc = PositionalEncoder(c.n_freqs)
    head = QueryHead(c.feat_dim, c.num_classes, c.n_freqs, c.hidden, seed=2)
    return latent, gb, gl, enc, head


def test_query_width_formula(small_cfg):
    c = small_cfg
    assert query_width(c.feat_dim, c.num_classes, c.n_freqs) == c.feat_dim + 3 * (2 + 4 * c.n_freqs) + 2 * c.num_classes
    assert query_width(32, 8, 4) == 102


def test_head_rejects_wrong_width(parts):
    *_, head = parts
    with pytest.raises(ShapeError, match="query head"):
        head(Tensor(np.zeros((2, head.in_features + 1))))


def test_query_pixel_rejects_channel_mismatch(parts, rng):
    latent, gb, gl, enc, head = parts
    bad = Tensor(rng.normal(size=(1, latent.shape[1] + 1, 2, 3)))
    with pytest.raises(ShapeError):
        query_pixel([0.1, 0.2], bad, gb, gl, enc, head)


def oracle_vector(xq, grids, freqs):
    """The concatenation written out once, independently of the library."""
    vec = []
    for g in grids:
        _, h, w = g.shape
        centers = CoordGrid(h, w).centers()
        k = int(np.argmin(((centers - xq) ** 2).sum(1)))
        d = xq - centers[k]
        vec += list(g[:, k // w, k % w]) + list(d)
        for a in range(2):
            for om in freqs:
                vec += [om * np.sin(d[a]), om * np.cos(d[a])]
    return np.array(vec)


def test_query_pixel_matches_concatenation_oracle(parts):
    latent, gb, gl, enc, head = parts
    jitter_params(head)
    xq = np.array([0.31, -0.58])
    v = oracle_vector(xq, [latent.data[0], gb.data[0], gl.data[0]], enc.freqs.data)
    x = v * head.input_scale
    layers = head.mlp.layers
    for lay in layers[:-1]:
        x = np.maximum(x @ lay.weight.data + lay.bias.data, 0)
    expected = x @ layers[-1].weight.data + layers[-1].bias.data
    got = query_pixel(xq, latent.data[0], gb.data[0], gl.data[0], enc, head).data
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_same_cells_same_deltas_identical(parts):
    latent, gb, gl, enc, head = parts
    a = query_pixel([0.1, 0.2], latent, gb, gl, enc, head).data
    b = query_pixel([0.1, 0.2], latent, gb, gl, enc, head).data
    np.testing.assert_array_equal(a, b)


def test_unguided_decoder_permutes_with_latent(parts, rng):
    latent, _, _, enc, head = parts
    n, d, h, w = latent.shape
    perm = rng.permutation(h * w)
    flat = latent.data.reshape(d, h * w)
    permuted = Tensor(flat[:, perm].reshape(n, d, h, w))
    out = query_mask(latent, None, None, h, w, enc, head).data.reshape(-1, h * w)
    out_p = query_mask(permuted, None, None, h, w, enc, head).data.reshape(-1, h * w)
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-13, atol=1e-13)


def test_query_mask_chunking_is_bit_identical(parts):
    latent, gb, gl, enc, head = parts
    ref = query_mask(latent, gb, gl, 13, 11, enc, head, chunk_rows=13).data
    for rows in (1, 4, 100):
        np.testing.assert_array_equal(query_mask(latent, gb, gl, 13, 11, enc, head, chunk_rows=rows).data, ref)


def test_query_mask_any_resolution(parts):
    latent, gb, gl, enc, head = parts
    for h, w in ((1, 1), (5, 9), (16, 16)):
        assert query_mask(latent, gb, gl, h, w, enc, head).shape == (1, head.mlp.layers[-1].weight.shape[1], h, w)


def test_query_mask_matches_query_pixel(parts):
    latent, gb, gl, enc, head = parts
    full = query_mask(latent, gb, gl, 6, 5, enc, head).data[0]
    ys, xs = CoordGrid(6, 5).rows(), CoordGrid(6, 5).cols()
    got = query_pixel([ys[4], xs[1]], latent, gb, gl, enc, head).data
    np.testing.assert_allclose(got, full[:, 4, 1], rtol=1e-12)


def test_query_mask_gradients_on_4x4(parts):
    latent, gb, gl, enc, head = parts
    jitter_params(head)
    tensors = [latent, gb, gl, enc.freqs] + head.parameters()
    assert gradcheck(lambda: weighted_sum(query_mask(latent, gb, gl, 4, 4, enc, head, 2)), tensors) < 1e-4


def test_disabled_guidance_is_zero_filled(parts):
    latent, gb, gl, enc, head = parts
    zeros_b = Tensor(np.zeros(gb.shape))
    zeros_l = Tensor(np.zeros(gl.shape))
    # with zero masks the value terms vanish, but offsets still differ; so compare against a
    # head whose weights on guidance columns are zero
    d = latent.shape[1]
    width = d + 2 + 4 * enc.n
    for lay in head.mlp.layers[:1]:
        lay.weight.data[width:] = 0.0
    a = query_mask(latent, None, None, 4, 4, enc, head).data
    b = query_mask(latent, zeros_b, zeros_l, 4, 4, enc, head).data
    np.testing.assert_allclose(a, b, rtol=1e-13)


# ---------------------------------------------------------------- bilinear baseline

def test_bilinear_constant_from_single_pixel():
    out = bilinear_baseline(Tensor(np.full((1, 2, 1, 1), 3.5)), 4, 5).data
    np.testing.assert_allclose(out, 3.5)


def test_bilinear_identity(rng):
    x = rng.normal(size=(1, 3, 4, 6))
    np.testing.assert_allclose(bilinear_baseline(Tensor(x), 4, 6).data, x, rtol=1e-15)


def test_bilinear_2x2_to_3x3_center_is_mean():
    x = np.array([[[[1.0, 2.0], [3.0, 5.0]]]])
    out = bilinear_baseline(Tensor(x), 3, 3).data
    assert out[0, 0, 1, 1] == pytest.approx(x.mean(), rel=1e-15)
