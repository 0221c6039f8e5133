import numpy as np
import pytest

from moa import tensor as T
from moa.errors import ContractError, GeometryError
from moa.global_attn import (MoaBlock, MoaGeometry, extract_kv_tokens, extract_query_tokens, key_grid_dims,
                             moa_forward, moa_rel_pos_bias, overlap_fraction)
from moa.tensor import Tensor
from moa.verification import (count_placements, finite_diff_grad, micro_moa_geometry, naive_attention,
                              naive_sliding_patches)
from moa.window import scaled_dot_attention, relative_position_index


def random_geometries(n, seed=0):
    """(H, k, s, p) tuples satisfying the key-grid divisibility rule."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        s = int(rng.integers(1, 6))
        k = s + int(rng.integers(0, 4))
        p = int(rng.integers(0, 3))
        n_keys = int(rng.integers(1, 5))
        H = (n_keys - 1) * s + k - 2 * p
        if H >= 1:
            out.append((H, k, s, p))
    return out


def perturbed_block(geom, heads, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    blk = MoaBlock(geom, heads, rng=rng)
    for _, p in blk.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return blk


# -- grid arithmetic -------------------------------------------------------------

def test_key_grid_stage1_walkthrough():
    assert key_grid_dims(56, 56, 16, 1, 14) == (4, 4)
    g = MoaGeometry(56, 56, 96, 32, 14, 16, 14, 1).validate()
    assert g.query_grid == (4, 4) and g.key_grid == (4, 4)


def test_key_grid_stage2():
    assert key_grid_dims(28, 28, 16, 1, 14) == (2, 2)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_key_grid_degenerate_partition(n):
    assert key_grid_dims(4 * n, 4 * n, 4, 0, 4) == (n, n)


def test_key_grid_error_suggests_padding():
    with pytest.raises(GeometryError) as err:
        key_grid_dims(56, 56, 16, 0, 14)
    assert "padding=1" in str(err.value)


def test_key_grid_matches_brute_force_count():
    for H, k, s, p in random_geometries(100, seed=1):
        W = H
        assert key_grid_dims(H, W, k, p, s) == (count_placements(H, k, s, p), count_placements(W, k, s, p))


def test_geometry_invariants_rejected():
    with pytest.raises(GeometryError):
        MoaGeometry(56, 56, 96, 32, 5, 7, 5, 1).validate()  # q does not divide H
    with pytest.raises(GeometryError):
        MoaGeometry(8, 8, 8, 3, 4, 6, 4, 1).validate()  # R does not divide C
    with pytest.raises(GeometryError):
        MoaGeometry(8, 8, 8, 2, 4, 3, 4, 1).validate()  # k < s


# -- overlap -----------------------------------------------------------------------

def test_overlap_fraction_values():
    assert overlap_fraction(4, 4) == 0
    assert overlap_fraction(6, 4) == pytest.approx(1 / 3)
    assert overlap_fraction(8, 4) == 0.5
    with pytest.raises(ContractError):
        overlap_fraction(3, 4)


# -- token extraction --------------------------------------------------------------

def test_query_tokens_walkthrough_shape():
    r = Tensor(np.zeros((1, 56, 56, 3)))
    assert extract_query_tokens(r, 14).shape == (1, 16, 588)


def test_query_single_token_is_whole_map():
    x = np.random.default_rng(2).standard_normal((1, 4, 4, 2))
    tok = extract_query_tokens(Tensor(x), 4).data
    assert np.array_equal(tok, x.reshape(1, 1, 32))


def test_query_tokens_scatter_round_trip():
    x = np.random.default_rng(3).standard_normal((2, 8, 12, 3))
    tok = extract_query_tokens(Tensor(x), 4).data
    rec = np.zeros_like(x)
    for b in range(2):
        for n in range(6):
            i, j = divmod(n, 3)
            rec[b, 4 * i:4 * i + 4, 4 * j:4 * j + 4] = tok[b, n].reshape(4, 4, 3)
    assert np.array_equal(rec, x)


def test_kv_constant_interior_patch():
    x = Tensor(np.full((1, 10, 10, 2), 2.5))
    tok = extract_kv_tokens(x, 4, 4, 1).data  # 3x3 key grid
    assert np.all(tok[0, 4] == 2.5)  # centre patch never touches padding


def test_kv_walkthrough_corner_padding():
    rng = np.random.default_rng(4)
    x = rng.uniform(1, 2, (1, 56, 56, 3))
    tok = extract_kv_tokens(Tensor(x), 16, 14, 1).data
    assert tok.shape == (1, 16, 16 * 16 * 3)
    corner = tok[0, 0].reshape(16, 16, 3)
    assert np.all(corner[0] == 0) and np.all(corner[:, 0] == 0)
    assert np.all(corner[1:, 1:] > 0)
    last = tok[0, 15].reshape(16, 16, 3)
    assert np.all(last[-1] == 0) and np.all(last[:, -1] == 0)


def test_kv_equals_query_tokens_when_no_overlap():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 8, 8, 3)))
    assert np.array_equal(extract_kv_tokens(x, 4, 4, 0).data, extract_query_tokens(x, 4).data)


def test_kv_matches_naive_over_100_geometries():
    rng = np.random.default_rng(6)
    for H, k, s, p in random_geometries(100, seed=7):
        # independent width with the same k, s, p
        W = (int(rng.integers(1, 4)) - 1) * s + k - 2 * p
        W = W if W >= 1 else H
        x = rng.standard_normal((2, H, W, 2))
        assert np.array_equal(extract_kv_tokens(Tensor(x), k, s, p).data, naive_sliding_patches(x, k, s, p))


def test_naive_patches_all_zero_map():
    assert not naive_sliding_patches(np.zeros((6, 6, 2)), 4, 2, 1).any()


def test_kv_gradient_sums_overlaps():
    x = Tensor(np.random.default_rng(8).standard_normal((1, 8, 8, 1)), requires_grad=True)
    T.backward(extract_kv_tokens(x, 6, 4, 1).sum())
    counts = np.zeros((10, 10))
    for i in range(2):
        for j in range(2):
            counts[4 * i:4 * i + 6, 4 * j:4 * j + 6] += 1
    assert np.array_equal(x.grad[0, :, :, 0], counts[1:9, 1:9])


# -- relative position bias ------------------------------------------------------

def test_moa_bias_coincident_grids_reduce_to_window_index():
    g = MoaGeometry(56, 56, 96, 32, 14, 16, 14, 1)
    assert np.array_equal(moa_rel_pos_bias(4, 4, 4, 4, g), relative_position_index(4, 4))
    assert np.array_equal(moa_rel_pos_bias(4, 4, 4, 4), relative_position_index(4, 4))


def test_moa_bias_4x4_diagonal_constant():
    idx = moa_rel_pos_bias(4, 4, 4, 4)
    assert idx.shape == (16, 16)
    assert len(set(np.diag(idx))) == 1


def test_moa_bias_snaps_into_query_table():
    g = MoaGeometry(8, 8, 8, 2, 4, 4, 2, 1)  # 2x2 queries, 4x4 keys
    idx = moa_rel_pos_bias(2, 2, 4, 4, g)
    assert idx.shape == (4, 16)
    assert idx.min() >= 0 and idx.max() < 9


def test_zero_bias_table_equals_unbiased_attention():
    rng = np.random.default_rng(9)
    q, k, v = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    blk = MoaBlock(micro_moa_geometry(), 2, rng=rng)
    blk.rel_pos_bias.table.data = np.zeros_like(blk.rel_pos_bias.table.data)
    a = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), blk.rel_pos_bias()).data
    assert np.max(np.abs(a - naive_attention(q, k, v))) < 1e-12


# -- block -------------------------------------------------------------------------

def test_zero_out_conv_is_identity():
    g = micro_moa_geometry()
    blk = MoaBlock(g, 2, rng=np.random.default_rng(10))
    x = np.random.default_rng(11).standard_normal((2, 8, 8, 8))
    assert np.array_equal(moa_forward(Tensor(x), blk, g).data, x)


def test_walkthrough_intermediate_shapes():
    g = MoaGeometry(56, 56, 96, 32, 14, 16, 14, 1)
    blk = MoaBlock(g, 3, rng=np.random.default_rng(12))
    x = Tensor(np.random.default_rng(13).standard_normal((1, 56, 56, 96)))
    r = blk.reduce(x)
    assert r.shape == (1, 56, 56, 3)
    tq = blk.q_proj(extract_query_tokens(r, 14))
    assert tq.shape == (1, 16, 96)
    kv = extract_kv_tokens(r, 16, 14, 1)
    assert blk.k_proj(kv).shape == (1, 16, 96) and blk.v_proj(kv).shape == (1, 16, 96)
    assert blk.global_tokens(x).shape == (1, 4, 4, 96)
    assert blk(x).shape == (1, 56, 56, 96)


def test_global_reach_sensitivity():
    g = micro_moa_geometry()
    blk = perturbed_block(g, 2, 14)
    x = np.random.default_rng(15).standard_normal((1, 8, 8, 8))
    y = x.copy()
    y[0, 0, 0, 1] += 1.0  # window (0, 0)
    d = np.abs(blk(Tensor(y)).data - blk(Tensor(x)).data)
    assert d[0, 4:, 4:].max() > 0  # window (1, 1) does not contain the pixel


def test_broadcast_delta_constant_per_window():
    g = micro_moa_geometry()
    blk = perturbed_block(g, 2, 16)
    x = np.random.default_rng(17).standard_normal((2, 8, 8, 8))
    delta = blk(Tensor(x)).data - x
    glob = blk.out_conv(blk.global_tokens(Tensor(x))).data
    for i in range(2):
        for j in range(2):
            win = delta[:, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
            # out = x + g exactly, so (out - x) may differ from g by one rounding step only
            assert np.allclose(win, glob[:, i, j][:, None, None], rtol=0, atol=1e-14)
    out = x.reshape(2, 2, 4, 2, 4, 8) + glob.reshape(2, 2, 1, 2, 1, 8)
    assert np.array_equal(blk(Tensor(x)).data, out.reshape(2, 8, 8, 8))


def test_no_overlap_keys_equal_queries():
    g = MoaGeometry(8, 8, 8, 2, 4, 4, 4, 0).validate()
    blk = MoaBlock(g, 2, rng=np.random.default_rng(18))
    r = blk.reduce(Tensor(np.random.default_rng(19).standard_normal((1, 8, 8, 8))))
    assert np.array_equal(extract_kv_tokens(r, 4, 4, 0).data, extract_query_tokens(r, 4).data)


def test_wrong_map_shape():
    blk = MoaBlock(micro_moa_geometry(), 2)
    with pytest.raises(GeometryError):
        blk(Tensor(np.zeros((1, 16, 16, 8))))


def test_moa_gradcheck_micro_instance():
    g = micro_moa_geometry()
    assert (g.H, g.C, g.query_patch, g.kv_patch, g.kv_stride, g.kv_padding, g.reduction) == (8, 8, 4, 6, 4, 1, 2)
    blk = perturbed_block(g, 2, 20)
    rng = np.random.default_rng(21)
    x = Tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True)
    w = 1e-4 * rng.standard_normal((1, 8, 8, 8))
    rep = finite_diff_grad(lambda: (blk(x) * Tensor(w)).sum(), dict(blk.named_parameters(), input=x))
    assert rep.max_rel_error < 1e-4, rep.worst
