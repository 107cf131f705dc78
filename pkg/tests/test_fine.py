import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiermem.coarse import dense_retrieve
from hiermem.fine import (
    FineReadInput,
    TopKIndexSet,
    expand_to_fine,
    residual_fuse,
    restrict_guidance,
    scale_budget,
    select_topk_candidates,
    sparse_read,
    topk_guided_read,
)
from hiermem.harness import oracles
from hiermem.tensor import IndexRangeError, OpCounter, PreconditionError, ShapeError


def _fine(rng, t=2, h=4, w=4, ck=5, cv=3):
    return FineReadInput(
        rng.standard_normal((t, h, w, ck)),
        rng.standard_normal((t, h, w, cv)),
        rng.standard_normal((h, w, ck)),
        rng.standard_normal((h, w, cv)),
    )


def _distinct_candidates(rng, n_mem, n_q, n):
    return np.stack([rng.permutation(n_mem)[:n] for _ in range(n_q)])


def test_budget():
    assert scale_budget(32, "res3") == 32 and scale_budget(32, "res2") == 8
    with pytest.raises(PreconditionError):
        scale_budget(6, "res2")


def test_select_one_hot():
    g = np.zeros((8, 4))
    g[5, 0] = 1.0
    idx = select_topk_candidates(g, 1, (2, 2, 2))
    assert idx.coords[0, 0].tolist() == [1, 0, 1]


def test_select_uniform_tie_rule():
    g = np.full((8, 4), 1 / 8)
    idx = select_topk_candidates(g, 2, (2, 2, 2))
    flat = idx.coords[..., 0] * 4 + idx.coords[..., 1] * 2 + idx.coords[..., 2]
    assert np.array_equal(flat, [[0, 1]] * 4)


def test_select_matches_sort_oracle(rng):
    g = rng.random((2 * 8 * 8, 64))
    idx = select_topk_candidates(g, 32, (2, 8, 8))
    flat = idx.coords[..., 0] * 64 + idx.coords[..., 1] * 8 + idx.coords[..., 2]
    for q in range(64):
        assert flat[q].tolist() == oracles.oracle_topk(g[:, q], 32)
        assert len(set(flat[q].tolist())) == 32


def test_select_k_too_large():
    with pytest.raises(PreconditionError):
        select_topk_candidates(np.ones((8, 4)), 9, (2, 2, 2))


def test_restrict_guidance_keeps_order():
    g = np.arange(24.0).reshape(6, 4)
    out = restrict_guidance(g, [1, 5, 12], [12, 1])
    assert np.array_equal(out, g[[0, 1, 4, 5]])
    with pytest.raises(PreconditionError):
        restrict_guidance(g, [1, 5, 12], [7])


def test_expand_single_block():
    idx = TopKIndexSet("res3", np.zeros((1, 1, 3), np.int64), (1, 1, 1), (1, 1))
    cand = expand_to_fine(idx)
    # fine flat index y*2 + x for (0,0), (0,1), (1,0), (1,1)
    assert cand.tolist() == [[0, 1, 2, 3]] * 4


@pytest.mark.parametrize("scale", ["res3", "res2"])
def test_expand_matches_loop_oracle(rng, scale):
    f = 2 if scale == "res3" else 4
    t, h, w, k = 2, 3, 4, 5
    coords = np.stack(
        [rng.integers(0, t, (h * w, k)), rng.integers(0, h, (h * w, k)), rng.integers(0, w, (h * w, k))],
        axis=-1,
    )
    idx = TopKIndexSet(scale, coords, (t, h, w), (h, w))
    cand = expand_to_fine(idx, (t, h * f, w * f))
    assert np.array_equal(cand, oracles.oracle_expand(coords, f, (t, h * f, w * f)))


@pytest.mark.parametrize("k", [8, 16, 32])
def test_candidate_counts(rng, k):
    g = rng.random((2 * 8 * 8, 64))
    for scale in ("res3", "res2"):
        f = 2 if scale == "res3" else 4
        idx = select_topk_candidates(g, scale_budget(k, scale), (2, 8, 8), scale)
        cand = expand_to_fine(idx, (2, 8 * f, 8 * f))
        assert cand.shape == (64 * f * f, 4 * k)
        assert all(len(set(row)) == 4 * k for row in cand[:: 7].tolist())


def test_expand_shape_mismatch():
    idx = TopKIndexSet("res3", np.zeros((1, 1, 3), np.int64), (1, 1, 1), (1, 1))
    with pytest.raises(ShapeError):
        expand_to_fine(idx, (1, 4, 4))


def test_sparse_single_candidate(rng):
    inp = _fine(rng)
    cand = rng.integers(0, 32, size=(16, 1))
    out = sparse_read(inp, cand)
    assert np.array_equal(out.reshape(16, 3), inp.memory_values.reshape(32, 3)[cand[:, 0]])


def test_sparse_full_candidates_is_dense(rng):
    inp = _fine(rng, t=2, h=6, w=6)
    cand = np.tile(np.arange(72), (36, 1))
    out = sparse_read(inp, cand)
    ref = oracles.oracle_dense_read(inp.memory_keys, inp.memory_values, inp.query_key)
    assert np.allclose(out, ref, atol=1e-9)
    assert np.allclose(out, dense_retrieve(inp.memory_keys, inp.memory_values, inp.query_key), atol=1e-12)


def test_sparse_matches_scalar_oracle(rng):
    inp = _fine(rng)
    cand = _distinct_candidates(rng, 32, 16, 7)
    ref = oracles.oracle_sparse_read(inp.memory_keys, inp.memory_values, inp.query_key, cand)
    assert np.allclose(sparse_read(inp, cand, chunk_elems=50), ref, atol=1e-9)


def test_sparse_weights_and_counts(rng):
    inp = _fine(rng)
    cand = _distinct_candidates(rng, 32, 16, 9)
    c = OpCounter()
    _, wts = sparse_read(inp, cand, c, return_weights=True)
    assert np.allclose(wts.sum(axis=1), 1.0, atol=1e-9)
    assert c.mul_adds == c.gathers == 16 * 9 * (5 + 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sparse_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    inp = _fine(rng)
    cand = _distinct_candidates(rng, 32, 16, 6)
    perm = np.stack([rng.permutation(row) for row in cand])
    assert np.allclose(sparse_read(inp, cand), sparse_read(inp, perm), atol=1e-12)


def test_sparse_superset_keeps_argmax(rng):
    inp = _fine(rng)
    cand = _distinct_candidates(rng, 32, 16, 4)
    _, w_small = sparse_read(inp, cand, return_weights=True)
    best = cand[np.arange(16), w_small.argmax(axis=1)]
    bigger = np.stack([np.concatenate([row, np.setdiff1d(np.arange(32), row)[:10]]) for row in cand])
    _, w_big = sparse_read(inp, bigger, return_weights=True)
    pos = [row.tolist().index(b) for row, b in zip(bigger, best)]
    assert np.all(w_big[np.arange(16), pos] > 0)


def test_sparse_bad_index(rng):
    inp = _fine(rng)
    cand = np.zeros((16, 2), np.int64)
    cand[3, 1] = 32
    with pytest.raises(IndexRangeError):
        sparse_read(inp, cand)
    with pytest.raises(ShapeError):
        sparse_read(inp, cand[:5])


def test_fuse_rate_one_and_zero(rng):
    qv, r = rng.standard_normal((3, 3, 2)), rng.standard_normal((3, 3, 2))
    assert np.array_equal(residual_fuse(qv, r, dropout_rate=1.0), qv)
    assert np.array_equal(residual_fuse(qv, r, (np.eye(2), np.zeros(2))), qv + r)


def test_fuse_seeded_decision_reproducible(rng):
    qv, r = rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2, 2))
    outcomes = set()
    for seed in range(20):
        a = residual_fuse(qv, r, dropout_rate=0.5, rng_seed=seed)
        b = residual_fuse(qv, r, dropout_rate=0.5, rng_seed=seed)
        assert np.array_equal(a, b)
        dropped = np.array_equal(a, qv)
        assert dropped or np.array_equal(a, qv + r)
        outcomes.add(dropped)
    assert outcomes == {True, False}


def test_fuse_projection_shape(rng):
    with pytest.raises(ShapeError):
        residual_fuse(np.ones((2, 2, 3)), np.ones((2, 2, 2)))
    out = residual_fuse(np.ones((2, 2, 3)), np.ones((2, 2, 2)), (np.ones((2, 3)), np.zeros(3)))
    assert np.array_equal(out, np.full((2, 2, 3), 3.0))


def test_dropout_rate_validated(rng):
    with pytest.raises(PreconditionError):
        FineReadInput(np.ones((1, 2, 2, 1)), np.ones((1, 2, 2, 1)), np.ones((2, 2, 1)), np.ones((2, 2, 1)), dropout_rate=1.5)


def test_topk_guided_read_full_k(rng):
    inp = _fine(rng, t=2, h=4, w=4)
    g = rng.random((2 * 2 * 2, 4))
    full = FineReadInput(inp.memory_keys, inp.memory_values, inp.query_key, inp.query_value, g)
    out = topk_guided_read(full, 8, "res3")
    ref = oracles.oracle_dense_read(inp.memory_keys, inp.memory_values, inp.query_key)
    assert np.allclose(out, inp.query_value + ref, atol=1e-9)
