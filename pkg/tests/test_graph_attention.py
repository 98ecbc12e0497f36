"""
Tests for sparse graph attention: dense equivalence, locality and gradients.
"""
import numpy as np
import pytest

from sparse_graph_attention.modules.code_graph import complete_mask, self_loop_counts
from sparse_graph_attention.modules.data_types import DiffusionConfig, EdgeType, ModelConfig
from sparse_graph_attention.modules.errors import DimensionMismatch, EmptyRow, StaleCache
from sparse_graph_attention.modules.graph_attention import (
    AttentionParams,
    dense_attention_forward,
    dense_edge_counts,
    sparse_attention_backward,
    sparse_attention_forward,
)
from sparse_graph_attention.modules.sparse_core import csr_from_edges, fd_gradient, relative_error

from tests.helpers import path_mask, random_symmetric_mask

MODEL = ModelConfig(layers=1, heads=2, d_model=8, d_k=4, d_v=4, d_ff=16)


def random_counts(mask, rng, types=3):
    """At least one edge type per slot, occasionally two (multi-edges)."""
    counts = np.zeros((mask.nnz, types))
    counts[np.arange(mask.nnz), rng.integers(0, types, size=mask.nnz)] = 1.0
    counts[rng.random(mask.nnz) < 0.2, 0] += 1.0
    return counts


def make_params(rng, model=MODEL, scale=1.0):
    params = AttentionParams.init(model, 3, rng)
    params.edge_embeddings = rng.normal(scale=scale, size=params.edge_embeddings.shape)
    return params


@pytest.mark.parametrize("seed", range(50))
def test_sparse_matches_dense_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    kind = seed % 3
    if kind == 0:
        mask = random_symmetric_mask(n, rng, density=0.2)
    elif kind == 1:
        mask = path_mask(n)
    else:
        mask = complete_mask(n)
    counts = random_counts(mask, rng)
    params = make_params(rng)
    h = rng.normal(size=(n, MODEL.d_model))
    sparse_out, _ = sparse_attention_forward(h, mask, counts, params)
    dense_out = dense_attention_forward(h, mask.to_dense(), params, dense_edge_counts(mask, counts))
    np.testing.assert_allclose(sparse_out, dense_out, rtol=0, atol=1e-10)


def test_complete_mask_without_bias_is_vanilla_attention(rng):
    n = 6
    mask = complete_mask(n)
    params = make_params(rng)
    params.edge_embeddings = np.zeros_like(params.edge_embeddings)
    h = rng.normal(size=(n, MODEL.d_model))
    sparse_out, _ = sparse_attention_forward(h, mask, self_loop_counts(mask), params)
    np.testing.assert_allclose(sparse_out, dense_attention_forward(h, None, params), atol=1e-10)


def test_identity_mask_passes_values_through(rng):
    n = 5
    mask = csr_from_edges(n, n, [(i, i, 1.0) for i in range(n)])
    params = make_params(rng)
    h = rng.normal(size=(n, MODEL.d_model))
    out, cache = sparse_attention_forward(h, mask, self_loop_counts(mask), params)
    np.testing.assert_array_equal(cache.weights, 1.0)
    np.testing.assert_allclose(out, (h @ params.w_v) @ params.w_o, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    mask = random_symmetric_mask(20, rng)
    _, cache = sparse_attention_forward(
        rng.normal(size=(20, MODEL.d_model)), mask, random_counts(mask, rng), make_params(rng)
    )
    for head in range(MODEL.heads):
        sums = np.add.reduceat(cache.weights[:, head], mask.row_offsets[:-1])
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_identical_rows_give_uniform_weights(rng):
    n = 7
    params = make_params(rng)
    h = np.tile(rng.normal(size=(1, MODEL.d_model)), (n, 1))
    _, weights = dense_attention_forward(h, np.ones((n, n)), params, return_weights=True)
    for w in weights:
        np.testing.assert_allclose(w, 1.0 / n, atol=1e-12)


def test_dense_empty_row():
    dense = np.eye(3)
    dense[1, 1] = 0.0
    params = AttentionParams.init(MODEL, 3, np.random.default_rng(0))
    with pytest.raises(EmptyRow):
        dense_attention_forward(np.ones((3, MODEL.d_model)), dense, params)


def test_sparse_empty_row(rng):
    mask = csr_from_edges(3, 3, [(0, 0, 1.0), (2, 2, 1.0)])
    with pytest.raises(EmptyRow):
        sparse_attention_forward(np.ones((3, MODEL.d_model)), mask, np.ones((2, 3)), make_params(rng))


def test_misaligned_edge_counts(rng):
    mask = path_mask(4)
    with pytest.raises(DimensionMismatch):
        sparse_attention_forward(np.ones((4, MODEL.d_model)), mask, np.ones((3, 3)), make_params(rng))


def test_structural_locality(rng):
    n = 9
    mask = path_mask(n)
    counts = random_counts(mask, rng)
    params = make_params(rng)
    h = rng.normal(size=(n, MODEL.d_model))
    base, _ = sparse_attention_forward(h, mask, counts, params)
    dense = mask.to_dense()
    for j in range(n):
        bumped = h.copy()
        bumped[j] += 0.5
        out, _ = sparse_attention_forward(bumped, mask, counts, params)
        changed = np.any(out != base, axis=1)
        np.testing.assert_array_equal(changed, dense[:, j] == 1)


def _gradient_case(seed, diffusion=None):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 13))
    mask = random_symmetric_mask(n, rng, density=0.35)
    counts = random_counts(mask, rng)
    params = make_params(rng, scale=0.5)
    h = rng.normal(size=(n, MODEL.d_model))
    weights = rng.normal(size=(n, MODEL.d_model))
    return mask, counts, params, h, weights


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("diffusion", [None, DiffusionConfig(k=2, alpha=0.25)])
def test_backward_matches_finite_differences(seed, diffusion):
    mask, counts, params, h, weights = _gradient_case(seed)

    def loss(h_, p):
        out, _ = sparse_attention_forward(h_, mask, counts, p, diffusion)
        return float(np.sum(out * weights))

    _, cache = sparse_attention_forward(h, mask, counts, params, diffusion)
    grad_h, grads = sparse_attention_backward(weights, cache)
    assert relative_error(grad_h, fd_gradient(lambda x: loss(x, params), h)) < 1e-4
    tensors = params.tensors()
    for name, value in tensors.items():
        def perturbed(x, name=name):
            return loss(h, AttentionParams(**{**tensors, name: x}, heads=params.heads))
        assert relative_error(getattr(grads, name), fd_gradient(perturbed, value)) < 1e-4, name


def test_zero_upstream_gradient(rng):
    mask = path_mask(5)
    _, cache = sparse_attention_forward(rng.normal(size=(5, MODEL.d_model)), mask, random_counts(mask, rng), make_params(rng))
    grad_h, grads = sparse_attention_backward(np.zeros((5, MODEL.d_model)), cache)
    assert not grad_h.any()
    assert all(not g.any() for g in grads.tensors().values())


def test_gradient_outside_neighbourhood_is_zero(rng):
    n = 8
    mask = path_mask(n)
    _, cache = sparse_attention_forward(rng.normal(size=(n, MODEL.d_model)), mask, random_counts(mask, rng), make_params(rng))
    upstream = np.zeros((n, MODEL.d_model))
    upstream[3] = 1.0
    grad_h, _ = sparse_attention_backward(upstream, cache)
    touched = np.any(grad_h != 0, axis=1)
    assert touched.tolist() == [False, False, True, True, True, False, False, False]


def test_stale_cache_detected(rng):
    mask = path_mask(4)
    params = make_params(rng)
    _, cache = sparse_attention_forward(rng.normal(size=(4, MODEL.d_model)), mask, random_counts(mask, rng), params)
    params.w_q += 1.0
    with pytest.raises(StaleCache):
        sparse_attention_backward(np.ones((4, MODEL.d_model)), cache)
    with pytest.raises(StaleCache):
        sparse_attention_backward(np.ones((5, MODEL.d_model)), cache)


def test_self_loop_type_index_is_stable():
    assert EdgeType.SELF_LOOP.index == 2
