"""
Multi-head graph-conditioned sparse attention with edge-type query bias.

For every structural (i, j) of the mask and every head h:

    logit_h(i, j) = (W_Q h_i + W_E sum_k e^k_ij) . (W_K h_j) / sqrt(d_k)

softmax runs over each row's structural entries only, and the head output is
the attention-weighted sum of W_V h_j (optionally diffused). Heads are
concatenated (head 0 first) and projected by W_O. Logits, weights and their
gradients live in (nnz, heads) arrays, so nothing N x N is ever allocated.

The dense reference builds the full N x N logit matrix, sets masked cells to
-inf and softmaxes; it is the equivalence oracle and the quadratic baseline.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .data_types import DiffusionConfig, ModelConfig
from .diffusion import DiffusionCache, diffuse_backward, diffuse_with_cache
from .errors import DimensionMismatch, EmptyRow, StaleCache
from .sparse_core import (
    CsrMatrix,
    DenseMatrix,
    as_dense,
    ensure_finite,
    row_softmax,
    segment_softmax,
    segment_sum,
    spmm,
    spmm_transposed,
    transpose,
)

logger = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, rows: int, cols: int) -> DenseMatrix:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = rows."""
    bound = 1.0 / math.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class AttentionParams:
    """
    Learned matrices of one attention layer.

    Per-head projections are stored side by side: columns h*d_k:(h+1)*d_k of
    w_q / w_k belong to head h, likewise d_v-wide blocks of w_v and rows of w_o.
    """
    w_q: DenseMatrix
    w_k: DenseMatrix
    w_v: DenseMatrix
    w_o: DenseMatrix
    w_e: DenseMatrix
    edge_embeddings: DenseMatrix
    heads: int = 1

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1] // self.heads

    def tensors(self) -> Dict[str, DenseMatrix]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "heads"}

    def named(self, prefix: str) -> Dict[str, DenseMatrix]:
        return {f"{prefix}{name}": value for name, value in self.tensors().items()}

    @classmethod
    def from_named(cls, tensors: Dict[str, DenseMatrix], prefix: str, heads: int) -> "AttentionParams":
        names = [f.name for f in fields(cls) if f.name != "heads"]
        return cls(**{name: tensors[f"{prefix}{name}"] for name in names}, heads=heads)

    def zeros_like(self) -> "AttentionParams":
        return AttentionParams(**{k: np.zeros_like(v) for k, v in self.tensors().items()}, heads=self.heads)

    @classmethod
    def init(cls, cfg: ModelConfig, edge_type_count: int, rng: np.random.Generator) -> "AttentionParams":
        h, d = cfg.heads, cfg.d_model
        return cls(
            w_q=uniform_init(rng, d, h * cfg.d_k),
            w_k=uniform_init(rng, d, h * cfg.d_k),
            w_v=uniform_init(rng, d, h * cfg.d_v),
            w_o=uniform_init(rng, h * cfg.d_v, d),
            w_e=uniform_init(rng, cfg.edge_dim, cfg.d_k),
            edge_embeddings=rng.normal(0.0, 0.02, size=(edge_type_count, cfg.edge_dim)),
            heads=h,
        )


def fingerprint(arrays: Dict[str, np.ndarray]) -> str:
    digest = hashlib.blake2b(digest_size=16)
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name]).tobytes())
    return digest.hexdigest()


@dataclass
class AttentionCache:
    """What the backward pass needs: O(heads * nnz + N * d) memory."""
    h: DenseMatrix
    mask: CsrMatrix
    edge_counts: np.ndarray
    params: AttentionParams
    params_fingerprint: str
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    bias: np.ndarray
    weights: np.ndarray
    concat: DenseMatrix
    diffusion: Optional[DiffusionConfig] = None
    diffusion_caches: Optional[List[DiffusionCache]] = None

    def head_weights(self, head: int) -> CsrMatrix:
        """Attention matrix A_h of one head."""
        return self.mask.pattern.with_values(self.weights[:, head])


def _check_inputs(h: DenseMatrix, mask: CsrMatrix, edge_counts: np.ndarray, params: AttentionParams) -> None:
    n, d_model = h.shape
    if mask.shape != (n, n):
        raise DimensionMismatch(f"mask {mask.shape} does not match {n} nodes")
    if params.w_q.shape[0] != d_model:
        raise DimensionMismatch(f"h has width {d_model}, params expect {params.w_q.shape[0]}")
    if edge_counts.shape != (mask.nnz, params.edge_embeddings.shape[0]):
        raise DimensionMismatch(
            f"edge counts {edge_counts.shape} vs ({mask.nnz}, {params.edge_embeddings.shape[0]})"
        )
    if mask.pattern.has_empty_row():
        row = int(np.flatnonzero(mask.pattern.row_lengths == 0)[0])
        raise EmptyRow(f"mask row {row} is empty", {"row": row})


def sparse_attention_forward(
    h: DenseMatrix,
    mask: CsrMatrix,
    edge_counts: np.ndarray,
    params: AttentionParams,
    diffusion: Optional[DiffusionConfig] = None,
) -> Tuple[DenseMatrix, AttentionCache]:
    """
    Graph-conditioned sparse attention (optionally diffused per head).

    Args:
        h: Node states, N x d_model
        mask: Structural N x N mask; only its pattern is used
        edge_counts: (nnz, edge types) multiset counts per mask slot
        params: Layer parameters
        diffusion: Restart diffusion applied to each head's A_h (W_V h) before W_O

    Returns:
        (N x d_model output, cache for the backward pass)
    """
    h = as_dense(h, "h")
    edge_counts = np.asarray(edge_counts, dtype=np.float64)
    _check_inputs(h, mask, edge_counts, params)
    n = h.shape[0]
    heads, d_k, d_v = params.heads, params.d_k, params.d_v
    pattern = mask.pattern
    rows, cols = pattern.row_ids, pattern.col_indices

    q = (h @ params.w_q).reshape(n, heads, d_k)
    k = (h @ params.w_k).reshape(n, heads, d_k)
    v = (h @ params.w_v).reshape(n, heads, d_v)
    bias = edge_counts @ (params.edge_embeddings @ params.w_e)
    logits = np.einsum("ehd,ehd->eh", q[rows] + bias[:, None, :], k[cols]) / math.sqrt(d_k)
    weights = segment_softmax(logits, pattern)

    head_out = np.empty((n, heads, d_v))
    caches: Optional[List[DiffusionCache]] = [] if diffusion is not None else None
    for head in range(heads):
        a_h = pattern.with_values(weights[:, head])
        v_h = np.ascontiguousarray(v[:, head])
        if diffusion is None:
            head_out[:, head] = spmm(a_h, v_h)
        else:
            z, cache = diffuse_with_cache(a_h, v_h, diffusion, check=False)
            head_out[:, head] = z
            caches.append(cache)
    concat = head_out.reshape(n, heads * d_v)
    out = ensure_finite(concat @ params.w_o, "sparse_attention_forward")
    return out, AttentionCache(
        h=h, mask=mask, edge_counts=edge_counts, params=params,
        params_fingerprint=fingerprint(params.tensors()),
        q=q, k=k, v=v, bias=bias, weights=weights, concat=concat,
        diffusion=diffusion, diffusion_caches=caches,
    )


def _scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[i] = sum of values[s] over slots s with index[s] == i."""
    nnz = index.shape[0]
    flat = values.reshape(nnz, -1)
    gather = sp.csr_matrix((np.ones(nnz), (index, np.arange(nnz))), shape=(n, nnz))
    return np.asarray(gather @ flat).reshape((n,) + values.shape[1:])


def sparse_attention_backward(
    grad_out: DenseMatrix, cache: AttentionCache
) -> Tuple[DenseMatrix, AttentionParams]:
    """
    Analytic gradients of sparse_attention_forward.

    Raises:
        StaleCache: If the parameters changed since the forward pass or shapes disagree
    """
    params = cache.params
    n = cache.h.shape[0]
    if grad_out.shape != (n, params.w_o.shape[1]):
        raise StaleCache(f"gradient shape {grad_out.shape} does not match the cached forward")
    if fingerprint(params.tensors()) != cache.params_fingerprint:
        raise StaleCache("attention parameters changed since the forward pass")
    heads, d_k, d_v = params.heads, params.d_k, params.d_v
    pattern = cache.mask.pattern
    rows, cols = pattern.row_ids, pattern.col_indices
    inv_scale = 1.0 / math.sqrt(d_k)

    grad_w_o = cache.concat.T @ grad_out
    grad_heads = (grad_out @ params.w_o.T).reshape(n, heads, d_v)

    grad_weights = np.empty_like(cache.weights)
    grad_v = np.empty((n, heads, d_v))
    for head in range(heads):
        a_h = cache.head_weights(head)
        g_h = np.ascontiguousarray(grad_heads[:, head])
        if cache.diffusion_caches is not None:
            grad_weights[:, head], grad_v[:, head] = diffuse_backward(g_h, cache.diffusion_caches[head])
        else:
            grad_v[:, head] = spmm_transposed(a_h, g_h)
            grad_weights[:, head] = np.einsum("ed,ed->e", g_h[rows], cache.v[cols, head])

    w = cache.weights
    grad_logits = w * (grad_weights - segment_sum(w * grad_weights, pattern)[rows])
    grad_logits *= inv_scale

    query = cache.q[rows] + cache.bias[:, None, :]
    grad_query = grad_logits[:, :, None] * cache.k[cols]
    grad_q = segment_sum(grad_query, pattern)
    grad_k = _scatter_rows(cols, grad_logits[:, :, None] * query, n)
    grad_bias = grad_query.sum(axis=1)

    grad_proj = cache.edge_counts.T @ grad_bias
    grad_w_e = params.edge_embeddings.T @ grad_proj
    grad_edge = grad_proj @ params.w_e.T

    grad_q = grad_q.reshape(n, heads * d_k)
    grad_k = grad_k.reshape(n, heads * d_k)
    grad_v = grad_v.reshape(n, heads * d_v)
    h = cache.h
    grads = AttentionParams(
        w_q=h.T @ grad_q,
        w_k=h.T @ grad_k,
        w_v=h.T @ grad_v,
        w_o=grad_w_o,
        w_e=grad_w_e,
        edge_embeddings=grad_edge,
        heads=heads,
    )
    grad_h = grad_q @ params.w_q.T + grad_k @ params.w_k.T + grad_v @ params.w_v.T
    return grad_h, grads


def dense_edge_counts(mask: CsrMatrix, edge_counts: np.ndarray) -> Dict[int, DenseMatrix]:
    """Expand per-slot counts into one N x N matrix per edge type that occurs."""
    out: Dict[int, DenseMatrix] = {}
    for t in range(edge_counts.shape[1]):
        if np.any(edge_counts[:, t]):
            out[t] = mask.with_values(edge_counts[:, t]).to_dense()
    return out


def dense_attention_forward(
    h: DenseMatrix,
    dense_mask: Optional[DenseMatrix],
    params: AttentionParams,
    edge_bias: Optional[Dict[int, DenseMatrix]] = None,
    return_weights: bool = False,
):
    """
    Reference attention over a full N x N logit matrix, O(N^2 d).

    Args:
        h: Node states
        dense_mask: 0/1 matrix; zeros become -inf before the softmax.
            None means the all-ones mask (vanilla Transformer attention).
        params: Layer parameters
        edge_bias: Optional {edge type: N x N counts} for relation-biased attention
        return_weights: Also return the per-head attention matrices

    Raises:
        EmptyRow: If a mask row contains no 1
    """
    h = as_dense(h, "h")
    n = h.shape[0]
    if params.w_q.shape[0] != h.shape[1]:
        raise DimensionMismatch(f"h has width {h.shape[1]}, params expect {params.w_q.shape[0]}")
    blocked = None
    if dense_mask is not None:
        dense_mask = as_dense(dense_mask, "mask")
        if dense_mask.shape != (n, n):
            raise DimensionMismatch(f"mask {dense_mask.shape} does not match {n} nodes")
        blocked = dense_mask == 0
        empty = np.flatnonzero(blocked.all(axis=1))
        if empty.size:
            raise EmptyRow(f"mask row {int(empty[0])} is empty", {"row": int(empty[0])})

    heads, d_k, d_v = params.heads, params.d_k, params.d_v
    q, k, v = h @ params.w_q, h @ params.w_k, h @ params.w_v
    proj = params.edge_embeddings @ params.w_e
    concat = np.empty((n, heads * d_v))
    all_weights = []
    for head in range(heads):
        qh, kh = q[:, head * d_k:(head + 1) * d_k], k[:, head * d_k:(head + 1) * d_k]
        logits = qh @ transpose(kh)
        if edge_bias:
            key_bias = kh @ proj.T
            for t, counts in edge_bias.items():
                logits += counts * key_bias[:, t][None, :]
        logits /= math.sqrt(d_k)
        if blocked is not None:
            logits[blocked] = -np.inf
        weights = row_softmax(logits)
        del logits
        concat[:, head * d_v:(head + 1) * d_v] = weights @ v[:, head * d_v:(head + 1) * d_v]
        if return_weights:
            all_weights.append(weights)
    out = ensure_finite(concat @ params.w_o, "dense_attention_forward")
    return (out, all_weights) if return_weights else out
