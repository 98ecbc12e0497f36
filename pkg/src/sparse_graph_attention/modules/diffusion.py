"""
Attention diffusion over sparse row-stochastic attention matrices.

The restart recurrence Z(k+1) = (1 - alpha) A Z(k) + alpha Z(0) is run for K
steps; its result equals the truncated series sum_i theta_i A^i Z(0) with the
weights exposed by DiffusionConfig.theta. Each step is one spmm, so the cost is
K * O(nnz * d) and no new structural entries are ever materialized.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import scipy.sparse as sp

from .data_types import DiffusionConfig
from .errors import DimensionMismatch, NotRowStochastic, StaleCache
from .sparse_core import (
    CsrMatrix,
    DenseMatrix,
    as_dense,
    csr_from_coo,
    ensure_finite,
    segment_sum,
    spmm,
    spmm_transposed,
)

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-10


@dataclass
class DiffusionCache:
    """Intermediate states Z(0)..Z(K-1) of one diffusion run."""
    transition: CsrMatrix
    config: DiffusionConfig
    states: List[DenseMatrix] = field(default_factory=list)


def check_row_stochastic(a: CsrMatrix, tolerance: float = ROW_SUM_TOLERANCE) -> None:
    """Raise NotRowStochastic unless every row is nonnegative and sums to 1."""
    if a.rows != a.cols:
        raise DimensionMismatch(f"transition matrix must be square, got {a.shape}")
    if a.nnz and a.values.min() < 0:
        raise NotRowStochastic("transition matrix has negative entries")
    sums = segment_sum(a.values, a.pattern) if not a.pattern.has_empty_row() else None
    if sums is None or np.any(np.abs(sums - 1.0) > tolerance):
        worst = float(np.max(np.abs(sums - 1.0))) if sums is not None else 1.0
        raise NotRowStochastic(
            f"transition rows must sum to 1 within {tolerance}", {"max_deviation": worst}
        )


def diffuse_with_cache(
    a: CsrMatrix, z0: DenseMatrix, cfg: DiffusionConfig, check: bool = True
) -> Tuple[DenseMatrix, DiffusionCache]:
    """Run the restart recurrence, keeping the states the backward pass needs."""
    z0 = as_dense(z0, "Z0")
    if a.cols != z0.shape[0]:
        raise DimensionMismatch(f"diffuse: A {a.shape} vs Z0 {z0.shape}")
    if check:
        check_row_stochastic(a)
    cache = DiffusionCache(transition=a, config=cfg)
    keep = 1.0 - cfg.alpha
    restart = cfg.alpha * z0
    z = z0
    for _ in range(cfg.k):
        cache.states.append(z)
        z = keep * spmm(a, z) + restart
    return ensure_finite(z, "diffuse"), cache


def diffuse(a: CsrMatrix, z0: DenseMatrix, cfg: DiffusionConfig) -> DenseMatrix:
    """Z(K) of the restart recurrence; K = 0 returns Z0."""
    return diffuse_with_cache(a, z0, cfg)[0]


def diffuse_backward(grad_zk: DenseMatrix, cache: DiffusionCache) -> Tuple[np.ndarray, DenseMatrix]:
    """
    Reverse the recurrence.

    Returns:
        (gradient for each stored entry of A, gradient for Z0)
    """
    a, cfg = cache.transition, cache.config
    if len(cache.states) != cfg.k or (cache.states and cache.states[0].shape != grad_zk.shape):
        raise StaleCache("diffusion cache does not match the gradient")
    if grad_zk.shape[0] != a.rows:
        raise StaleCache(f"gradient has {grad_zk.shape[0]} rows, cache has {a.rows}")
    keep = 1.0 - cfg.alpha
    rows, cols = a.pattern.row_ids, a.col_indices
    grad_a = np.zeros(a.nnz)
    grad_z0 = np.zeros_like(grad_zk)
    g = grad_zk
    for z_prev in reversed(cache.states):
        grad_a += keep * np.einsum("ed,ed->e", g[rows], z_prev[cols])
        grad_z0 += cfg.alpha * g
        g = keep * spmm_transposed(a, g)
    grad_z0 += g
    return grad_a, grad_z0


def diffusion_operator(a: DenseMatrix, cfg: DiffusionConfig) -> DenseMatrix:
    """Dense truncated series sum_i theta_i A^i (small N only)."""
    a = as_dense(a, "A")
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"diffusion operator needs a square matrix, got {a.shape}")
    power = np.eye(a.shape[0])
    total = np.zeros_like(power)
    for i, theta in enumerate(cfg.theta):
        if i:
            power = a @ power
        total += theta * power
    return total


def diffuse_oracle(a: DenseMatrix, z0: DenseMatrix, cfg: DiffusionConfig) -> DenseMatrix:
    """Direct series evaluation, O(N^3 K); the reference for diffuse."""
    z0 = as_dense(z0, "Z0")
    if a.shape[1] != z0.shape[0]:
        raise DimensionMismatch(f"diffuse_oracle: A {a.shape} vs Z0 {z0.shape}")
    return diffusion_operator(a, cfg) @ z0


def receptive_field(mask: CsrMatrix, k: int) -> CsrMatrix:
    """Boolean pattern of (I + mask)^k: node pairs within k hops."""
    n = mask.rows
    step = (mask.pattern.ones().to_scipy() + sp.identity(n, format="csr")).astype(bool)
    reach = sp.identity(n, format="csr", dtype=bool)
    for _ in range(k):
        reach = (reach @ step).astype(bool)
    reach = reach.tocoo()
    return csr_from_coo(n, n, reach.row, reach.col, np.ones(reach.nnz))
