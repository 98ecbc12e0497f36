"""
Finite-difference verification of the analytic encoder gradients.
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .code_graph import slot_counts
from .data_types import DiffusionConfig, EdgeType, EncoderConfig, ModelConfig
from .encoder import EncoderParams, encoder_backward, encoder_forward, init_params
from .sparse_core import CsrMatrix, csr_from_coo, fd_gradient, relative_error

logger = logging.getLogger(__name__)


class GradCheckReport(BaseModel):
    seed: int
    max_error: float = Field(..., description="Largest relative error over all checked tensors")
    errors: Dict[str, float] = Field(default_factory=dict)
    passed: bool


def random_tree(node_count: int, rng: np.random.Generator) -> Tuple[CsrMatrix, np.ndarray]:
    """Random tree with bi-directional AstChild edges and self-loops, plus its edge counts."""
    parents = np.array([int(rng.integers(0, i)) for i in range(1, node_count)], dtype=np.int64)
    children = np.arange(1, node_count, dtype=np.int64)
    loops = np.arange(node_count, dtype=np.int64)
    src = np.concatenate([parents, children, loops])
    dst = np.concatenate([children, parents, loops])
    types = np.concatenate([
        np.full(2 * (node_count - 1), EdgeType.AST_CHILD.index),
        np.full(node_count, EdgeType.SELF_LOOP.index),
    ])
    mask = csr_from_coo(node_count, node_count, src, dst, np.ones(src.size))
    return mask, slot_counts(mask, src, dst, types)


def gradcheck_config(diffusion: bool = True) -> EncoderConfig:
    return EncoderConfig(
        model=ModelConfig(layers=2, heads=2, d_model=8, d_k=4, d_v=4, d_ff=16),
        diffusion=DiffusionConfig(k=2, alpha=0.25) if diffusion else None,
        vocab_size=1,
        dropout_rate=0.1,
    )


def check_encoder_gradients(
    seed: int, tolerance: float = 1e-4, node_count: int = 10, cfg: Optional[EncoderConfig] = None
) -> GradCheckReport:
    """
    Compare encoder_backward against central differences for the loss
    sum(H * R) with a random R, in train mode with fixed dropout masks.
    """
    cfg = cfg or gradcheck_config()
    rng = np.random.default_rng(seed)
    mask, counts = random_tree(node_count, rng)
    h0 = rng.normal(size=(node_count, cfg.model.d_model))
    weights = rng.normal(size=(node_count, cfg.model.d_model))
    params = init_params(cfg, seed)
    named = params.named()

    def loss(h: np.ndarray, p: EncoderParams) -> float:
        out, _ = encoder_forward(h, mask, counts, p, cfg, train_mode=True, rng_seed=seed)
        return float(np.sum(out * weights))

    out, cache = encoder_forward(h0, mask, counts, params, cfg, train_mode=True, rng_seed=seed)
    grad_h0, grads = encoder_backward(weights, cache)
    analytic = grads.named()

    errors = {"h0": relative_error(grad_h0, fd_gradient(lambda x: loss(x, params), h0))}
    for name, value in named.items():
        if name.startswith("embed."):
            continue

        def perturbed(x: np.ndarray, name: str = name) -> float:
            return loss(h0, EncoderParams.from_named({**named, name: x}, cfg))

        errors[name] = relative_error(analytic[name], fd_gradient(perturbed, value))
    worst = max(errors.values())
    report = GradCheckReport(seed=seed, max_error=worst, errors=errors, passed=worst < tolerance)
    logger.info(
        f"gradcheck seed {seed}: max relative error {worst:.2e} over {len(errors)} tensors "
        f"({'ok' if report.passed else 'FAILED'})"
    )
    return report
