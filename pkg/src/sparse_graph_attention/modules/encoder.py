"""
Encoder stack: node embeddings, optional sinusoidal positions and L post-norm
Transformer layers whose attention is graph-conditioned and optionally
diffused, with an analytic backward pass.

Layer t:
    a = Attention(h)                       (diffused per head when configured)
    h = LayerNorm(h + Dropout(a))
    f = W2 ReLU(W1 h + b1) + b2
    h = LayerNorm(h + Dropout(f))
"""
import logging
import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .code_graph import CodeGraph, GraphBatch
from .data_types import AstKind, AttentionBackend, EncoderConfig
from .errors import ConfigError, DimensionMismatch, StaleCache
from .graph_attention import (
    AttentionCache,
    AttentionParams,
    dense_attention_forward,
    dense_edge_counts,
    fingerprint,
    sparse_attention_backward,
    sparse_attention_forward,
    uniform_init,
)
from .sparse_core import CsrMatrix, DenseMatrix, add, as_dense, ensure_finite

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
UNK_TOKEN = "<unk>"
AST_KIND_INDEX = {kind.value: i for i, kind in enumerate(AstKind)}


@dataclass(frozen=True)
class Vocabulary:
    """Token texts by id; id 0 is the reserved UNK entry."""
    tokens: Tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            object.__setattr__(self, "tokens", (UNK_TOKEN,) + tuple(t for t in self.tokens if t != UNK_TOKEN))

    @classmethod
    def from_graphs(cls, graphs: Iterable[CodeGraph]) -> "Vocabulary":
        texts = {text for graph in graphs for text in graph.token_texts}
        return cls(tuple(sorted(texts)))

    @cached_property
    def _ids(self) -> Dict[str, int]:
        return {text: i for i, text in enumerate(self.tokens)}

    def lookup(self, text: str) -> int:
        return self._ids.get(text, 0)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class NodeEmbeddingTable:
    """Token vocabulary embeddings and AST-node-kind embeddings."""
    tokens: DenseMatrix
    kinds: DenseMatrix


@dataclass
class LayerParams:
    attention: AttentionParams
    ln1_gain: DenseMatrix
    ln1_bias: DenseMatrix
    ff_w1: DenseMatrix
    ff_b1: DenseMatrix
    ff_w2: DenseMatrix
    ff_b2: DenseMatrix
    ln2_gain: DenseMatrix
    ln2_bias: DenseMatrix

    def local_tensors(self) -> Dict[str, DenseMatrix]:
        """Everything except the attention block."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "attention"}

    def named(self, prefix: str) -> Dict[str, DenseMatrix]:
        out = self.attention.named(f"{prefix}attention.")
        out.update({f"{prefix}{name}": value for name, value in self.local_tensors().items()})
        return out

    @classmethod
    def from_named(cls, tensors: Dict[str, DenseMatrix], prefix: str, heads: int) -> "LayerParams":
        local = [f.name for f in fields(cls) if f.name != "attention"]
        return cls(
            attention=AttentionParams.from_named(tensors, f"{prefix}attention.", heads),
            **{name: tensors[f"{prefix}{name}"] for name in local},
        )


@dataclass
class EncoderParams:
    """All learned tensors of an encoder stack."""
    embeddings: NodeEmbeddingTable
    layers: List[LayerParams] = field(default_factory=list)

    def named(self) -> Dict[str, DenseMatrix]:
        """Flat name -> tensor view; names are stable across save/load."""
        out = {"embed.tokens": self.embeddings.tokens, "embed.kinds": self.embeddings.kinds}
        for index, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{index}."))
        return out

    @classmethod
    def from_named(cls, tensors: Dict[str, DenseMatrix], cfg: EncoderConfig) -> "EncoderParams":
        table = NodeEmbeddingTable(tokens=tensors["embed.tokens"], kinds=tensors["embed.kinds"])
        layers = [
            LayerParams.from_named(tensors, f"layer{i}.", cfg.model.heads)
            for i in range(cfg.model.layers)
        ]
        return cls(embeddings=table, layers=layers)


def init_params(cfg: EncoderConfig, seed: int = 0) -> EncoderParams:
    """
    Seeded initialization: matrices uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    embeddings normal(0, 0.02), layer-norm gains 1 and all biases 0.
    """
    rng = np.random.default_rng(seed)
    m = cfg.model
    table = NodeEmbeddingTable(
        tokens=rng.normal(0.0, 0.02, size=(cfg.vocab_size, m.d_model)),
        kinds=rng.normal(0.0, 0.02, size=(len(AstKind), m.d_model)),
    )
    layers = []
    for _ in range(m.layers):
        layers.append(LayerParams(
            attention=AttentionParams.init(m, cfg.edge_type_count, rng),
            ln1_gain=np.ones((1, m.d_model)),
            ln1_bias=np.zeros((1, m.d_model)),
            ff_w1=uniform_init(rng, m.d_model, m.d_ff),
            ff_b1=np.zeros((1, m.d_ff)),
            ff_w2=uniform_init(rng, m.d_ff, m.d_model),
            ff_b2=np.zeros((1, m.d_model)),
            ln2_gain=np.ones((1, m.d_model)),
            ln2_bias=np.zeros((1, m.d_model)),
        ))
    return EncoderParams(embeddings=table, layers=layers)


# Embedding

def positional_encoding(length: int, d_model: int) -> DenseMatrix:
    """Sinusoids: sin on even dims, cos on odd dims, wavelengths up to 10000 * 2pi."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(d_model)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (dims // 2)) / d_model)
    angles = pos * rates
    return np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))


def _node_ids(graph: CodeGraph, vocab: Vocabulary) -> Tuple[np.ndarray, np.ndarray]:
    token_ids = np.array([vocab.lookup(t) for t in graph.token_texts], dtype=np.int64)
    kind_ids = np.array([AST_KIND_INDEX[k] for k in graph.node_kinds[graph.token_count:]], dtype=np.int64)
    return token_ids, kind_ids


def embed(graph: CodeGraph, table: NodeEmbeddingTable, cfg: EncoderConfig, vocab: Vocabulary) -> DenseMatrix:
    """
    Initial node states h0.

    Token rows get their token embedding (plus the positional encoding of their
    sequence position when enabled); AST rows get their kind embedding only.
    Out-of-vocabulary texts map to UNK.
    """
    if table.tokens.shape[0] != len(vocab):
        raise DimensionMismatch(
            f"embedding table has {table.tokens.shape[0]} rows, vocabulary has {len(vocab)}"
        )
    token_ids, kind_ids = _node_ids(graph, vocab)
    d = table.tokens.shape[1]
    h = np.empty((graph.node_count, d))
    h[:graph.token_count] = table.tokens[token_ids]
    if cfg.use_positional_encoding:
        h[:graph.token_count] += positional_encoding(graph.token_count, d)
    h[graph.token_count:] = table.kinds[kind_ids]
    return h


def embed_backward(
    grad_h: DenseMatrix, graph: CodeGraph, table: NodeEmbeddingTable, vocab: Vocabulary
) -> NodeEmbeddingTable:
    token_ids, kind_ids = _node_ids(graph, vocab)
    grad = NodeEmbeddingTable(np.zeros_like(table.tokens), np.zeros_like(table.kinds))
    np.add.at(grad.tokens, token_ids, grad_h[:graph.token_count])
    np.add.at(grad.kinds, kind_ids, grad_h[graph.token_count:])
    return grad


def embed_batch(batch: GraphBatch, table: NodeEmbeddingTable, cfg: EncoderConfig, vocab: Vocabulary) -> DenseMatrix:
    """Stacked h0 of a batch; positions restart at 0 in every graph."""
    if not batch.graphs:
        return np.zeros((0, table.tokens.shape[1]))
    return np.vstack([embed(g, table, cfg, vocab) for g in batch.graphs])


def embed_batch_backward(
    grad_h: DenseMatrix, batch: GraphBatch, table: NodeEmbeddingTable, vocab: Vocabulary
) -> NodeEmbeddingTable:
    total = NodeEmbeddingTable(np.zeros_like(table.tokens), np.zeros_like(table.kinds))
    for index, graph in enumerate(batch.graphs):
        part = embed_backward(grad_h[batch.node_rows(index)], graph, table, vocab)
        total.tokens += part.tokens
        total.kinds += part.kinds
    return total


# Layer pieces

def layer_norm(x: DenseMatrix, gain: DenseMatrix, bias: DenseMatrix, eps: float = LAYER_NORM_EPS):
    """Row-wise normalization; returns (output, (x_hat, inverse std))."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


def layer_norm_backward(grad: DenseMatrix, norm_cache, gain: DenseMatrix):
    x_hat, inv_std = norm_cache
    d = x_hat.shape[1]
    g_hat = grad * gain
    grad_x = inv_std / d * (
        d * g_hat - g_hat.sum(axis=1, keepdims=True) - x_hat * (g_hat * x_hat).sum(axis=1, keepdims=True)
    )
    return grad_x, (grad * x_hat).sum(axis=0, keepdims=True), grad.sum(axis=0, keepdims=True)


def dropout(x: DenseMatrix, rate: float, rng: np.random.Generator) -> Tuple[DenseMatrix, Optional[DenseMatrix]]:
    """Inverted dropout; returns (output, scale mask) and no mask when inactive."""
    if rate <= 0.0:
        return x, None
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * scale, scale


def _dropout_rng(seed: int, layer: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, layer, slot])


@dataclass
class LayerCache:
    h_in: DenseMatrix
    attention: Optional[AttentionCache]
    drop_attention: Optional[DenseMatrix]
    norm1: tuple
    h1: DenseMatrix
    ff_pre: DenseMatrix
    ff_act: DenseMatrix
    drop_ff: Optional[DenseMatrix]
    norm2: tuple
    params_fingerprint: str


@dataclass
class EncoderCache:
    h0: DenseMatrix
    params: EncoderParams
    config: EncoderConfig
    backend: AttentionBackend
    layers: List[LayerCache] = field(default_factory=list)


def encoder_forward(
    h0: DenseMatrix,
    mask: CsrMatrix,
    edge_counts: np.ndarray,
    params: EncoderParams,
    cfg: EncoderConfig,
    train_mode: bool = False,
    rng_seed: int = 0,
    backend: AttentionBackend = AttentionBackend.SPARSE,
) -> Tuple[DenseMatrix, EncoderCache]:
    """
    Run the encoder layers over initial node states.

    Args:
        h0: N x d_model initial states
        mask: Attention mask (the graph adjacency or an ablation mask)
        edge_counts: (nnz, edge types) counts aligned with the mask
        params: Encoder parameters (embedding table unused here)
        cfg: Encoder configuration
        train_mode: Enables dropout, drawn from streams seeded by (rng_seed, layer, slot)
        rng_seed: Dropout seed
        backend: sparse (default), dense (-inf masking with edge bias) or
            vanilla (all-ones mask, no bias); only sparse records gradients

    Returns:
        (N x d_model final states, cache for encoder_backward)
    """
    h = as_dense(h0, "h0")
    backend = AttentionBackend(backend)
    if h.shape[1] != cfg.model.d_model:
        raise DimensionMismatch(f"h0 width {h.shape[1]} != d_model {cfg.model.d_model}")
    if len(params.layers) != cfg.model.layers:
        raise DimensionMismatch(f"{len(params.layers)} parameter layers for a {cfg.model.layers}-layer config")
    if backend != AttentionBackend.SPARSE and cfg.diffusion is not None:
        raise ConfigError(f"diffusion needs the sparse backend, got {backend.value}")
    rate = cfg.dropout_rate if train_mode else 0.0

    dense_mask = edge_bias = None
    if backend == AttentionBackend.DENSE:
        dense_mask = mask.to_dense()
        edge_bias = dense_edge_counts(mask, np.asarray(edge_counts, dtype=np.float64))

    cache = EncoderCache(h0=h, params=params, config=cfg, backend=backend)
    for index, layer in enumerate(params.layers):
        attention_cache = None
        if backend == AttentionBackend.SPARSE:
            a, attention_cache = sparse_attention_forward(h, mask, edge_counts, layer.attention, cfg.diffusion)
        elif backend == AttentionBackend.DENSE:
            a = dense_attention_forward(h, dense_mask, layer.attention, edge_bias)
        else:
            a = dense_attention_forward(h, None, layer.attention)
        a, drop_attention = dropout(a, rate, _dropout_rng(rng_seed, index, 0))
        h1, norm1 = layer_norm(add(h, a), layer.ln1_gain, layer.ln1_bias)
        ff_pre = h1 @ layer.ff_w1 + layer.ff_b1
        ff_act = np.maximum(ff_pre, 0.0)
        f, drop_ff = dropout(ff_act @ layer.ff_w2 + layer.ff_b2, rate, _dropout_rng(rng_seed, index, 1))
        h2, norm2 = layer_norm(add(h1, f), layer.ln2_gain, layer.ln2_bias)
        cache.layers.append(LayerCache(
            h_in=h, attention=attention_cache, drop_attention=drop_attention, norm1=norm1, h1=h1,
            ff_pre=ff_pre, ff_act=ff_act, drop_ff=drop_ff, norm2=norm2,
            params_fingerprint=fingerprint(layer.local_tensors()),
        ))
        h = h2
    return ensure_finite(h, "encoder_forward"), cache


def encoder_backward(grad_out: DenseMatrix, cache: EncoderCache) -> Tuple[DenseMatrix, EncoderParams]:
    """
    Gradients of encoder_forward with respect to h0 and every layer tensor.

    The embedding entries of the returned EncoderParams are zero; use
    embed_backward / embed_batch_backward on the returned h0 gradient.

    Raises:
        StaleCache: If the cache came from a dense backend, the parameters
            changed after the forward pass, or shapes disagree
    """
    if cache.backend != AttentionBackend.SPARSE:
        raise StaleCache(f"{cache.backend.value} forward passes record no gradient path")
    grad = as_dense(grad_out, "grad_out")
    if grad.shape != cache.h0.shape:
        raise StaleCache(f"gradient shape {grad.shape} does not match the cached forward {cache.h0.shape}")
    params = cache.params
    if len(params.layers) != len(cache.layers):
        raise StaleCache("layer count changed since the forward pass")

    layer_grads: List[LayerParams] = []
    for layer, lc in zip(reversed(params.layers), reversed(cache.layers)):
        if fingerprint(layer.local_tensors()) != lc.params_fingerprint:
            raise StaleCache("layer parameters changed since the forward pass")
        grad_x2, g_ln2_gain, g_ln2_bias = layer_norm_backward(grad, lc.norm2, layer.ln2_gain)
        grad_f = grad_x2 * lc.drop_ff if lc.drop_ff is not None else grad_x2
        g_ff_w2 = lc.ff_act.T @ grad_f
        g_ff_b2 = grad_f.sum(axis=0, keepdims=True)
        grad_pre = (grad_f @ layer.ff_w2.T) * (lc.ff_pre > 0)
        g_ff_w1 = lc.h1.T @ grad_pre
        g_ff_b1 = grad_pre.sum(axis=0, keepdims=True)
        grad_h1 = grad_x2 + grad_pre @ layer.ff_w1.T

        grad_x1, g_ln1_gain, g_ln1_bias = layer_norm_backward(grad_h1, lc.norm1, layer.ln1_gain)
        grad_a = grad_x1 * lc.drop_attention if lc.drop_attention is not None else grad_x1
        grad_h_attention, g_attention = sparse_attention_backward(grad_a, lc.attention)
        grad = grad_x1 + grad_h_attention
        layer_grads.append(LayerParams(
            attention=g_attention,
            ln1_gain=g_ln1_gain, ln1_bias=g_ln1_bias,
            ff_w1=g_ff_w1, ff_b1=g_ff_b1, ff_w2=g_ff_w2, ff_b2=g_ff_b2,
            ln2_gain=g_ln2_gain, ln2_bias=g_ln2_bias,
        ))
    layer_grads.reverse()
    table = NodeEmbeddingTable(np.zeros_like(params.embeddings.tokens), np.zeros_like(params.embeddings.kinds))
    return grad, EncoderParams(embeddings=table, layers=layer_grads)


def count_parameters(params: EncoderParams) -> int:
    return int(sum(value.size for value in params.named().values()))


def scaled_norm(arrays: Sequence[np.ndarray]) -> float:
    """Root-mean-square over all entries; used in debug logging."""
    total = sum(float(np.sum(a * a)) for a in arrays)
    count = sum(a.size for a in arrays)
    return math.sqrt(total / count) if count else 0.0
