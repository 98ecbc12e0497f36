"""
Fused token + AST graphs for mini-language code, and the ablation masks.

Tokens occupy node ids 0..L-1 in sequence order, AST nodes follow in
pre-order. Each token is linked to its closest (deepest covering) AST node,
AST nodes to their children; all edges are bi-directional and every node
carries a self-loop. The resulting adjacency is the attention mask.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data_types import EdgeType, GraphStats, MaskKind, MaskSpec, TokenKind
from .errors import (
    DensityTooLow,
    GraphAttentionError,
    InsufficientPoints,
    MaskParityError,
    UncoveredToken,
    WrongKind,
)
from .mini_lang import AstNode, Token, lex, parse
from .sparse_core import CsrMatrix, block_diagonal, csr_from_coo

logger = logging.getLogger(__name__)

CORPUS_SUFFIX = ".mini"
EDGE_TYPE_COUNT = len(EdgeType)

Edge = Tuple[int, int, EdgeType]


@dataclass(frozen=True)
class CodeGraph:
    """Fused token/AST graph with typed, bi-directional edges."""

    token_count: int
    node_count: int
    node_kinds: Tuple[str, ...]
    node_texts: Tuple[Optional[str], ...]
    edges: Tuple[Edge, ...]
    ast_spans: Tuple[Tuple[int, int], ...] = ()
    ast_depths: Tuple[int, ...] = ()
    name: Optional[str] = field(default=None, compare=False)

    @cached_property
    def adjacency(self) -> CsrMatrix:
        src = [e[0] for e in self.edges]
        dst = [e[1] for e in self.edges]
        return csr_from_coo(self.node_count, self.node_count, src, dst, np.ones(len(self.edges)))

    @property
    def undirected_edge_count(self) -> int:
        """Non-loop edges counted once."""
        return sum(1 for src, dst, _ in self.edges if src < dst)

    @property
    def token_texts(self) -> Tuple[str, ...]:
        return tuple(self.node_texts[: self.token_count])

    @cached_property
    def edge_type_counts(self) -> np.ndarray:
        """(nnz, edge types) multiset counts aligned with adjacency slots; read-only."""
        src = np.array([e[0] for e in self.edges], dtype=np.int64)
        dst = np.array([e[1] for e in self.edges], dtype=np.int64)
        types = np.array([e[2].index for e in self.edges], dtype=np.int64)
        counts = slot_counts(self.adjacency, src, dst, types)
        counts.setflags(write=False)
        return counts


def slot_counts(mask: CsrMatrix, src: np.ndarray, dst: np.ndarray, types: np.ndarray) -> np.ndarray:
    """Scatter typed (src, dst) edges into per-slot edge-type counts."""
    n = mask.cols
    slot_keys = mask.pattern.row_ids * n + mask.col_indices
    slots = np.searchsorted(slot_keys, src * n + dst)
    counts = np.zeros((mask.nnz, EDGE_TYPE_COUNT), dtype=np.float64)
    np.add.at(counts, (slots, types), 1.0)
    return counts


def self_loop_counts(mask: CsrMatrix) -> np.ndarray:
    """Edge-type counts for a non-graph mask: only the diagonal is attributed."""
    counts = np.zeros((mask.nnz, EDGE_TYPE_COUNT), dtype=np.float64)
    counts[mask.pattern.row_ids == mask.col_indices, EdgeType.SELF_LOOP.index] = 1.0
    return counts


def build_graph(ast: AstNode, tokens: Sequence[Token], name: Optional[str] = None) -> CodeGraph:
    """
    Fuse the token sequence with its AST.

    Raises:
        UncoveredToken: If some token lies outside every AST span
    """
    token_count = len(tokens)
    nodes: List[AstNode] = list(ast.iter_preorder())
    position_of = {id(node): index for index, node in enumerate(nodes)}
    parents = [-1] * len(nodes)
    for index, node in enumerate(nodes):
        for child in node.children:
            parents[position_of[id(child)]] = index

    owner = np.full(token_count, -1, dtype=np.int64)
    for index, node in enumerate(nodes):
        lo, hi = node.token_span
        lo, hi = max(lo, 0), min(hi, token_count - 1)
        if lo <= hi:
            # pre-order: descendants overwrite ancestors, so the deepest node wins
            owner[lo:hi + 1] = index
    uncovered = np.flatnonzero(owner < 0)
    if uncovered.size:
        raise UncoveredToken(int(uncovered[0]))

    edges: List[Edge] = []
    for index, parent in enumerate(parents):
        if parent >= 0:
            p, c = token_count + parent, token_count + index
            edges += [(p, c, EdgeType.AST_CHILD), (c, p, EdgeType.AST_CHILD)]
    for position, index in enumerate(owner):
        a = token_count + int(index)
        edges += [(position, a, EdgeType.TOKEN_TO_PARENT), (a, position, EdgeType.TOKEN_TO_PARENT)]
    node_count = token_count + len(nodes)
    edges += [(n, n, EdgeType.SELF_LOOP) for n in range(node_count)]

    return CodeGraph(
        token_count=token_count,
        node_count=node_count,
        node_kinds=tuple(t.kind.value for t in tokens) + tuple(n.kind.value for n in nodes),
        node_texts=tuple(t.text for t in tokens) + tuple(n.text for n in nodes),
        edges=tuple(edges),
        ast_spans=tuple(n.token_span for n in nodes),
        ast_depths=tuple(n.depth for n in nodes),
        name=name,
    )


def graph_from_source(source: str, name: Optional[str] = None) -> CodeGraph:
    tokens = lex(source)
    return build_graph(parse(tokens), tokens, name=name)


def truncate_graph(graph: CodeGraph, max_tokens: int) -> CodeGraph:
    """
    Keep the first max_tokens tokens and the AST nodes whose span starts before
    the cut. Parents never start after their children, so the result is still
    a tree with self-loops.
    """
    if graph.token_count <= max_tokens:
        return graph
    keep_ast = [i for i, (lo, _) in enumerate(graph.ast_spans) if lo < max_tokens]
    old_ids = list(range(max_tokens)) + [graph.token_count + i for i in keep_ast]
    remap = {old: new for new, old in enumerate(old_ids)}
    edges = tuple(
        (remap[s], remap[d], t) for s, d, t in graph.edges if s in remap and d in remap
    )
    return CodeGraph(
        token_count=max_tokens,
        node_count=len(old_ids),
        node_kinds=tuple(graph.node_kinds[i] for i in old_ids),
        node_texts=tuple(graph.node_texts[i] for i in old_ids),
        edges=edges,
        ast_spans=tuple(
            (graph.ast_spans[i][0], min(graph.ast_spans[i][1], max_tokens - 1)) for i in keep_ast
        ),
        ast_depths=tuple(graph.ast_depths[i] for i in keep_ast),
        name=graph.name,
    )


# Masks

def _draw_distinct(rng: np.random.Generator, population: int, count: int) -> np.ndarray:
    """count distinct integers from range(population), in draw order."""
    count = min(count, population)
    drawn = np.empty(0, dtype=np.int64)
    while drawn.size < count:
        batch = rng.integers(0, population, size=max(2 * (count - drawn.size), 16))
        merged = np.concatenate([drawn, batch])
        _, first = np.unique(merged, return_index=True)
        drawn = merged[np.sort(first)]
    return drawn[:count]


def _directed_offdiag(codes: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Decode indices of the n*(n-1) off-diagonal cells."""
    i = codes // (n - 1)
    j = codes % (n - 1)
    j = j + (j >= i)
    return i, j


def _symmetric_with_loops(n: int, i: np.ndarray, j: np.ndarray) -> CsrMatrix:
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    pairs = np.unique(lo * n + hi)
    lo, hi = pairs // n, pairs % n
    diag = np.arange(n, dtype=np.int64)
    rows = np.concatenate([lo, hi, diag])
    cols = np.concatenate([hi, lo, diag])
    return csr_from_coo(n, n, rows, cols, np.ones(rows.size))


def complete_mask(node_count: int) -> CsrMatrix:
    n = node_count
    return CsrMatrix(
        n, n, np.arange(n + 1, dtype=np.int64) * n,
        np.tile(np.arange(n, dtype=np.int64), n), np.ones(n * n), validate=False,
    )


def build_mask(spec: MaskSpec, node_count: int) -> CsrMatrix:
    """
    Build a complete or random ablation mask.

    Random masks hold exactly round(density * N^2) entries, self-loops
    included; see random_mask.

    Raises:
        WrongKind: For MaskKind.GRAPH (pass the CodeGraph adjacency instead)
        DensityTooLow: If the target nnz cannot even hold the self-loops
        MaskParityError: If the target nnz and N differ in parity
    """
    n = node_count
    if spec.kind == MaskKind.COMPLETE:
        return complete_mask(n)
    if spec.kind != MaskKind.RANDOM or spec.density is None:
        raise WrongKind(f"build_mask cannot build {spec.kind.value} masks", {"kind": spec.kind.value})
    target = int(round(spec.density * n * n))
    if target < n:
        raise DensityTooLow(
            f"density {spec.density} gives {target} entries for {n} nodes",
            {"density": spec.density, "node_count": n},
        )
    return random_mask(n, target, spec.seed)


def random_mask(node_count: int, nnz: int, seed: int) -> CsrMatrix:
    """
    Symmetric random mask with exactly nnz entries and every self-loop.

    Directed off-diagonal cells are drawn without replacement, symmetrized by
    union and trimmed to (nnz - N) / 2 pairs; self-loops are added last.

    Raises:
        DensityTooLow: If nnz < N
        MaskParityError: If nnz > N^2 or nnz - N is odd
    """
    n = node_count
    if nnz < n:
        raise DensityTooLow(f"{nnz} entries cannot hold {n} self-loops", {"nnz": nnz, "node_count": n})
    if nnz > n * n or (nnz - n) % 2:
        raise MaskParityError(
            f"no symmetric {n}-node mask with all self-loops has {nnz} entries",
            {"nnz": nnz, "node_count": n},
        )
    pairs = (nnz - n) // 2
    rng = np.random.default_rng(seed)
    chosen = np.empty(0, dtype=np.int64)
    while chosen.size < pairs:
        i, j = _directed_offdiag(_draw_distinct(rng, n * (n - 1), 2 * (pairs - chosen.size)), n)
        merged = np.concatenate([chosen, np.minimum(i, j) * n + np.maximum(i, j)])
        _, first = np.unique(merged, return_index=True)
        chosen = merged[np.sort(first)]
    chosen = chosen[:pairs]
    return _symmetric_with_loops(n, chosen // n, chosen % n)


def random_edge_mask(node_count: int, edge_count: int, seed: int) -> CsrMatrix:
    """
    Benchmark preset: edge_count distinct directed off-diagonal edges,
    symmetrized by union, plus self-loops.
    """
    n = node_count
    if n < 2 or edge_count <= 0:
        return _symmetric_with_loops(n, np.empty(0, np.int64), np.empty(0, np.int64))
    rng = np.random.default_rng(seed)
    i, j = _directed_offdiag(_draw_distinct(rng, n * (n - 1), edge_count), n)
    return _symmetric_with_loops(n, i, j)


def sample_mask(graph: CodeGraph, spec: MaskSpec, index: int = 0) -> Tuple[CsrMatrix, np.ndarray]:
    """
    Mask and edge-type counts for one sample under a mask ablation setting.

    Random masks default to the graph's own density and are seeded per sample.
    """
    if spec.kind == MaskKind.GRAPH:
        return graph.adjacency, graph.edge_type_counts
    n = graph.node_count
    if spec.kind == MaskKind.COMPLETE:
        mask = complete_mask(n)
    else:
        target = int(round(spec.density * n * n)) if spec.density is not None else graph.adjacency.nnz
        if target < n:
            logger.warning(f"Random mask density {spec.density} too low for {n} nodes, keeping self-loops only")
            target = n
        # off-diagonal entries come in pairs; n^2 has the parity of n, so this stays in range
        target += (target - n) % 2
        mask = random_mask(n, target, spec.seed * 1_000_003 + index)
    return mask, self_loop_counts(mask)


# Corpus statistics and ingestion

def graph_stats(graphs: Sequence[CodeGraph]) -> GraphStats:
    """
    Per-graph (tokens, nodes, edges) and the least-squares slope of edges vs nodes.

    With a single distinct node count the fit is anchored at the one-node tree
    (1 node, 0 edges).
    """
    if not graphs:
        raise InsufficientPoints("graph_stats needs at least one graph")
    rows = [(g.token_count, g.node_count, g.undirected_edge_count) for g in graphs]
    nodes = np.array([r[1] for r in rows], dtype=np.float64)
    edges = np.array([r[2] for r in rows], dtype=np.float64)
    if np.unique(nodes).size < 2:
        nodes = np.append(nodes, 1.0)
        edges = np.append(edges, 0.0)
    slope = float(np.polyfit(nodes, edges, 1)[0]) if np.unique(nodes).size >= 2 else 0.0
    return GraphStats(rows=rows, slope=slope)


@dataclass
class IngestResult:
    """Graphs parsed from a corpus directory plus the files that were skipped."""
    graphs: List[CodeGraph] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def ingest_corpus(path: Path) -> IngestResult:
    """
    Parse every *.mini file of a directory in filename order.

    Files that fail to lex, parse or build are reported and skipped.

    Raises:
        FileNotFoundError / NotADirectoryError: If path is not a directory
    """
    directory = Path(path)
    if not directory.exists():
        raise FileNotFoundError(f"Corpus directory not found: {directory}")
    if not directory.is_dir():
        raise NotADirectoryError(f"Not a directory: {directory}")

    result = IngestResult()
    for file in sorted(directory.glob(f"*{CORPUS_SUFFIX}"), key=lambda p: p.name):
        try:
            result.graphs.append(graph_from_source(file.read_text(encoding="ascii"), name=file.name))
        except (GraphAttentionError, UnicodeDecodeError) as e:
            logger.warning(f"Skipping {file.name}: {e}")
            result.skipped.append((file.name, str(e)))
    logger.info(f"Ingested {len(result.graphs)} graphs, skipped {len(result.skipped)} files from {directory}")
    return result


# Graph JSON

def graph_to_json(graph: CodeGraph) -> dict:
    """Graph JSON: each undirected edge once plus explicit self-loops."""
    nodes = []
    for i in range(graph.node_count):
        node = {"id": i, "kind": graph.node_kinds[i]}
        if graph.node_texts[i] is not None:
            node["text"] = graph.node_texts[i]
        if i >= graph.token_count and graph.ast_spans:
            a = i - graph.token_count
            node["span"] = list(graph.ast_spans[a])
            node["depth"] = graph.ast_depths[a]
        nodes.append(node)
    edges = [{"src": s, "dst": d, "type": t.value} for s, d, t in graph.edges if s <= d]
    return {
        "token_count": graph.token_count,
        "node_count": graph.node_count,
        "nodes": nodes,
        "edges": edges,
    }


def graph_from_json(data: dict, name: Optional[str] = None) -> CodeGraph:
    """Inverse of graph_to_json; expands undirected edges to both directions."""
    token_count = int(data["token_count"])
    nodes = sorted(data["nodes"], key=lambda n: n["id"])
    edges: List[Edge] = []
    for e in data["edges"]:
        s, d, t = int(e["src"]), int(e["dst"]), EdgeType(e["type"])
        edges.append((s, d, t))
        if s != d:
            edges.append((d, s, t))
    ast_nodes = nodes[token_count:]
    has_spans = all("span" in n for n in ast_nodes)
    return CodeGraph(
        token_count=token_count,
        node_count=int(data["node_count"]),
        node_kinds=tuple(n["kind"] for n in nodes),
        node_texts=tuple(n.get("text") for n in nodes),
        edges=tuple(edges),
        ast_spans=tuple(tuple(n["span"]) for n in ast_nodes) if has_spans else (),
        ast_depths=tuple(int(n["depth"]) for n in ast_nodes) if has_spans else (),
        name=name,
    )


def write_graph_json(graph: CodeGraph, path: Path) -> None:
    Path(path).write_text(json.dumps(graph_to_json(graph), indent=2, sort_keys=True) + "\n")


# Batching

@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs; attention never crosses graph boundaries."""

    graphs: Tuple[CodeGraph, ...]
    node_offsets: np.ndarray
    mask: CsrMatrix
    edge_counts: np.ndarray

    def node_rows(self, index: int) -> slice:
        """Rows of graph `index` in the batched node matrix; tokens come first."""
        return slice(int(self.node_offsets[index]), int(self.node_offsets[index + 1]))


def batch_graphs(
    graphs: Sequence[CodeGraph],
    masks: Optional[Sequence[Tuple[CsrMatrix, np.ndarray]]] = None,
) -> GraphBatch:
    """Merge graphs (with their graph masks unless masks are given) into one batch."""
    graphs = tuple(graphs)
    if masks is None:
        masks = [(g.adjacency, g.edge_type_counts) for g in graphs]
    offsets = np.zeros(len(graphs) + 1, dtype=np.int64)
    np.cumsum([g.node_count for g in graphs], out=offsets[1:])
    counts = [c for _, c in masks]
    return GraphBatch(
        graphs=graphs,
        node_offsets=offsets,
        mask=block_diagonal([m for m, _ in masks]),
        edge_counts=np.concatenate(counts) if counts else np.zeros((0, EDGE_TYPE_COUNT)),
    )


def is_identifier(graph: CodeGraph, position: int) -> bool:
    return 0 <= position < graph.token_count and graph.node_kinds[position] == TokenKind.IDENTIFIER.value
