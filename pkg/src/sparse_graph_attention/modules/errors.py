"""
Exception hierarchy for the sparse graph attention library.

Every failure the library raises on purpose derives from GraphAttentionError,
so callers (the CLI in particular) can separate expected runtime errors from
programming mistakes.
"""
from typing import Optional


class GraphAttentionError(Exception):
    """Base exception carrying a human-readable message and structured details."""

    def __init__(self, message: str, details: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


# sparse-core
class IndexOutOfRange(GraphAttentionError):
    """An edge or index refers outside the matrix shape."""


class DuplicateEdge(GraphAttentionError):
    """The same (row, col) pair was supplied twice."""


class DimensionMismatch(GraphAttentionError):
    """Operand shapes are incompatible."""


class EmptyRow(GraphAttentionError):
    """A softmax row has no structural entry to normalize over."""


class NonFiniteOutput(GraphAttentionError):
    """An operation produced NaN or Inf."""


# code-graph
class UnknownCharacter(GraphAttentionError):
    """The lexer met a character outside the mini-language alphabet."""

    def __init__(self, position: int, char: str):
        super().__init__(
            f"Unknown character {char!r} at position {position}",
            details={"position": position, "char": char},
        )
        self.position = position


class SourceSyntaxError(GraphAttentionError):
    """The parser expected something else at a token position."""

    def __init__(self, position: int, expected: str):
        super().__init__(
            f"Syntax error at token {position}: expected {expected}",
            details={"position": position, "expected": expected},
        )
        self.position = position
        self.expected = expected


class UncoveredToken(GraphAttentionError):
    """A token position lies outside every AST node span."""

    def __init__(self, position: int):
        super().__init__(
            f"Token {position} is not covered by the AST",
            details={"position": position},
        )
        self.position = position


class WrongKind(GraphAttentionError):
    """The mask kind cannot be built by this operation."""


class DensityTooLow(GraphAttentionError):
    """A random mask density leaves no room for the self-loops."""


class MaskParityError(GraphAttentionError):
    """A symmetric mask holding every self-loop has nnz of the same parity as N."""


# graph-attention / diffusion / encoder
class StaleCache(GraphAttentionError):
    """A backward pass received a cache that no longer matches its inputs."""


class NotRowStochastic(GraphAttentionError):
    """A diffusion transition matrix has a row that does not sum to one."""


class CheckpointFormatError(GraphAttentionError):
    """A checkpoint file is truncated or has an unexpected header."""


# tasks / bench / cli
class VocabMismatch(GraphAttentionError):
    """Two models were trained on different vocabularies."""


class DivergedLoss(GraphAttentionError):
    """The training loss became NaN or Inf."""


class InsufficientPoints(GraphAttentionError):
    """Not enough measurements to fit a scaling exponent."""


class ConfigError(GraphAttentionError):
    """A config file contains an unknown key or an unparseable value."""
