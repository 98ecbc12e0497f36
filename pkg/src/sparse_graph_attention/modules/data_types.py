"""
Data types and Pydantic models for the sparse graph attention library.

This module defines the enums shared by the parser, graph builder and model,
and every configuration / record model, providing validation for the
hyper-parameters the library is driven by.
"""
from fractions import Fraction
from pathlib import Path
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Optional, Tuple
from enum import Enum

from .errors import ConfigError


class TokenKind(str, Enum):
    """Lexical categories of the mini-language."""
    IDENTIFIER = "Identifier"
    INT_LITERAL = "IntLiteral"
    OPERATOR = "Operator"
    KEYWORD = "Keyword"
    PUNCT = "Punct"


class AstKind(str, Enum):
    """Internal node kinds of the mini-language AST."""
    PROGRAM = "Program"
    ASSIGN = "Assign"
    IF = "If"
    WHILE = "While"
    BLOCK = "Block"
    BIN_OP = "BinOp"
    COMPARE = "Compare"
    IDENT = "Ident"
    LIT = "Lit"


class EdgeType(str, Enum):
    """Attributes carried by code-graph edges; the order fixes embedding rows."""
    TOKEN_TO_PARENT = "TokenToParent"
    AST_CHILD = "AstChild"
    SELF_LOOP = "SelfLoop"

    @property
    def index(self) -> int:
        return list(EdgeType).index(self)


class MaskKind(str, Enum):
    """Attention mask families used by the mask ablation."""
    GRAPH = "graph"
    RANDOM = "random"
    COMPLETE = "complete"


class BenchVariant(str, Enum):
    """Encoder variants measured by the scaling harness."""
    SPARSE = "sparse"
    SPARSE_DIFFUSION_K2 = "sparse_diffusion_K2"
    SPARSE_DIFFUSION_K6 = "sparse_diffusion_K6"
    DENSE_MASK = "dense_mask"
    DENSE_FULL = "dense_full"

    @property
    def is_dense(self) -> bool:
        return self in (BenchVariant.DENSE_MASK, BenchVariant.DENSE_FULL)

    @property
    def diffusion_k(self) -> Optional[int]:
        return {
            BenchVariant.SPARSE_DIFFUSION_K2: 2,
            BenchVariant.SPARSE_DIFFUSION_K6: 6,
        }.get(self)


class BenchStatus(str, Enum):
    """Outcome of one bench point; only ok rows carry metrics."""
    OK = "ok"
    SKIPPED = "skipped"
    OUT_OF_MEMORY = "out_of_memory"


class AttentionBackend(str, Enum):
    """How an encoder layer evaluates attention."""
    SPARSE = "sparse"
    DENSE = "dense"
    VANILLA = "vanilla"


class MaskSpec(BaseModel):
    """Which attention mask to build for a sample."""
    model_config = ConfigDict(frozen=True)

    kind: MaskKind = Field(default=MaskKind.GRAPH, description="Mask family")
    density: Optional[float] = Field(
        None, description="Structural density (Random only); None matches the graph's own density"
    )
    seed: int = Field(default=0, ge=0, description="RNG seed (Random only)")

    @field_validator("density")
    @classmethod
    def _density_in_range(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 < value <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        return value


class ModelConfig(BaseModel):
    """Transformer dimensions; defaults are the base model table."""
    model_config = ConfigDict(frozen=True)

    layers: int = Field(default=6, ge=0, description="Number of encoder layers")
    heads: int = Field(default=8, ge=1, description="Attention heads H")
    d_model: int = Field(default=512, ge=1, description="Hidden size")
    d_k: int = Field(default=64, ge=1, description="Query/key size per head")
    d_v: int = Field(default=64, ge=1, description="Value size per head")
    d_ff: int = Field(default=2048, ge=1, description="Feed-forward inner size")
    d_e: Optional[int] = Field(None, ge=1, description="Edge-type embedding size (defaults to d_k)")

    @property
    def edge_dim(self) -> int:
        return self.d_e if self.d_e is not None else self.d_k


class DiffusionConfig(BaseModel):
    """Attention diffusion hyper-parameters."""
    model_config = ConfigDict(frozen=True)

    k: int = Field(default=2, ge=0, description="Diffusion hops K")
    alpha: float = Field(default=0.25, gt=0.0, le=1.0, description="Restart weight alpha")

    @property
    def theta(self) -> List[float]:
        """Weights of A^0..A^K in the truncated series the recurrence computes."""
        a = self.alpha
        return [a * (1.0 - a) ** i for i in range(self.k)] + [(1.0 - a) ** self.k]

    def theta_exact(self) -> List[Fraction]:
        """theta in exact rational arithmetic over the binary value of alpha."""
        a = Fraction(self.alpha)
        return [a * (1 - a) ** i for i in range(self.k)] + [(1 - a) ** self.k]


class EncoderConfig(BaseModel):
    """Everything needed to build and run an encoder stack."""
    model_config = ConfigDict(frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    diffusion: Optional[DiffusionConfig] = Field(None, description="Diffusion per layer, None disables it")
    use_positional_encoding: bool = Field(default=False)
    vocab_size: int = Field(..., gt=0, description="Token vocabulary size including UNK")
    edge_type_count: int = Field(default=len(EdgeType), ge=1)
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)


class TrainConfig(BaseModel):
    """Optimizer and loop settings for the variable-misuse task."""
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=1e-4, ge=0.0, description="Adam learning rate")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = Field(default=0, ge=0)
    decay_rate: float = Field(default=1.0, gt=0.0, le=1.0, description="Per-epoch lr multiplier")
    early_stop_epochs: int = Field(default=0, ge=0, description="Patience in epochs, 0 disables")
    validation_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    max_tokens: int = Field(default=512, ge=1, description="Token truncation length")
    mask: MaskSpec = Field(default_factory=MaskSpec)


class TaskMetrics(BaseModel):
    """Variable-misuse accuracies."""
    joint_acc: float = Field(..., ge=0.0, le=1.0)
    bugfree_acc: float = Field(..., ge=0.0, le=1.0)
    localization_acc: float = Field(..., ge=0.0, le=1.0)
    repair_acc: float = Field(..., ge=0.0, le=1.0)
    loss: Optional[float] = Field(None, description="Mean loss when available")
    samples: int = Field(default=0, ge=0)


class EpochReport(BaseModel):
    """Training summary of one epoch."""
    epoch: int = Field(..., ge=0)
    lr: float
    train_loss: float
    validation: TaskMetrics


class SampleRecord(BaseModel):
    """One line of a variable-misuse dataset file."""
    source: str
    bug_present: bool
    bug_location: Optional[int] = Field(None, ge=0, description="Token index of the misused variable")
    repair_target: Optional[int] = Field(None, ge=0, description="Token index of the correct variable")

    @model_validator(mode="after")
    def _pointers_match_label(self) -> "SampleRecord":
        if self.bug_present and (self.bug_location is None or self.repair_target is None):
            raise ValueError("buggy samples need bug_location and repair_target")
        if not self.bug_present and (self.bug_location is not None or self.repair_target is not None):
            raise ValueError("clean samples carry no pointers")
        return self


class GraphStats(BaseModel):
    """Per-graph counts and the fitted edge-vs-node slope."""
    rows: List[Tuple[int, int, int]] = Field(default_factory=list, description="(tokens, nodes, edges)")
    slope: float = Field(..., description="Least-squares slope of edge count against node count")


def _default_bench_model() -> ModelConfig:
    return ModelConfig(layers=2, heads=4, d_model=64, d_k=16, d_v=16, d_ff=256)


class BenchConfig(BaseModel):
    """Scaling sweep settings."""
    model_config = ConfigDict(frozen=True)

    lengths: List[int] = Field(default_factory=list, description="Sequence lengths; empty means step..max_len")
    max_len: int = Field(default=4096, ge=1)
    step: int = Field(default=100, ge=1)
    edges_per_token: int = Field(default=3, ge=0)
    variants: List[BenchVariant] = Field(default_factory=lambda: list(BenchVariant))
    repeats: int = Field(default=5, ge=3)
    dense_cutoff: int = Field(default=4096, ge=1)
    seed: int = Field(default=0, ge=0)
    model: ModelConfig = Field(default_factory=_default_bench_model)

    @model_validator(mode="before")
    @classmethod
    def _fill_lengths(cls, data: dict) -> dict:
        if isinstance(data, dict) and not data.get("lengths"):
            step = int(data.get("step", 100))
            max_len = int(data.get("max_len", 4096))
            data = {**data, "lengths": list(range(step, max_len + 1, step)) or [max_len]}
        return data

    @field_validator("lengths")
    @classmethod
    def _ascending(cls, value: List[int]) -> List[int]:
        if value != sorted(value) or any(length < 1 for length in value):
            raise ValueError("lengths must be positive and ascending")
        return value


class BenchRecord(BaseModel):
    """One (variant, length) measurement."""
    variant: BenchVariant
    length: int = Field(..., ge=1)
    nnz: int = Field(..., ge=0)
    peak_bytes: Optional[int] = Field(None, gt=0)
    cpu_time_ms: Optional[float] = Field(None, gt=0.0)
    status: BenchStatus = Field(default=BenchStatus.OK)


class ScalingFit(BaseModel):
    """Log-log fit of one metric for one variant."""
    variant: BenchVariant
    metric: str
    exponent: float
    r2: float
    points: int


# Config-file keys, grouped by the model they feed
MODEL_KEYS = ("layers", "heads", "d_model", "d_k", "d_v", "d_ff")
DIFFUSION_KEYS = {"k": "k", "alpha": "alpha"}
TRAIN_KEYS = (
    "lr", "epochs", "batch_size", "seed", "decay_rate",
    "early_stop_epochs", "validation_fraction", "max_tokens",
)


def read_config_file(path: Path) -> Dict[str, str]:
    """
    Read a flat key=value config file.

    Args:
        path: File to read; '#' starts a comment, blank lines are ignored

    Returns:
        Raw string values keyed by name

    Raises:
        ConfigError: On malformed lines or unknown keys
    """
    known = set(MODEL_KEYS) | set(DIFFUSION_KEYS) | set(TRAIN_KEYS) | {"dropout"}
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value", {"line": raw})
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}", {"key": key})
        values[key] = value
    return values


def split_config_values(values: Dict[str, str]) -> Tuple[dict, dict, dict, Optional[float]]:
    """Partition raw values into (model, diffusion, train, dropout) keyword dicts."""
    model = {k: values[k] for k in MODEL_KEYS if k in values}
    diffusion = {DIFFUSION_KEYS[k]: values[k] for k in DIFFUSION_KEYS if k in values}
    train = {k: values[k] for k in TRAIN_KEYS if k in values}
    dropout = float(values["dropout"]) if "dropout" in values else None
    return model, diffusion, train, dropout
