"""
Toy variable-misuse task.

Samples are random mini-language programs. Clean assignments read one source
variable twice and never mention their own target; a bug replaces one of the
two reads with the statement's target (a different variable that is already
in scope). The model scores every token as the bug location, plus one extra
NO_BUG slot, and every token as the repair target.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy.special import log_softmax, softmax

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .code_graph import CodeGraph, GraphBatch, batch_graphs, graph_from_source, is_identifier, sample_mask, truncate_graph
from .data_types import EncoderConfig, MaskSpec, SampleRecord, TaskMetrics
from .encoder import EncoderCache, EncoderParams, Vocabulary, embed_batch, encoder_forward
from .errors import ConfigError, DimensionMismatch, VocabMismatch
from .graph_attention import uniform_init
from .mini_lang import lex, parse, pretty_print
from .sparse_core import DenseMatrix, as_dense

logger = logging.getLogger(__name__)

NO_BUG = -1
VARIABLE_POOL = ("a", "b", "c", "d", "e", "f", "g", "h")
ARITH_OPS = ("+", "-", "*")
COMPARE_OPS = ("<", ">", "==")


@dataclass(frozen=True)
class VarMisuseSample:
    """A program, its graph and the bug labels (NO_BUG pointers when clean)."""
    source: str
    graph: CodeGraph
    bug_present: bool
    bug_location: int = NO_BUG
    repair_target: int = NO_BUG

    def to_record(self) -> SampleRecord:
        return SampleRecord(
            source=self.source,
            bug_present=self.bug_present,
            bug_location=self.bug_location if self.bug_present else None,
            repair_target=self.repair_target if self.bug_present else None,
        )


def sample_from_record(record: SampleRecord) -> VarMisuseSample:
    graph = graph_from_source(record.source)
    sample = VarMisuseSample(
        source=record.source,
        graph=graph,
        bug_present=record.bug_present,
        bug_location=record.bug_location if record.bug_present else NO_BUG,
        repair_target=record.repair_target if record.bug_present else NO_BUG,
    )
    if sample.bug_present:
        for pointer in (sample.bug_location, sample.repair_target):
            if not is_identifier(graph, pointer):
                raise ConfigError(f"pointer {pointer} is not an identifier token", {"pointer": pointer})
    return sample


# Dataset generation

class _ProgramWriter:
    """Emits token texts and remembers where a misuse can be planted."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tokens: List[str] = []
        self.assigned: List[str] = []
        # (first read, second read, statement target)
        self.sites: List[Tuple[int, int, str]] = []

    def _pick(self, options: Sequence[str]) -> str:
        return options[int(self.rng.integers(len(options)))]

    def _literal(self) -> str:
        return str(int(self.rng.integers(0, 10)))

    def literal_assignment(self, target: str) -> None:
        self.tokens += [target, "=", self._literal()]
        if target not in self.assigned:
            self.assigned.append(target)

    def assignment(self) -> None:
        target = self._pick(VARIABLE_POOL)
        source = self._pick([v for v in self.assigned if v != target])
        op, op2 = self._pick(ARITH_OPS), self._pick(ARITH_OPS)
        template = int(self.rng.integers(4))
        if template == 0:
            rhs, reads = [source, op, source], (0, 2)
        elif template == 1:
            rhs, reads = [source, op, source, op2, self._literal()], (0, 2)
        elif template == 2:
            rhs, reads = [self._literal(), op, source, op2, source], (2, 4)
        else:
            rhs, reads = ["(", source, self._pick(("+", "-")), source, ")", "*", self._literal()], (1, 3)
        start = len(self.tokens) + 2
        self.tokens += [target, "="] + rhs
        if target in self.assigned:
            self.sites.append((start + reads[0], start + reads[1], target))
        else:
            self.assigned.append(target)

    def condition(self) -> None:
        self.tokens += [self._pick(self.assigned), self._pick(COMPARE_OPS), self._literal()]

    def block(self, statements: int) -> None:
        self.tokens.append("{")
        for _ in range(statements):
            self.assignment()
        self.tokens.append("}")


def _random_program(rng: np.random.Generator, statement_count: int) -> _ProgramWriter:
    writer = _ProgramWriter(rng)
    first, second = rng.choice(len(VARIABLE_POOL), size=2, replace=False)
    writer.literal_assignment(VARIABLE_POOL[int(first)])
    writer.literal_assignment(VARIABLE_POOL[int(second)])
    remaining = max(statement_count, 3) - 2
    while remaining > 0:
        roll = rng.random()
        if roll < 0.15 and remaining >= 2:
            body = int(rng.integers(1, min(2, remaining - 1) + 1))
            writer.tokens.append("if")
            writer.condition()
            writer.block(body)
            remaining -= 1 + body
            if remaining >= 2 and rng.random() < 0.5:
                writer.tokens.append("else")
                writer.block(1)
                remaining -= 1
        elif roll < 0.25 and remaining >= 2:
            writer.tokens.append("while")
            writer.condition()
            writer.block(1)
            remaining -= 2
        else:
            writer.assignment()
            remaining -= 1
    return writer


def _render(tokens: Sequence[str]) -> str:
    return pretty_print(parse(lex(" ".join(tokens))))


def generate_dataset(
    n: int, bug_rate: float, size_range: Tuple[int, int] = (3, 10), seed: int = 0
) -> List[VarMisuseSample]:
    """
    Generate n seeded variable-misuse samples.

    Args:
        n: Number of samples
        bug_rate: Probability that a sample carries a planted misuse
        size_range: Inclusive (min, max) statement count; programs have at least three
        seed: RNG seed; equal arguments give identical datasets

    Returns:
        Samples whose pointers index Identifier tokens of the rendered source
    """
    if not 0.0 <= bug_rate <= 1.0:
        raise ConfigError(f"bug_rate must lie in [0, 1], got {bug_rate}")
    low, high = size_range
    if low < 1 or high < low:
        raise ConfigError(f"invalid size range {size_range}")
    rng = np.random.default_rng(seed)
    samples: List[VarMisuseSample] = []
    while len(samples) < n:
        statements = int(rng.integers(low, high + 1))
        buggy = bool(rng.random() < bug_rate)
        writer = _random_program(rng, statements)
        tokens = list(writer.tokens)
        if not buggy:
            source = _render(tokens)
            samples.append(VarMisuseSample(source, graph_from_source(source), False))
            continue
        if not writer.sites:
            continue
        first, second, target = writer.sites[int(rng.integers(len(writer.sites)))]
        bug, repair = (first, second) if rng.random() < 0.5 else (second, first)
        tokens[bug] = target
        source = _render(tokens)
        samples.append(VarMisuseSample(source, graph_from_source(source), True, bug, repair))
    logger.info(f"Generated {n} samples (bug_rate={bug_rate}, seed={seed})")
    return samples


def save_dataset(samples: Sequence[VarMisuseSample], path: Path) -> None:
    """One JSON object per line with sorted keys."""
    lines = [json.dumps(s.to_record().model_dump(), sort_keys=True) for s in samples]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_dataset(path: Path) -> List[VarMisuseSample]:
    """
    Raises:
        ConfigError: On a malformed line or pointers that are not identifiers
    """
    samples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            samples.append(sample_from_record(SampleRecord.model_validate_json(line)))
        except ValidationError as e:
            raise ConfigError(f"{path}:{lineno}: invalid sample: {e}", {"line": lineno})
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return samples


# Pointer heads

@dataclass
class PointerParams:
    """Linear location, NO_BUG and repair scorers."""
    w_loc: DenseMatrix
    b_loc: DenseMatrix
    w_no_bug: DenseMatrix
    b_no_bug: DenseMatrix
    w_rep: DenseMatrix
    b_rep: DenseMatrix

    def named(self, prefix: str = "pointer.") -> Dict[str, DenseMatrix]:
        return {f"{prefix}{name}": value for name, value in vars(self).items()}

    @classmethod
    def from_named(cls, tensors: Dict[str, DenseMatrix], prefix: str = "pointer.") -> "PointerParams":
        names = ("w_loc", "b_loc", "w_no_bug", "b_no_bug", "w_rep", "b_rep")
        return cls(**{name: tensors[f"{prefix}{name}"] for name in names})

    @classmethod
    def init(cls, d_model: int, seed: int) -> "PointerParams":
        rng = np.random.default_rng([seed, 1])
        return cls(
            w_loc=uniform_init(rng, d_model, 1), b_loc=np.zeros((1, 1)),
            w_no_bug=uniform_init(rng, d_model, 1), b_no_bug=np.zeros((1, 1)),
            w_rep=uniform_init(rng, d_model, 1), b_rep=np.zeros((1, 1)),
        )


def pointer_heads_forward(h: DenseMatrix, token_count: int, heads: PointerParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Location logits (L token slots then NO_BUG) and repair logits (L slots).

    Rows of h past token_count (AST nodes) are ignored; the NO_BUG slot scores
    the mean-pooled token states.
    """
    h = as_dense(h, "h")
    if token_count < 1 or h.shape[0] < token_count:
        raise DimensionMismatch(f"need {token_count} token rows, got {h.shape[0]}")
    tokens = h[:token_count]
    loc = (tokens @ heads.w_loc + heads.b_loc).ravel()
    no_bug = (tokens.mean(axis=0, keepdims=True) @ heads.w_no_bug + heads.b_no_bug).ravel()
    rep = (tokens @ heads.w_rep + heads.b_rep).ravel()
    return np.concatenate([loc, no_bug]), rep


def pointer_heads_backward(
    grad_loc: np.ndarray, grad_rep: np.ndarray, h: DenseMatrix, token_count: int, heads: PointerParams
) -> Tuple[DenseMatrix, PointerParams]:
    tokens = h[:token_count]
    g_loc = grad_loc[:token_count, None]
    g_no_bug = float(grad_loc[token_count])
    g_rep = grad_rep[:, None]
    grad_h = np.zeros_like(h)
    grad_h[:token_count] = (
        g_loc @ heads.w_loc.T + g_rep @ heads.w_rep.T + (g_no_bug / token_count) * heads.w_no_bug.T
    )
    grads = PointerParams(
        w_loc=tokens.T @ g_loc,
        b_loc=np.array([[g_loc.sum()]]),
        w_no_bug=g_no_bug * tokens.mean(axis=0)[:, None],
        b_no_bug=np.array([[g_no_bug]]),
        w_rep=tokens.T @ g_rep,
        b_rep=np.array([[g_rep.sum()]]),
    )
    return grad_h, grads


# Loss and metrics

@dataclass(frozen=True)
class SampleOutcome:
    bug_present: bool
    predicted_bug: bool
    loc_correct: bool
    rep_correct: bool

    @property
    def joint_correct(self) -> bool:
        return self.loc_correct and (self.rep_correct or not self.bug_present)


def _location_slot(sample: VarMisuseSample, token_count: int) -> int:
    return sample.bug_location if sample.bug_present else token_count


def loss_and_metrics(loc_logits: np.ndarray, rep_logits: np.ndarray, sample: VarMisuseSample) -> Tuple[float, SampleOutcome]:
    """
    Cross-entropy of the location pointer plus, for buggy samples, of the
    repair pointer; argmax ties resolve to the lowest index.
    """
    token_count = rep_logits.shape[0]
    if loc_logits.shape[0] != token_count + 1:
        raise DimensionMismatch(f"{loc_logits.shape[0]} location slots for {token_count} tokens")
    slot = _location_slot(sample, token_count)
    loss = -float(log_softmax(loc_logits)[slot])
    if sample.bug_present:
        loss -= float(log_softmax(rep_logits)[sample.repair_target])
    loc_pred = int(np.argmax(loc_logits))
    outcome = SampleOutcome(
        bug_present=sample.bug_present,
        predicted_bug=loc_pred != token_count,
        loc_correct=loc_pred == slot,
        rep_correct=sample.bug_present and int(np.argmax(rep_logits)) == sample.repair_target,
    )
    return loss, outcome


def loss_gradients(loc_logits: np.ndarray, rep_logits: np.ndarray, sample: VarMisuseSample) -> Tuple[np.ndarray, np.ndarray]:
    token_count = rep_logits.shape[0]
    grad_loc = softmax(loc_logits)
    grad_loc[_location_slot(sample, token_count)] -= 1.0
    if not sample.bug_present:
        return grad_loc, np.zeros_like(rep_logits)
    grad_rep = softmax(rep_logits)
    grad_rep[sample.repair_target] -= 1.0
    return grad_loc, grad_rep


def aggregate_metrics(outcomes: Sequence[SampleOutcome], losses: Optional[Sequence[float]] = None) -> TaskMetrics:
    """
    Bug-free accuracy counts correct presence decisions over all samples;
    localization, repair and joint accuracy are rates over the buggy subset.
    """
    buggy = [o for o in outcomes if o.bug_present]

    def rate(hits: int, total: int) -> float:
        return hits / total if total else 0.0

    return TaskMetrics(
        joint_acc=rate(sum(o.joint_correct for o in buggy), len(buggy)),
        bugfree_acc=rate(sum(o.predicted_bug == o.bug_present for o in outcomes), len(outcomes)),
        localization_acc=rate(sum(o.loc_correct for o in buggy), len(buggy)),
        repair_acc=rate(sum(o.rep_correct for o in buggy), len(buggy)),
        loss=float(np.mean(losses)) if losses else None,
        samples=len(outcomes),
    )


# Model bundle

@dataclass
class VarMisuseModel:
    """Encoder, pointer heads, vocabulary and the mask setting they were trained with."""
    config: EncoderConfig
    params: EncoderParams
    pointer: PointerParams
    vocab: Vocabulary
    mask: MaskSpec = field(default_factory=MaskSpec)
    max_tokens: int = 512

    def tensors(self) -> Dict[str, DenseMatrix]:
        return {**self.params.named(), **self.pointer.named()}

    def save(self, path: Path) -> None:
        save_checkpoint(path, Checkpoint(
            config=self.config,
            vocab=list(self.vocab.tokens),
            tensors=self.tensors(),
            extra={"mask": self.mask.model_dump(mode="json"), "max_tokens": self.max_tokens},
        ))

    @classmethod
    def load(cls, path: Path) -> "VarMisuseModel":
        ckpt = load_checkpoint(path)
        return cls(
            config=ckpt.config,
            params=EncoderParams.from_named(ckpt.tensors, ckpt.config),
            pointer=PointerParams.from_named(ckpt.tensors),
            vocab=Vocabulary(tuple(ckpt.vocab)),
            mask=MaskSpec.model_validate(ckpt.extra.get("mask", {})),
            max_tokens=int(ckpt.extra.get("max_tokens", 512)),
        )


def fits_window(sample: VarMisuseSample, max_tokens: int) -> bool:
    """Pointers must survive truncation to max_tokens."""
    return max(sample.bug_location, sample.repair_target) < max_tokens


@dataclass
class BatchForward:
    batch: GraphBatch
    hidden: DenseMatrix
    cache: EncoderCache
    logits: List[Tuple[np.ndarray, np.ndarray]]


def forward_batch(
    model: VarMisuseModel,
    samples: Sequence[VarMisuseSample],
    indices: Sequence[int],
    train_mode: bool = False,
    rng_seed: int = 0,
) -> BatchForward:
    """
    Encode a batch and score every sample.

    indices are the dataset positions of the samples; they seed per-sample
    random masks so a sample sees the same mask in every epoch.
    """
    graphs = [truncate_graph(s.graph, model.max_tokens) for s in samples]
    masks = [sample_mask(g, model.mask, int(i)) for g, i in zip(graphs, indices)]
    batch = batch_graphs(graphs, masks)
    h0 = embed_batch(batch, model.params.embeddings, model.config, model.vocab)
    hidden, cache = encoder_forward(
        h0, batch.mask, batch.edge_counts, model.params, model.config,
        train_mode=train_mode, rng_seed=rng_seed,
    )
    result = BatchForward(batch=batch, hidden=hidden, cache=cache, logits=[])
    for i, graph in enumerate(graphs):
        result.logits.append(pointer_heads_forward(hidden[batch.node_rows(i)], graph.token_count, model.pointer))
    return result


def evaluate(
    model: VarMisuseModel,
    samples: Sequence[VarMisuseSample],
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 32,
) -> TaskMetrics:
    """Eval-mode metrics (with mean loss) over samples that fit the token window."""
    if indices is None:
        indices = range(len(samples))
    pairs = [(s, i) for s, i in zip(samples, indices) if fits_window(s, model.max_tokens)]
    if len(pairs) < len(samples):
        logger.warning(f"Skipping {len(samples) - len(pairs)} samples with pointers beyond {model.max_tokens} tokens")
    outcomes, losses = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        out = forward_batch(model, [s for s, _ in chunk], [i for _, i in chunk])
        for (sample, _), (loc, rep) in zip(chunk, out.logits):
            loss, outcome = loss_and_metrics(loc, rep, sample)
            losses.append(loss)
            outcomes.append(outcome)
    return aggregate_metrics(outcomes, losses)


# Ensemble

@dataclass(frozen=True)
class Prediction:
    bug_present: bool
    location: int = NO_BUG
    repair: int = NO_BUG


def predict_logits(model: VarMisuseModel, sample: VarMisuseSample, index: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    return forward_batch(model, [sample], [index]).logits[0]


def ensemble_predict(
    deep: VarMisuseModel, shallow: VarMisuseModel, sample: VarMisuseSample, index: int = 0
) -> Prediction:
    """
    Bug presence comes from the shallow model's NO_BUG slot; when it reports a
    bug, location and repair are the deep model's argmaxes over token slots.

    Raises:
        VocabMismatch: If the models were trained on different vocabularies
    """
    if deep.vocab.tokens != shallow.vocab.tokens:
        raise VocabMismatch(
            "ensemble members use different vocabularies",
            {"deep": len(deep.vocab), "shallow": len(shallow.vocab)},
        )
    shallow_loc, _ = predict_logits(shallow, sample, index)
    token_count = shallow_loc.shape[0] - 1
    if int(np.argmax(shallow_loc)) == token_count:
        return Prediction(bug_present=False)
    deep_loc, deep_rep = predict_logits(deep, sample, index)
    return Prediction(True, int(np.argmax(deep_loc[:token_count])), int(np.argmax(deep_rep)))


def outcome_of(prediction: Prediction, sample: VarMisuseSample) -> SampleOutcome:
    if sample.bug_present:
        loc_correct = prediction.bug_present and prediction.location == sample.bug_location
    else:
        loc_correct = not prediction.bug_present
    return SampleOutcome(
        bug_present=sample.bug_present,
        predicted_bug=prediction.bug_present,
        loc_correct=loc_correct,
        rep_correct=sample.bug_present and prediction.bug_present and prediction.repair == sample.repair_target,
    )


def evaluate_ensemble(deep: VarMisuseModel, shallow: VarMisuseModel, samples: Sequence[VarMisuseSample]) -> TaskMetrics:
    max_tokens = min(deep.max_tokens, shallow.max_tokens)
    outcomes = [
        outcome_of(ensemble_predict(deep, shallow, s, i), s)
        for i, s in enumerate(samples)
        if fits_window(s, max_tokens)
    ]
    return aggregate_metrics(outcomes)
