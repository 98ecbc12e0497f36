"""
Seeded Adam training loop for the variable-misuse model.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .data_types import EncoderConfig, EpochReport, TrainConfig
from .encoder import (
    EncoderParams,
    Vocabulary,
    count_parameters,
    embed_batch_backward,
    encoder_backward,
    init_params,
    scaled_norm,
)
from .errors import ConfigError, DivergedLoss, NonFiniteOutput
from .tasks import (
    PointerParams,
    VarMisuseModel,
    VarMisuseSample,
    evaluate,
    fits_window,
    forward_batch,
    loss_and_metrics,
    loss_gradients,
    pointer_heads_backward,
)

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction, updating the given arrays in place."""

    def __init__(self, params: Dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, param in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


@dataclass
class TrainResult:
    model: VarMisuseModel
    history: List[EpochReport] = field(default_factory=list)
    best_epoch: Optional[int] = None


def split_indices(count: int, cfg: TrainConfig) -> tuple:
    """Seeded (train, validation) index split."""
    validation = max(1, int(round(cfg.validation_fraction * count)))
    if count - validation < 1:
        raise ConfigError(f"{count} samples leave nothing to train on after the validation split")
    order = np.random.default_rng(cfg.seed).permutation(count)
    return sorted(order[validation:].tolist()), sorted(order[:validation].tolist())


def _batch_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.default_rng([seed, epoch, step]).integers(2 ** 31))


def _gradient_step(model: VarMisuseModel, samples, indices, seed: int):
    """Mean batch loss and the gradient of every named tensor."""
    out = forward_batch(model, samples, indices, train_mode=True, rng_seed=seed)
    count = len(samples)
    grad_hidden = np.zeros_like(out.hidden)
    pointer_grads = {name: np.zeros_like(p) for name, p in model.pointer.named().items()}
    total = 0.0
    for i, (sample, (loc, rep)) in enumerate(zip(samples, out.logits)):
        loss, _ = loss_and_metrics(loc, rep, sample)
        total += loss
        grad_loc, grad_rep = loss_gradients(loc, rep, sample)
        rows = out.batch.node_rows(i)
        grad_h, grads = pointer_heads_backward(
            grad_loc / count, grad_rep / count, out.hidden[rows], len(rep), model.pointer
        )
        grad_hidden[rows] += grad_h
        for name, g in grads.named().items():
            pointer_grads[name] += g
    mean_loss = total / count
    if not math.isfinite(mean_loss):
        raise DivergedLoss(f"loss became {mean_loss}", {"loss": mean_loss})
    grad_h0, encoder_grads = encoder_backward(grad_hidden, out.cache)
    encoder_grads.embeddings = embed_batch_backward(grad_h0, out.batch, model.params.embeddings, model.vocab)
    return mean_loss, {**encoder_grads.named(), **pointer_grads}


def train(
    samples: Sequence[VarMisuseSample],
    encoder_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    vocab: Optional[Vocabulary] = None,
    progress: bool = False,
) -> TrainResult:
    """
    Train an encoder with pointer heads and keep the best validation epoch.

    Args:
        samples: Full dataset; a seeded validation split is held out
        encoder_cfg: Encoder settings; vocab_size is replaced by the vocabulary size
        train_cfg: Optimizer, loop and mask settings
        vocab: Vocabulary to use; built from the training split when omitted
        progress: Show a tqdm bar on stderr

    Returns:
        TrainResult with the best-by-validation-joint model and per-epoch reports

    Raises:
        DivergedLoss: If the loss becomes NaN or Inf
        ConfigError: If the dataset is too small to split
    """
    usable = [i for i, s in enumerate(samples) if fits_window(s, train_cfg.max_tokens)]
    if len(usable) < len(samples):
        logger.warning(f"Dropping {len(samples) - len(usable)} samples with pointers beyond {train_cfg.max_tokens} tokens")
    if len(usable) < 2:
        raise ConfigError("training needs at least two usable samples")
    train_pos, val_pos = split_indices(len(usable), train_cfg)
    train_idx = [usable[p] for p in train_pos]
    val_idx = [usable[p] for p in val_pos]

    if vocab is None:
        vocab = Vocabulary.from_graphs(samples[i].graph for i in train_idx)
    cfg = encoder_cfg.model_copy(update={"vocab_size": len(vocab)})
    model = VarMisuseModel(
        config=cfg,
        params=init_params(cfg, train_cfg.seed),
        pointer=PointerParams.init(cfg.model.d_model, train_cfg.seed),
        vocab=vocab,
        mask=train_cfg.mask,
        max_tokens=train_cfg.max_tokens,
    )
    tensors = model.tensors()
    optimizer = Adam(tensors, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    logger.info(
        f"Training on {len(train_idx)} samples, validating on {len(val_idx)}, "
        f"{count_parameters(model.params)} encoder parameters"
    )

    result = TrainResult(model=model)
    best_joint = -1.0
    best_tensors = {name: t.copy() for name, t in tensors.items()}
    patience = 0
    val_samples = [samples[i] for i in val_idx]
    for epoch in tqdm(range(train_cfg.epochs), desc="epochs", disable=not progress):
        lr = train_cfg.lr * train_cfg.decay_rate ** epoch
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(train_idx).tolist()
        losses = []
        for step, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            chunk = order[start:start + train_cfg.batch_size]
            try:
                loss, grads = _gradient_step(
                    model, [samples[i] for i in chunk], chunk, _batch_seed(train_cfg.seed, epoch, step)
                )
            except NonFiniteOutput as e:
                raise DivergedLoss(f"epoch {epoch} step {step}: {e.message}", e.details)
            optimizer.step(grads, lr)
            losses.append(loss)
            logger.debug(f"epoch {epoch} step {step} loss {loss:.4f} grad rms {scaled_norm(list(grads.values())):.3e}")

        metrics = evaluate(model, val_samples, val_idx, batch_size=train_cfg.batch_size)
        report = EpochReport(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)), validation=metrics)
        result.history.append(report)
        logger.info(
            f"Epoch {epoch}: train loss {report.train_loss:.4f}, validation joint {metrics.joint_acc:.3f}, "
            f"bug-free {metrics.bugfree_acc:.3f}"
        )
        if metrics.joint_acc > best_joint:
            best_joint = metrics.joint_acc
            best_tensors = {name: t.copy() for name, t in tensors.items()}
            result.best_epoch = epoch
            patience = 0
        else:
            patience += 1
            if train_cfg.early_stop_epochs and patience >= train_cfg.early_stop_epochs:
                logger.info(f"Early stop after epoch {epoch}: no improvement for {patience} epochs")
                break

    result.model = VarMisuseModel(
        config=cfg,
        params=EncoderParams.from_named(best_tensors, cfg),
        pointer=PointerParams.from_named(best_tensors),
        vocab=vocab,
        mask=train_cfg.mask,
        max_tokens=train_cfg.max_tokens,
    )
    return result
