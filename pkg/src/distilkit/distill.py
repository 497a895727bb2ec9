"""Distillation losses, their weighted combination, and the pretraining loop.

The student is trained on

    total = alpha_kd * kd + alpha_mlm * mlm + alpha_cos * cos

where ``kd`` is the cross-entropy of the student's MLM distribution against
the teacher's, ``mlm`` the usual masked-token cross-entropy and ``cos`` one
minus the cosine similarity of final hidden states. KD and MLM are averaged
over the masked positions; cos over all real (non-padding) positions.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import IGNORE_INDEX, Batch, mask_for_mlm
from .model import EncoderModel, encoder_forward, mlm_logits, save_checkpoint
from .optim import Adam
from .tensor import Tensor, ShapeError

logger = logging.getLogger(__name__)

LOG_FLOOR = -100.0


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillWeights:
    alpha_kd: float = 0.45
    alpha_mlm: float = 0.45
    alpha_cos: float = 0.10

    def __post_init__(self):
        if min(self.alpha_kd, self.alpha_mlm, self.alpha_cos) < 0:
            raise ValueError("loss weights must be nonnegative")

    def scaled(self, c: float) -> DistillWeights:
        return DistillWeights(self.alpha_kd * c, self.alpha_mlm * c, self.alpha_cos * c)


@dataclass(frozen=True)
class LossBreakdown:
    kd: float
    mlm: float
    cos: float
    total: float
    no_targets: bool = False

    @classmethod
    def combine(cls, kd: float, mlm: float, cos: float, weights: DistillWeights,
                no_targets: bool = False) -> LossBreakdown:
        total = weights.alpha_kd * kd + weights.alpha_mlm * mlm + weights.alpha_cos * cos
        return cls(kd, mlm, cos, total, no_targets)


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 6
    learning_rate: float = 5e-4
    epochs: int = 3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    global_seed: int = 0
    max_steps: int | None = None
    mask_prob: float = 0.15
    temperature: float = 1.0
    lr_schedule: str = "constant"  # or "linear"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


# ---------------------------------------------------------------- losses

def _flagged(t: Tensor, flag: bool) -> Tensor:
    t.no_targets = flag
    return t


def kd_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over rows of ``-sum_v t_v log s_v``; the teacher side carries no gradient.

    With ``temperature != 1`` both logit sets are divided by it and the loss is
    multiplied by its square.
    """
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(
        teacher_logits, dtype=np.float64)
    if t_logits.shape != student_logits.shape:
        raise ShapeError(f"kd_loss: teacher {t_logits.shape} vs student {student_logits.shape}")
    n = student_logits.shape[0]
    if n == 0:
        return _flagged(Tensor(0.0), True)
    t = T._stable_softmax(t_logits / temperature)
    s_in = student_logits if temperature == 1.0 else T.scale(student_logits, 1.0 / temperature)
    log_s = T.clip_min(T.log_softmax(s_in), LOG_FLOOR)
    loss = T.scale(T.sum(T.mul(Tensor(t), log_s)), -(temperature ** 2) / n)
    return _flagged(loss, False)


def mlm_loss(student_logits: Tensor, mlm_labels) -> Tensor:
    """Mean cross-entropy over positions whose label is not ``-100``."""
    labels = np.asarray(mlm_labels, dtype=np.int64)
    v = student_logits.shape[-1]
    if student_logits.shape[:-1] != labels.shape:
        raise ShapeError(f"mlm_loss: logits {student_logits.shape} vs labels {labels.shape}")
    flat_labels = labels.reshape(-1)
    sel = np.flatnonzero(flat_labels != IGNORE_INDEX)
    if sel.size == 0:
        return _flagged(Tensor(0.0), True)
    logits = T.take_rows(student_logits.reshape(-1, v), sel)
    logp = T.log_softmax(logits)
    return _flagged(T.scale(T.sum(T.pick(logp, flat_labels[sel])), -1.0 / sel.size), False)


def cos_loss(student_hidden: Tensor, teacher_hidden, attention_mask) -> Tensor:
    """Mean of ``1 - cos(student, teacher)`` over unmasked positions.

    A zero-norm vector has similarity 0, i.e. contributes a loss of 1.
    """
    t_hidden = teacher_hidden.data if isinstance(teacher_hidden, Tensor) else np.asarray(
        teacher_hidden, dtype=np.float64)
    if t_hidden.shape != student_hidden.shape:
        raise ShapeError(f"cos_loss: student {student_hidden.shape} vs teacher {t_hidden.shape}")
    h = student_hidden.shape[-1]
    sel = np.flatnonzero(np.asarray(attention_mask).reshape(-1) == 1)
    if sel.size == 0:
        return _flagged(Tensor(0.0), True)
    s_rows = T.take_rows(student_hidden.reshape(-1, h), sel)
    t_rows = Tensor(t_hidden.reshape(-1, h)[sel])
    sim = T.cosine_similarity(s_rows, t_rows)
    return _flagged(T.sub(1.0, T.scale(T.sum(sim), 1.0 / sel.size)), False)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum() / (p.shape[0] if p.ndim > 1 else 1))


# ---------------------------------------------------------------- combined objective

def _masked_rows(hidden: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    h = hidden.shape[-1]
    flat = labels.reshape(-1)
    sel = np.flatnonzero(flat != IGNORE_INDEX)
    return T.take_rows(hidden.reshape(-1, h), sel), flat[sel]


def distillation_objective(batch: Batch, teacher: EncoderModel, student: EncoderModel,
                           weights: DistillWeights = DistillWeights(),
                           temperature: float = 1.0,
                           rng: np.random.Generator | None = None,
                           kd_fn: Callable = kd_loss) -> tuple[Tensor, LossBreakdown]:
    """Forward both models on a masked batch; return the weighted loss tensor and its parts."""
    if teacher.config.hidden_size != student.config.hidden_size:
        raise ShapeError("teacher and student hidden sizes differ")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ShapeError("teacher and student vocabularies differ")
    with T.no_grad():
        t_hidden = encoder_forward(teacher, batch.token_ids, batch.attention_mask)
        t_rows, _ = _masked_rows(t_hidden, batch.mlm_labels)
        t_logits = mlm_logits(teacher, t_rows)
    s_hidden = encoder_forward(student, batch.token_ids, batch.attention_mask, rng=rng)
    s_rows, targets = _masked_rows(s_hidden, batch.mlm_labels)
    s_logits = mlm_logits(student, s_rows)

    kd = kd_fn(t_logits, s_logits, temperature)
    if targets.size:
        mlm = mlm_loss(s_logits, targets)
    else:
        mlm = _flagged(Tensor(0.0), True)
    cos = cos_loss(s_hidden, t_hidden, batch.attention_mask)

    total = T.add(T.add(T.scale(kd, weights.alpha_kd), T.scale(mlm, weights.alpha_mlm)),
                  T.scale(cos, weights.alpha_cos))
    parts = LossBreakdown(kd.item(), mlm.item(), cos.item(), total.item(),
                          no_targets=bool(kd.no_targets or mlm.no_targets))
    return total, parts


def combined_loss(batch: Batch, teacher: EncoderModel, student: EncoderModel,
                  weights: DistillWeights = DistillWeights(), temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> LossBreakdown:
    """Evaluate the weighted loss and backpropagate into the student's parameters."""
    total, parts = distillation_objective(batch, teacher, student, weights, temperature, rng)
    T.backward(total)
    return parts


# ---------------------------------------------------------------- training loops

@dataclass
class LogRecord:
    step: int
    kd: float
    mlm: float
    cos: float
    total: float
    wall_ms: float

    def line(self) -> str:
        return f"{self.step},{self.kd!r},{self.mlm!r},{self.cos!r},{self.total!r}"


@dataclass
class PretrainResult:
    log: list[LogRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def write_log(self, path) -> None:
        """Losses to ``path``; wall-clock times to ``<path>.timing``."""
        path = Path(path)
        path.write_text("step,kd,mlm,cos,total\n" + "".join(r.line() + "\n" for r in self.log))
        Path(str(path) + ".timing").write_text(
            "step,wall_ms\n" + "".join(f"{r.step},{r.wall_ms:.3f}\n" for r in self.log))


def _check_finite(parts: LossBreakdown, step: int) -> None:
    for name in ("kd", "mlm", "cos", "total"):
        if not math.isfinite(getattr(parts, name)):
            raise TrainingDivergedError(f"non-finite {name} loss at step {step}: {parts}")


def _lr_at(config: PretrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "linear" and total_steps > 0:
        return config.learning_rate * max(0.0, 1.0 - step / total_steps)
    return config.learning_rate


def epoch_order(n_batches: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_batches)


def pretrain(student: EncoderModel, teacher: EncoderModel, corpus_batches: Sequence[Batch],
             config: PretrainConfig = PretrainConfig(),
             weights: DistillWeights = DistillWeights(),
             checkpoint_dir=None,
             on_step: Callable[[LogRecord], None] | None = None) -> PretrainResult:
    """Distil ``teacher`` into ``student`` with Adam.

    ``corpus_batches`` are unmasked; each step masks its batch with the seed
    ``(global_seed, step)``. Batch order is reshuffled every epoch from
    ``(global_seed, epoch)``. A checkpoint is written at the end of each epoch
    when ``checkpoint_dir`` is given.
    """
    teacher.freeze()
    params = student.parameters()
    opt = Adam(params, lr=config.learning_rate, betas=config.betas, eps=config.eps)
    result = PretrainResult()
    n = len(corpus_batches)
    total_steps = config.epochs * n
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    use_dropout = student.config.dropout > 0
    step = 0
    for epoch in range(config.epochs):
        for bi in epoch_order(n, config.global_seed, epoch):
            if step >= total_steps:
                break
            t0 = time.perf_counter()
            batch = mask_for_mlm(corpus_batches[bi], student.config.vocab_size,
                                 config.mask_prob, (config.global_seed, step))
            rng = np.random.default_rng([config.global_seed, step, 1]) if use_dropout else None
            opt.zero_grad()
            parts = combined_loss(batch, teacher, student, weights, config.temperature, rng)
            _check_finite(parts, step)
            opt.lr = _lr_at(config, step, total_steps)
            opt.step()
            rec = LogRecord(step, parts.kd, parts.mlm, parts.cos, parts.total,
                            (time.perf_counter() - t0) * 1e3)
            result.log.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"student_epoch{epoch + 1}.ckpt"
            save_checkpoint(student, path)
            result.checkpoints.append(path)
        if step >= total_steps:
            break
    logger.info("pretrain finished after %d steps", step)
    return result


def train_mlm(model: EncoderModel, corpus_batches: Sequence[Batch], steps: int,
              learning_rate: float = 1e-3, seed: int = 0, mask_prob: float = 0.15,
              on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Plain masked-LM training, used to give a toy teacher something worth distilling."""
    model.unfreeze()
    opt = Adam(model.parameters(), lr=learning_rate)
    losses: list[float] = []
    n = len(corpus_batches)
    order: np.ndarray = np.array([], dtype=np.int64)
    for step in range(steps):
        if step % n == 0:
            order = epoch_order(n, seed, step // n)
        batch = mask_for_mlm(corpus_batches[order[step % n]], model.config.vocab_size,
                             mask_prob, (seed, step))
        hidden = encoder_forward(model, batch.token_ids, batch.attention_mask)
        rows, targets = _masked_rows(hidden, batch.mlm_labels)
        if targets.size == 0:
            continue
        loss = mlm_loss(mlm_logits(model, rows), targets)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
        if not math.isfinite(losses[-1]):
            raise TrainingDivergedError(f"non-finite mlm loss at step {step}")
        if on_step:
            on_step(step, losses[-1])
    return losses


def evaluate_mlm(model: EncoderModel, corpus_batches: Sequence[Batch], seed: int = 1,
                 mask_prob: float = 0.15) -> float:
    """Mean masked-token cross-entropy over the given batches (no updates)."""
    total, count = 0.0, 0
    with T.no_grad():
        for i, b in enumerate(corpus_batches):
            batch = mask_for_mlm(b, model.config.vocab_size, mask_prob, (seed, i))
            hidden = encoder_forward(model, batch.token_ids, batch.attention_mask)
            rows, targets = _masked_rows(hidden, batch.mlm_labels)
            if targets.size == 0:
                continue
            total += mlm_loss(mlm_logits(model, rows), targets).item() * targets.size
            count += targets.size
    return total / max(count, 1)
