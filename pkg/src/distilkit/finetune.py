"""Task heads, fine-tuning, k-fold evaluation and student/teacher benchmarking."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .corpus import IGNORE_INDEX, Vocab, encode_words
from .distill import TrainingDivergedError
from .metrics import f1_multiclass, f1_span, f1_token
from .model import EncoderModel, encoder_forward
from .optim import Adam
from .tensor import Tensor

TOKEN = "token_classification"
SEQUENCE = "sequence_classification"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    num_labels: int
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 5e-5
    folds: int | None = None
    metric: str | None = None  # "token" | "span" | "weighted"; defaults per kind
    head_init_std: float = 0.02

    def __post_init__(self):
        if self.kind not in (TOKEN, SEQUENCE):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.metric not in (None, "token", "span", "weighted"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.head_init_std < 0:
            raise ValueError("head_init_std must be >= 0")

    @property
    def scoring(self) -> str:
        if self.metric:
            return self.metric
        return "token" if self.kind == TOKEN else "weighted"


# Recipes used for POS, NER and intent classification.
POS_RECIPE = dict(epochs=4, batch_size=32, learning_rate=5e-5)
NER_RECIPE = dict(epochs=2, batch_size=32, learning_rate=5e-5, folds=5, metric="span")
INTENT_RECIPE = dict(epochs=14, batch_size=32, learning_rate=5e-5)


@dataclass
class LabeledDataset:
    """Token examples are ``(tokens, label_ids)``; sequence examples ``(sentence, label_id)``."""

    kind: str
    examples: list
    label_names: list[str]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def subset(self, indices) -> LabeledDataset:
        return LabeledDataset(self.kind, [self.examples[i] for i in indices], self.label_names)

    def validate(self) -> None:
        for i, ex in enumerate(self.examples):
            if self.kind == TOKEN:
                toks, labs = ex
                if len(toks) != len(labs):
                    raise DatasetError(f"example {i}: {len(toks)} tokens vs {len(labs)} labels")
                bad = [x for x in labs if not 0 <= x < self.num_labels]
            else:
                bad = [ex[1]] if not 0 <= ex[1] < self.num_labels else []
            if bad:
                raise DatasetError(f"example {i}: label id {bad[0]} out of range")

    @classmethod
    def from_token_pairs(cls, pairs, label_names: Sequence[str] | None = None) -> LabeledDataset:
        names = list(label_names) if label_names else []
        index = {n: i for i, n in enumerate(names)}
        examples = []
        for toks, tags in pairs:
            for t in tags:
                if t not in index:
                    if label_names:
                        raise DatasetError(f"label {t!r} not in label vocabulary")
                    index[t] = len(names)
                    names.append(t)
            examples.append((list(toks), [index[t] for t in tags]))
        return cls(TOKEN, examples, names)

    @classmethod
    def from_text_pairs(cls, pairs, label_names: Sequence[str] | None = None) -> LabeledDataset:
        names = list(label_names) if label_names else []
        index = {n: i for i, n in enumerate(names)}
        examples = []
        for text, lab in pairs:
            if lab not in index:
                if label_names:
                    raise DatasetError(f"label {lab!r} not in label vocabulary")
                index[lab] = len(names)
                names.append(lab)
            examples.append((text, index[lab]))
        return cls(SEQUENCE, examples, names)


# ---------------------------------------------------------------- file formats

def load_conll(path) -> LabeledDataset:
    """``token<TAB>label`` per line, blank lines between sentences."""
    pairs, toks, tags = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                if toks:
                    pairs.append((toks, tags))
                    toks, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DatasetError(f"{path}:{lineno}: expected 'token<TAB>label', got {line!r}")
            toks.append(parts[0])
            tags.append(parts[1])
    if toks:
        pairs.append((toks, tags))
    if not pairs:
        raise DatasetError(f"{path}: no sentences")
    return LabeledDataset.from_token_pairs(pairs)


def write_conll(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for toks, tags in pairs:
            for t, g in zip(toks, tags):
                fh.write(f"{t}\t{g}\n")
            fh.write("\n")


def load_classification_tsv(path, split_path=None) -> LabeledDataset | tuple[LabeledDataset,
                                                                                LabeledDataset]:
    """``text<TAB>label`` per line.

    With ``split_path`` (one ``train``/``test`` per line, aligned with the data
    rows) returns ``(train, test)`` sharing one label vocabulary.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1]:
                raise DatasetError(f"{path}:{lineno}: expected 'text<TAB>label', got {line!r}")
            pairs.append((parts[0], parts[1]))
    if not pairs:
        raise DatasetError(f"{path}: no rows")
    data = LabeledDataset.from_text_pairs(pairs)
    if split_path is None:
        return data
    split = [s.strip() for s in Path(split_path).read_text(encoding="utf-8").splitlines()]
    if len(split) != len(data):
        raise DatasetError(f"{split_path}: {len(split)} split rows for {len(data)} examples")
    for lineno, s in enumerate(split, 1):
        if s not in ("train", "test"):
            raise DatasetError(f"{split_path}:{lineno}: expected 'train' or 'test', got {s!r}")
    return (data.subset([i for i, s in enumerate(split) if s == "train"]),
            data.subset([i for i, s in enumerate(split) if s == "test"]))


def write_classification_tsv(rows, path) -> None:
    Path(path).write_text("".join(f"{t}\t{lab}\n" for t, lab in rows), encoding="utf-8")


# ---------------------------------------------------------------- task model

class TaskModel:
    """Encoder plus a linear classification head.

    Token tasks classify every position; sequence tasks classify the
    final hidden state at the ``[CLS]`` position.
    """

    def __init__(self, encoder: EncoderModel, spec: TaskSpec, head_w: Tensor, head_b: Tensor):
        self.encoder = encoder
        self.spec = spec
        self.head_w = head_w
        self.head_b = head_b

    def head_parameters(self) -> list[Tensor]:
        return [self.head_w, self.head_b]

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head_parameters()

    def logits(self, token_ids, attention_mask, rng=None) -> Tensor:
        hidden = encoder_forward(self.encoder, token_ids, attention_mask, rng=rng)
        if self.spec.kind == SEQUENCE:
            b, _, h = hidden.shape
            hidden = T.take_rows(hidden.reshape(-1, h), np.arange(b) * hidden.shape[1])
        return hidden @ self.head_w + self.head_b


def attach_head(model: EncoderModel, spec: TaskSpec, seed: int = 0,
                std: float | None = None) -> TaskModel:
    """Wrap ``model`` (not copied) with a seeded Gaussian head.

    ``std`` defaults to ``spec.head_init_std``; 0 gives an all-zero head.
    """
    std = spec.head_init_std if std is None else std
    rng = np.random.default_rng(seed)
    h = model.config.hidden_size
    w = Tensor(rng.normal(0.0, std, size=(h, spec.num_labels)) if std else
               np.zeros((h, spec.num_labels)), requires_grad=True)
    b = Tensor(np.zeros(spec.num_labels), requires_grad=True)
    return TaskModel(model, spec, w, b)


@dataclass
class EncodedData:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray  # [n, seq] for token tasks, [n] for sequence tasks

    def batch(self, idx):
        ids, mask = self.token_ids[idx], self.attention_mask[idx]
        width = max(int(mask.sum(axis=1).max()), 1)
        labels = self.labels[idx]
        if labels.ndim == 2:
            labels = labels[:, :width]
        return ids[:, :width], mask[:, :width], labels


def encode_dataset(data: LabeledDataset, vocab: Vocab, max_seq_len: int) -> EncodedData:
    ids, masks, labels = [], [], []
    for ex in data.examples:
        if data.kind == TOKEN:
            toks, labs = ex
            i, m = encode_words(toks, vocab, max_seq_len)
            lab = np.full(max_seq_len, IGNORE_INDEX, dtype=np.int64)
            n = min(len(labs), max_seq_len - 2)
            lab[1:1 + n] = labs[:n]
            labels.append(lab)
        else:
            i, m = encode_words(ex[0].split(), vocab, max_seq_len)
            labels.append(ex[1])
        ids.append(i)
        masks.append(m)
    return EncodedData(np.stack(ids), np.stack(masks), np.asarray(labels, dtype=np.int64))


def _task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    k = logits.shape[-1]
    flat = labels.reshape(-1)
    sel = np.flatnonzero(flat != IGNORE_INDEX)
    rows = T.take_rows(logits.reshape(-1, k), sel)
    return T.scale(T.sum(T.pick(T.log_softmax(rows), flat[sel])), -1.0 / max(sel.size, 1))


@dataclass
class FinetuneResult:
    wall: float
    steps: int
    losses: list[float] = field(default_factory=list)


def single_thread():
    """Limit BLAS to one thread so wall times are comparable between models."""
    return threadpool_limits(limits=1)


def finetune(task: TaskModel, train: LabeledDataset | EncodedData, spec: TaskSpec,
             vocab: Vocab | None = None, seed: int = 0) -> FinetuneResult:
    """Adam fine-tuning of encoder and head.

    Wall time runs from the first batch to the last update and excludes
    encoding of the dataset.
    """
    if isinstance(train, LabeledDataset):
        train.validate()
        data = encode_dataset(train, vocab, task.encoder.config.max_seq_len)
    else:
        data = train
    task.encoder.unfreeze()
    opt = Adam(task.parameters(), lr=spec.learning_rate)
    n = len(data.token_ids)
    n_batches = math.ceil(n / spec.batch_size)
    losses: list[float] = []
    use_dropout = task.encoder.config.dropout > 0
    steps = 0
    with single_thread():
        t0 = time.perf_counter()
        for epoch in range(spec.epochs):
            perm = np.random.default_rng([seed, epoch]).permutation(n)
            for bi in range(n_batches):
                idx = perm[bi * spec.batch_size:(bi + 1) * spec.batch_size]
                ids, mask, labels = data.batch(idx)
                rng = np.random.default_rng([seed, epoch, bi]) if use_dropout else None
                loss = _task_loss(task.logits(ids, mask, rng), labels)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite fine-tuning loss at epoch {epoch} batch {bi}")
                losses.append(value)
                steps += 1
        wall = time.perf_counter() - t0
    return FinetuneResult(wall, steps, losses)


def predict(task: TaskModel, data: LabeledDataset | EncodedData, vocab: Vocab | None = None,
            batch_size: int = 64):
    """Predicted label ids: one list per sentence (token tasks) or one id per example."""
    if isinstance(data, LabeledDataset):
        data = encode_dataset(data, vocab, task.encoder.config.max_seq_len)
    out = []
    with T.no_grad():
        for start in range(0, len(data.token_ids), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data.token_ids)))
            ids, mask, labels = data.batch(idx)
            pred = task.logits(ids, mask).data.argmax(axis=-1)
            if task.spec.kind == TOKEN:
                for row, lab in zip(pred, labels):
                    keep = lab != IGNORE_INDEX
                    out.append([int(x) for x in row[keep]])
            else:
                out.extend(int(x) for x in pred)
    return out


def score(spec: TaskSpec, pred, data: LabeledDataset) -> float:
    if spec.kind == SEQUENCE:
        return f1_multiclass(pred, [ex[1] for ex in data.examples], data.num_labels)
    gold = [list(ex[1]) for ex in data.examples]
    # labels beyond the truncation point are never predicted
    gold = [g[:len(p)] for g, p in zip(gold, pred)]
    if spec.scoring == "span":
        names = data.label_names
        return f1_span([[names[i] for i in p] for p in pred], [[names[i] for i in g] for g in gold])
    return f1_token(pred, gold)


def evaluate(task: TaskModel, data: LabeledDataset, vocab: Vocab,
             batch_size: int = 64) -> tuple[float, float]:
    """Return ``(f1, eval_wall_seconds)``; wall time covers batching and forward passes."""
    enc = encode_dataset(data, vocab, task.encoder.config.max_seq_len)
    with single_thread():
        t0 = time.perf_counter()
        pred = predict(task, enc, batch_size=batch_size)
        wall = time.perf_counter() - t0
    return score(task.spec, pred, data), wall


def kfold_split(data: LabeledDataset, k: int, seed: int = 0):
    """Seeded shuffle, then ``k`` contiguous folds whose sizes differ by at most one."""
    n = len(data)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"dataset of {n} examples is too small for {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    out, start = [], 0
    for size in sizes:
        test_idx = perm[start:start + size]
        train_idx = np.concatenate([perm[:start], perm[start + size:]])
        out.append((data.subset(train_idx), data.subset(test_idx)))
        start += size
    return out


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    model_name: str
    f1: float
    finetune_wall: float
    eval_wall: float
    per_fold: list[float] | None = None
    finetune_walls: list[float] = field(default_factory=list)
    eval_walls: list[float] = field(default_factory=list)
    run_f1: list[float] = field(default_factory=list)

    @property
    def finetune_wall_median(self) -> float:
        return statistics.median(self.finetune_walls) if self.finetune_walls else self.finetune_wall

    @property
    def eval_wall_median(self) -> float:
        return statistics.median(self.eval_walls) if self.eval_walls else self.eval_wall

    def score_lines(self) -> str:
        lines = [f"{self.model_name}.f1: {self.f1!r}"]
        if self.per_fold is not None:
            lines.append(f"{self.model_name}.per_fold: " + ",".join(repr(x) for x in self.per_fold))
        lines.append(f"{self.model_name}.run_f1: " + ",".join(repr(x) for x in self.run_f1))
        return "\n".join(lines) + "\n"

    def timing_lines(self) -> str:
        def stats(name, xs):
            return (f"{self.model_name}.{name}_mean: {statistics.fmean(xs):.6f}\n"
                    f"{self.model_name}.{name}_median: {statistics.median(xs):.6f}\n"
                    f"{self.model_name}.{name}_min: {min(xs):.6f}\n"
                    f"{self.model_name}.{name}_max: {max(xs):.6f}\n")
        return (stats("finetune_wall", self.finetune_walls or [self.finetune_wall])
                + stats("eval_wall", self.eval_walls or [self.eval_wall]))


def format_duration(seconds: float) -> str:
    """``m'ss.ss''`` in the style of the results tables."""
    m, s = divmod(seconds, 60.0)
    return f"{int(m)}'{s:05.2f}''"


def format_table(task_name: str, reports: Sequence[EvalReport]) -> str:
    header = ("Model", "F1 score", "Fine-tuning time", "Evaluation time")
    rows = [(r.model_name, f"{r.f1:.4f}", format_duration(r.finetune_wall),
             format_duration(r.eval_wall)) for r in reports]
    if len(reports) == 2 and reports[1].finetune_wall > 0 and reports[1].eval_wall > 0:
        a, b = reports
        rows.append((f"ratio {a.model_name}/{b.model_name}", f"{a.f1 / b.f1:.4f}" if b.f1 else "-",
                     f"{a.finetune_wall / b.finetune_wall:.3f}", f"{a.eval_wall / b.eval_wall:.3f}"))
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(4)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    title = f"| {task_name}".ljust(len(sep) - 1) + "|"

    def fmt(row):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(row, widths)) + " |"

    return "\n".join([sep, title, sep, fmt(header), sep, *map(fmt, rows), sep]) + "\n"


def parse_table(text: str) -> list[list[str]]:
    return [[c.strip() for c in line.strip("|").split("|")]
            for line in text.splitlines() if line.startswith("|") and line.count("|") == 5]


@dataclass
class BenchmarkResult:
    task_name: str
    reports: tuple[EvalReport, EvalReport]

    @property
    def table(self) -> str:
        return format_table(self.task_name, self.reports)

    @property
    def finetune_ratio(self) -> float:
        a, b = self.reports
        return a.finetune_wall_median / b.finetune_wall_median

    @property
    def eval_ratio(self) -> float:
        a, b = self.reports
        return a.eval_wall_median / b.eval_wall_median

    def scores_text(self) -> str:
        return f"task: {self.task_name}\n" + "".join(r.score_lines() for r in self.reports)

    def timing_text(self) -> str:
        return ("".join(r.timing_lines() for r in self.reports)
                + f"ratio.finetune_wall_median: {self.finetune_ratio:.6f}\n"
                + f"ratio.eval_wall_median: {self.eval_ratio:.6f}\n")

    def write(self, out_dir) -> dict[str, Path]:
        """Scores to ``<task>.report.txt``; anything with wall times to ``*.timing*`` files."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"report": out_dir / f"{self.task_name}.report.txt",
                 "timing": out_dir / f"{self.task_name}.timing.txt",
                 "table": out_dir / f"{self.task_name}.table.timing.txt"}
        paths["report"].write_text(self.scores_text(), encoding="utf-8")
        paths["timing"].write_text(self.timing_text(), encoding="utf-8")
        paths["table"].write_text(self.table, encoding="utf-8")
        return paths


def run_task(encoder: EncoderModel, train: LabeledDataset, test: LabeledDataset | None,
             spec: TaskSpec, vocab: Vocab, seed: int = 0, name: str = "model",
             runs: int = 1) -> EvalReport:
    """Fine-tune fresh copies of ``encoder`` and evaluate, ``runs`` times.

    With ``spec.folds`` set, ``train`` is split into folds (``test`` is
    ignored) and the headline F1 is the mean of the per-fold scores.
    """
    ft_walls, ev_walls, run_f1 = [], [], []
    fold_scores: list[list[float]] = []
    for r in range(runs):
        run_seed = seed + r
        if spec.folds:
            pairs = kfold_split(train, spec.folds, seed)
        else:
            if test is None:
                raise ValueError("a test split is required when folds are not used")
            pairs = [(train, test)]
        ft = ev = 0.0
        scores = []
        for fi, (tr, te) in enumerate(pairs):
            task = attach_head(encoder.copy(), spec, seed=run_seed * 1000 + fi)
            res = finetune(task, tr, spec, vocab, seed=run_seed * 1000 + fi)
            f1, wall = evaluate(task, te, vocab)
            ft += res.wall
            ev += wall
            scores.append(f1)
        ft_walls.append(ft)
        ev_walls.append(ev)
        fold_scores.append(scores)
        run_f1.append(statistics.fmean(scores))
    per_fold = None
    if spec.folds:
        per_fold = [statistics.fmean(col) for col in zip(*fold_scores)]
        f1 = statistics.fmean(per_fold)
    else:
        f1 = statistics.fmean(run_f1)
    return EvalReport(name, f1, statistics.fmean(ft_walls), statistics.fmean(ev_walls),
                      per_fold, ft_walls, ev_walls, run_f1)


def benchmark_pair(student: EncoderModel, teacher: EncoderModel, train: LabeledDataset,
                   test: LabeledDataset | None, spec: TaskSpec, vocab: Vocab, seed: int = 0,
                   runs: int = 3, task_name: str = "task",
                   names: tuple[str, str] = ("student", "teacher")) -> BenchmarkResult:
    """Fine-tune and evaluate both models under identical seeds and data order.

    Runs are interleaved model by model (student run r, teacher run r, ...) so
    that slow drift in machine load affects both sides alike.
    """
    if student.config.vocab_size != teacher.config.vocab_size:
        raise ValueError("models must share a vocabulary")
    per_model: list[list[EvalReport]] = [[], []]
    for r in range(runs):
        for i, model in enumerate((student, teacher)):
            per_model[i].append(run_task(model, train, test, spec, vocab, seed + r, names[i], 1))
    reports = tuple(_merge_runs(names[i], per_model[i], spec) for i in range(2))
    return BenchmarkResult(task_name, reports)


def _merge_runs(name: str, reps: list[EvalReport], spec: TaskSpec) -> EvalReport:
    ft = [r.finetune_walls[0] for r in reps]
    ev = [r.eval_walls[0] for r in reps]
    run_f1 = [r.run_f1[0] for r in reps]
    per_fold = None
    if spec.folds:
        per_fold = [statistics.fmean(col) for col in zip(*(r.per_fold for r in reps))]
        f1 = statistics.fmean(per_fold)
    else:
        f1 = statistics.fmean(run_f1)
    return EvalReport(name, f1, statistics.fmean(ft), statistics.fmean(ev), per_fold, ft, ev,
                      run_f1)


def spec_for(kind: str, num_labels: int, recipe: dict, **overrides) -> TaskSpec:
    return replace(TaskSpec(kind, num_labels, **recipe), **overrides)
