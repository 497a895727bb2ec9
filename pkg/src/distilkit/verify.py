"""End-to-end self checks: gradients, loss oracles, splitter fuzzing and F1 oracles."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import reference as ref
from . import tensor as T
from .corpus import Batch, IGNORE_INDEX, corpus_stats, mask_for_mlm, \
    split_long_sentences
from .distill import (DistillWeights, cos_loss, distillation_objective, kd_loss,
                      mlm_loss)
from .metrics import f1_multiclass, f1_span
from .model import EncoderModel, ModelConfig, init_student_from_teacher
from .synthetic import fuzz_corpus
from .tensor import Tensor, grad_check

GRAD_STEP = 1e-6
GRAD_TOL = 1e-4
TOY_CONFIG = ModelConfig(vocab_size=211, hidden_size=32, num_layers=4, num_heads=4,
                         intermediate_size=128, max_seq_len=64, init_std=0.2)


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed == 0 and self.passed > 0

    def check(self, cond: bool, what: str) -> None:
        if cond:
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(what)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"[{status}] {self.name}: {self.passed} passed, {self.failed} failed"


def toy_problem(seed: int = 0, config: ModelConfig = TOY_CONFIG, batch: int = 2, seq: int = 8,
                mask_prob: float = 0.3):
    """A seeded teacher, its layer-copied student (perturbed) and a masked batch."""
    teacher = EncoderModel(config, seed=seed).freeze()
    student = init_student_from_teacher(teacher)
    rng = np.random.default_rng([seed, 99])
    for p in student.parameters():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    ids = rng.integers(5, config.vocab_size, size=(batch, seq))
    mask = np.ones_like(ids)
    mask[0, -2:] = 0
    ids[0, -2:] = 0
    b = Batch(ids, mask, np.full_like(ids, IGNORE_INDEX))
    b = mask_for_mlm(b, config.vocab_size, mask_prob, (seed, 7))
    if (b.mlm_labels == IGNORE_INDEX).all():
        labels = b.mlm_labels.copy()
        labels[1, 1] = ids[1, 1]
        b = replace(b, mlm_labels=labels)
    return teacher, student, b


# ---------------------------------------------------------------- suites

def _op_cases(rng: np.random.Generator):
    """(name, function of one tensor) pairs covering every registered op."""
    w = Tensor(rng.normal(size=(4, 3)))
    other = Tensor(rng.normal(size=(2, 3, 4)))
    g = Tensor(rng.normal(size=4) + 1.0)
    bvec = Tensor(rng.normal(size=4))
    ids = rng.integers(0, 5, size=(2, 3))
    keep = rng.random((2, 3, 4)) > 0.3
    sim_w = Tensor(rng.normal(size=(2, 3)))
    return [
        ("add", lambda x: T.sum(T.mul(T.add(x, other), other))),
        ("add_bias", lambda x: T.sum(T.mul(T.add(other, T.take_rows(x.reshape(-1, 4), [0])
                                                   .reshape(4)), other))),
        ("sub", lambda x: T.sum(T.mul(T.sub(other, x), other))),
        ("mul", lambda x: T.sum(T.mul(x, x))),
        ("neg_scale", lambda x: T.sum(T.mul(T.scale(T.neg(x), 0.7), other))),
        ("matmul", lambda x: T.sum(T.mul(T.matmul(x, w), T.matmul(x, w)))),
        ("matmul_batched", lambda x: T.sum(T.matmul(x, x.transpose(0, 2, 1)))),
        ("mean", lambda x: T.sum(T.mul(T.mean(x, axis=-1), T.mean(x, axis=-1)))),
        ("reshape_transpose", lambda x: T.sum(T.mul(x.reshape(4, 6).transpose(1, 0),
                                                    other.reshape(6, 4)))),
        ("softmax", lambda x: T.sum(T.mul(T.softmax(x), other))),
        ("log_softmax", lambda x: T.sum(T.mul(T.log_softmax(x), other))),
        ("layer_norm", lambda x: T.sum(T.mul(T.layer_norm(x, g, bvec, 1e-5), other))),
        ("gelu", lambda x: T.sum(T.mul(T.gelu(x), other))),
        ("embedding", lambda x: T.sum(T.mul(T.embedding(x.reshape(6, 4), ids), other))),
        ("pick", lambda x: T.sum(T.pick(x.reshape(6, 4), [0, 1, 2, 3, 0, 1]))),
        ("masked_fill", lambda x: T.sum(T.mul(T.masked_fill(x, keep, 0.5), other))),
        ("clip_min", lambda x: T.sum(T.mul(T.clip_min(x, -0.25), other))),
        ("cosine_similarity", lambda x: T.sum(T.mul(T.cosine_similarity(x, other), sim_w))),
    ]


def suite_op_gradients(seeds: int = 10) -> SuiteResult:
    res = SuiteResult("op-gradients")
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn in _op_cases(rng):
            x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
            if name == "clip_min":
                # keep every entry away from the kink
                x.data = np.where(np.abs(x.data + 0.25) < 1e-3, x.data + 0.1, x.data)
            rep = grad_check(fn, x, GRAD_STEP, GRAD_TOL)
            res.check(rep.passed, f"{name} seed {seed}: rel err {rep.max_rel_error:.2e}")
    return res


def loss_gradient_reports(seed: int, kd_fn: Callable = kd_loss, max_entries: int = 6):
    """Finite-difference reports for kd, mlm, cos and the combined loss."""
    teacher, student, batch = toy_problem(seed)
    rng = np.random.default_rng([seed, 3])
    out = {}
    n, v = 5, 7
    t_logits = rng.normal(size=(n, v)) * 2
    out["kd"] = grad_check(lambda x: kd_fn(t_logits, x), Tensor(rng.normal(size=(n, v)), True),
                           GRAD_STEP, GRAD_TOL)
    labels = rng.integers(0, v, size=(2, 3))
    labels[0, 1] = IGNORE_INDEX
    out["mlm"] = grad_check(lambda x: mlm_loss(x, labels),
                            Tensor(rng.normal(size=(2, 3, v)), True), GRAD_STEP, GRAD_TOL)
    t_hidden = rng.normal(size=(2, 3, 4))
    mask = np.array([[1, 1, 0], [1, 1, 1]])
    out["cos"] = grad_check(lambda x: cos_loss(x, t_hidden, mask),
                            Tensor(rng.normal(size=(2, 3, 4)), True), GRAD_STEP, GRAD_TOL)
    out["combined"] = grad_check(
        lambda: distillation_objective(batch, teacher, student, kd_fn=kd_fn)[0],
        student.parameters(), GRAD_STEP, GRAD_TOL, max_entries=max_entries, seed=seed)
    return out


def suite_loss_gradients(seeds: int = 3, kd_fn: Callable = kd_loss) -> SuiteResult:
    res = SuiteResult("loss-gradients")
    for seed in range(seeds):
        for name, rep in loss_gradient_reports(seed, kd_fn).items():
            res.check(rep.passed, f"{name} seed {seed}: rel err {rep.max_rel_error:.2e}")
    # the teacher must never receive a gradient
    teacher, student, batch = toy_problem(0)
    total, _ = distillation_objective(batch, teacher, student, kd_fn=kd_fn)
    T.backward(total)
    res.check(all(p.grad is None for p in teacher.parameters()), "teacher received gradients")
    return res


def suite_kd_gradient_oracle(cases: int = 20, kd_fn: Callable = kd_loss) -> SuiteResult:
    """Analytic KD gradient against the closed form ``(softmax(s) - softmax(t)) / N``."""
    res = SuiteResult("kd-gradient-oracle")
    for seed in range(cases):
        rng = np.random.default_rng([seed, 11])
        n, v = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        t_rows = rng.normal(size=(n, v)) * 3
        s = Tensor(rng.normal(size=(n, v)) * 3, requires_grad=True)
        T.backward(kd_fn(t_rows, s))
        expect = np.array(ref.kd_grad(t_rows.tolist(), s.data.tolist()))
        res.check(s.grad is not None and np.allclose(s.grad, expect, rtol=1e-9, atol=1e-12),
                  f"case {seed}: gradient differs from closed form")
    return res


def suite_loss_oracles(cases: int = 12, kd_fn: Callable = kd_loss) -> SuiteResult:
    res = SuiteResult("loss-oracles")
    for seed in range(cases):
        rng = np.random.default_rng([seed, 5])
        n, v = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        t, s = rng.normal(size=(n, v)) * 2, rng.normal(size=(n, v)) * 2
        got = kd_fn(t, Tensor(s)).item()
        res.check(abs(got - ref.kd(t.tolist(), s.tolist())) <= 1e-6, f"kd case {seed}")
        labels = rng.integers(0, v, size=n)
        labels[rng.random(n) < 0.3] = IGNORE_INDEX
        if (labels == IGNORE_INDEX).all():
            labels[0] = 0
        got = mlm_loss(Tensor(s), labels).item()
        res.check(abs(got - ref.mlm(s.tolist(), labels.tolist())) <= 1e-6, f"mlm case {seed}")
        h = int(rng.integers(2, 6))
        a, b = rng.normal(size=(n, h)), rng.normal(size=(n, h))
        mask = (rng.random(n) < 0.8).astype(int)
        mask[0] = 1
        got = cos_loss(Tensor(a), b, mask).item()
        res.check(abs(got - ref.cos(a.tolist(), b.tolist(), mask.tolist())) <= 1e-6,
                  f"cos case {seed}")
    return res


def suite_eq2_arithmetic(seeds: int = 3, kd_fn: Callable = kd_loss) -> SuiteResult:
    res = SuiteResult("loss-combination")
    w = DistillWeights()
    for seed in range(seeds):
        teacher, student, batch = toy_problem(seed)
        with T.no_grad():
            _, parts = distillation_objective(batch, teacher, student, w, kd_fn=kd_fn)
            _, doubled = distillation_objective(batch, teacher, student, w.scaled(2.0),
                                                kd_fn=kd_fn)
        expect = 0.45 * parts.kd + 0.45 * parts.mlm + 0.1 * parts.cos
        res.check(abs(parts.total - expect) <= 1e-12, f"seed {seed}: total {parts.total}")
        res.check(doubled.total == 2 * parts.total, f"seed {seed}: not linear in weights")
    return res


def suite_layer_copy(seed: int = 0) -> SuiteResult:
    res = SuiteResult("layer-copy")
    teacher = EncoderModel(replace(TOY_CONFIG, init_std=0.02), seed=seed)
    student = init_student_from_teacher(teacher)
    res.check(len(student.blocks) == 2, "student depth")
    for j, i in enumerate((0, 2)):
        for (_, sp), (_, tp) in zip(student.blocks[j].named_parameters(),
                                    teacher.blocks[i].named_parameters()):
            res.check(np.array_equal(sp.data, tp.data), f"block {j} != teacher block {i}")
            res.check(not np.shares_memory(sp.data, tp.data), f"block {j} aliases teacher")
    before = teacher.blocks[0].wq.data.copy()
    student.blocks[0].wq.data += 1.0
    res.check(np.array_equal(teacher.blocks[0].wq.data, before), "mutation leaked to teacher")
    return res


def suite_splitter_fuzz(n: int = 1000, seed: int = 0, word_limit: int = 400) -> SuiteResult:
    res = SuiteResult("splitter-fuzz")
    lines, ledger = fuzz_corpus(n, seed=seed, word_limit=word_limit)
    out = []
    for line in lines:
        chunks = split_long_sentences(line, word_limit)
        out.extend(chunks)
        ok = " ".join(chunks).split() == line.split()
        for c in chunks:
            words = c.split()
            if any(w.endswith(".") for w in words[:-1]):
                ok &= len(words) <= word_limit
        res.check(ok, f"sentence of {len(line.split())} words")
    stats = corpus_stats(out, word_limit)
    res.check(stats.sentence_count == ledger.sentences_out, "sentence count vs ledger")
    res.check(stats.word_count == ledger.words, "word count vs ledger")
    res.check(stats.over_limit_count == ledger.over_limit, "over-limit count vs ledger")
    return res


def _random_bio(rng, n, types=("PER", "LOC")):
    tags = []
    for _ in range(n):
        r = rng.random()
        ty = types[int(rng.integers(len(types)))]
        tags.append("O" if r < 0.4 else ("B-" if r < 0.7 else "I-") + ty)
    return tags


def suite_f1_oracles(cases: int = 100, seed: int = 0) -> SuiteResult:
    res = SuiteResult("f1-oracles")
    rng = np.random.default_rng(seed)
    for c in range(cases):
        n_seq = int(rng.integers(1, 4))
        lens = rng.integers(1, 9, size=n_seq)
        gold = [_random_bio(rng, int(k)) for k in lens]
        pred = [_random_bio(rng, int(k)) if rng.random() < 0.7 else list(g) for g, k in
                zip(gold, lens)]
        res.check(f1_span(pred, gold) == ref.span_f1(pred, gold), f"span case {c}")
        k = int(rng.integers(2, 6))
        m = int(rng.integers(1, 15))
        g = rng.integers(0, k, size=m).tolist()
        p = rng.integers(0, k, size=m).tolist()
        res.check(f1_multiclass(p, g, k) == ref.weighted_f1(p, g, k), f"weighted case {c}")
    return res


def run_all(quick: bool = False, kd_fn: Callable = kd_loss) -> list[SuiteResult]:
    seeds = 3 if quick else 10
    return [
        suite_op_gradients(seeds),
        suite_loss_gradients(3, kd_fn),
        suite_kd_gradient_oracle(kd_fn=kd_fn),
        suite_loss_oracles(kd_fn=kd_fn),
        suite_eq2_arithmetic(kd_fn=kd_fn),
        suite_layer_copy(),
        suite_splitter_fuzz(),
        suite_f1_oracles(),
    ]
