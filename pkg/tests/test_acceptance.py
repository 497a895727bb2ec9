"""End-to-end acceptance checks at desk scale.

Each test records one PASS/FAIL line through the ``acceptance`` fixture; the
lines are repeated in the terminal summary. Run with ``pytest -v -s`` to see
them inline as well.
"""
import json
import re
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from distilkit import tensor as T
from distilkit import verify
from distilkit.cli import main
from distilkit.corpus import batches, build_vocab, mask_for_mlm
from distilkit.distill import (PretrainConfig, cos_loss, distillation_objective, evaluate_mlm,
                               kd_loss, mlm_loss, pretrain, train_mlm)
from distilkit.finetune import TOKEN, LabeledDataset, TaskSpec, benchmark_pair, run_task
from distilkit.model import EncoderModel, ModelConfig, init_student_from_teacher
from distilkit.synthetic import grammar_corpus, grammar_tagged
from distilkit.tensor import Tensor

pytestmark = pytest.mark.slow

DESK = ModelConfig(vocab_size=211, hidden_size=32, num_layers=4, num_heads=4,
                   intermediate_size=128, max_seq_len=64)
ORACLES = Path(__file__).parent / "oracles" / "loss_cases.json"


@pytest.fixture(scope="module")
def trained():
    """Teacher trained by masked LM, then a layer-copied student distilled for 200 steps."""
    sentences = grammar_corpus(500, seed=0)
    vocab = build_vocab(sentences, DESK.vocab_size)
    train = batches(sentences, vocab, DESK.max_seq_len, 16)
    teacher = EncoderModel(DESK, seed=0)
    train_mlm(teacher, train, steps=2000, learning_rate=1e-3, seed=0)
    teacher.freeze()
    teacher_mlm = evaluate_mlm(teacher, batches(grammar_corpus(100, seed=50), vocab, 64, 16))

    student = init_student_from_teacher(teacher)
    t0 = time.perf_counter()
    result = pretrain(student, teacher, batches(sentences, vocab, DESK.max_seq_len, 6),
                      PretrainConfig(learning_rate=5e-4, batch_size=6, epochs=3, max_steps=200))
    wall = time.perf_counter() - t0
    return dict(vocab=vocab, teacher=teacher, student=student, log=result.log,
                teacher_mlm=teacher_mlm, distill_wall=wall)


def test_criterion_1_gradients(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(3):
        for name, rep in verify.loss_gradient_reports(seed).items():
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    wall = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and wall <= 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert acceptance(1, ok, f"max rel error {detail} over 3 seeds in {wall:.1f}s")


def test_criterion_2_loss_oracles(acceptance):
    cases = json.loads(ORACLES.read_text())
    errs = {
        "kd": [abs(kd_loss(np.array(c["teacher"]), Tensor(c["student"]), c["temperature"]).item()
                   - c["value"]) for c in cases["kd"]],
        "mlm": [abs(mlm_loss(Tensor(c["logits"]), c["labels"]).item() - c["value"])
                for c in cases["mlm"]],
        "cos": [abs(cos_loss(Tensor(c["student"]), np.array(c["teacher"]), c["mask"]).item()
                    - c["value"]) for c in cases["cos"]],
    }
    ok = all(len(e) >= 10 and max(e) <= 1e-6 for e in errs.values())
    detail = ", ".join(f"{k} {len(e)} cases max err {max(e):.1e}" for k, e in errs.items())
    assert acceptance(2, ok, detail)


def test_criterion_3_total_is_weighted_sum(trained, acceptance):
    worst = max(abs(r.total - (0.45 * r.kd + 0.45 * r.mlm + 0.1 * r.cos)) for r in trained["log"])
    suite = verify.suite_eq2_arithmetic()
    ok = worst <= 1e-12 and suite.ok
    assert acceptance(3, ok, f"{len(trained['log'])} logged steps, max deviation {worst:.1e}; "
                             f"{suite.line()}")


def test_criterion_4_layer_copy(acceptance):
    suite = verify.suite_layer_copy(seed=0)
    assert acceptance(4, suite.ok, suite.line())


def test_criterion_5_distillation_effectiveness(trained, acceptance):
    totals = [r.total for r in trained["log"]]
    first, final = statistics.fmean(totals[:20]), statistics.fmean(totals[-20:])
    teacher, student, vocab = trained["teacher"], trained["student"], trained["vocab"]
    fresh = EncoderModel(student.config, seed=1234)
    held = batches(grammar_corpus(60, seed=77), vocab, 64, 6)
    kd = {"distilled": [], "random": []}
    with T.no_grad():
        for i, b in enumerate(held):
            mb = mask_for_mlm(b, vocab, 0.15, (9, i))
            kd["distilled"].append(distillation_objective(mb, teacher, student)[1].kd)
            kd["random"].append(distillation_objective(mb, teacher, fresh)[1].kd)
    kd_s, kd_r = statistics.fmean(kd["distilled"]), statistics.fmean(kd["random"])
    ok = (trained["teacher_mlm"] < 1.0 and final < 0.8 * first and kd_s < kd_r
          and trained["distill_wall"] <= 600)
    assert acceptance(5, ok, f"teacher mlm {trained['teacher_mlm']:.3f}; final/first "
                             f"{final:.3f}/{first:.3f} = {final / first:.3f}; held-out kd "
                             f"{kd_s:.3f} vs random {kd_r:.3f}; "
                             f"distillation {trained['distill_wall']:.0f}s")


def tagged(n, seed):
    return LabeledDataset.from_token_pairs(grammar_tagged(n, seed=seed))


def test_criterion_6_speedup(trained, acceptance):
    spec = TaskSpec(TOKEN, 5, epochs=4, batch_size=32, learning_rate=5e-5, head_init_std=0.0)
    train, test = tagged(300, 11), tagged(300, 12)
    test = LabeledDataset(test.kind, test.examples, train.label_names)
    res = benchmark_pair(trained["student"], trained["teacher"], train, test, spec,
                         trained["vocab"], runs=3)
    ft, ev = res.finetune_ratio, res.eval_ratio
    band = all(0.4 <= r <= 0.8 for r in (ft, ev))
    assert acceptance(6, ft <= 0.8 and ev <= 0.8,
                      f"median of 3 runs: fine-tune ratio {ft:.3f}, eval ratio {ev:.3f}; "
                      f"within [0.4, 0.8] band: {band}")


def test_criterion_7_finetune_sanity(trained, acceptance):
    data = tagged(1000, 21)
    spec = TaskSpec(TOKEN, data.num_labels, epochs=4, batch_size=32, learning_rate=5e-5,
                    folds=5, head_init_std=0.0)
    rep = run_task(trained["student"], data, None, spec, trained["vocab"], seed=0)
    gap = abs(statistics.fmean(rep.per_fold) - rep.f1)
    folds = ",".join(f"{x:.4f}" for x in rep.per_fold)
    assert acceptance(7, rep.f1 >= 0.95 and gap <= 1e-9,
                      f"5 classes, 5 folds: F1 {rep.f1:.4f} (folds {folds}), mean gap {gap:.1e}")


def test_criterion_8_splitter_fuzz(acceptance):
    suite = verify.suite_splitter_fuzz(n=1000, seed=0)
    assert acceptance(8, suite.ok, suite.line())


def test_criterion_9_f1_oracles(acceptance):
    suite = verify.suite_f1_oracles(cases=100, seed=0)
    assert acceptance(9, suite.ok, suite.line())


def _desk_run(root: Path) -> dict[str, bytes]:
    assert main(["synthesize", str(root), "--sentences", "200", "--tagged", "200"]) == 0
    cfg = root / "config.ini"
    text = re.sub(r"^init_mlm_steps = .*$", "init_mlm_steps = 200", cfg.read_text(), flags=re.M)
    cfg.write_text(text)
    for argv in (["preprocess"], ["build-vocab"],
                 ["pretrain", "--init-teacher", "--max-steps", "50"],
                 ["finetune", "--task", "pos"],
                 ["benchmark", "--task", "pos", "--runs", "1"]):
        assert main(argv + ["--config", str(cfg)]) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and "timing" not in p.name}


def test_criterion_10_determinism(tmp_path, acceptance):
    a, b = _desk_run(tmp_path / "a"), _desk_run(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and any(k.endswith(".ckpt") for k in a)
    assert acceptance(10, ok, f"{len(a)} artifacts compared, differing: {differing or 'none'}")
