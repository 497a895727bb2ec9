import statistics

import numpy as np
import pytest

from distilkit.corpus import build_vocab
from distilkit.finetune import (SEQUENCE, TOKEN, DatasetError, LabeledDataset, TaskSpec,
                                attach_head, benchmark_pair, evaluate, finetune, format_duration,
                                kfold_split, load_classification_tsv, load_conll, parse_table,
                                run_task, write_classification_tsv, write_conll)
from distilkit.model import EncoderModel, ModelConfig, init_student_from_teacher
from distilkit.synthetic import grammar_tagged, grammar_words, intent_dataset
from distilkit.tensor import Tensor


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(grammar_words(), 211)


def two_class(n, seed=4):
    pairs = [(w, ["SUBJ" if t == "SUBJ" else "OTHER" for t in tags])
             for w, tags in grammar_tagged(n, seed=seed)]
    return LabeledDataset.from_token_pairs(pairs)


def test_head_shape_and_zero_init():
    model = EncoderModel(ModelConfig(), seed=0)
    task = attach_head(model, TaskSpec(SEQUENCE, 2, head_init_std=0.0))
    assert sum(p.size for p in task.head_parameters()) == 2 * 32 + 2
    logits = Tensor(np.zeros((3, 32))) @ task.head_w + task.head_b
    p = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
    assert np.allclose(p, 0.5)


def test_head_init_is_seeded():
    spec = TaskSpec(TOKEN, 5)
    a = attach_head(EncoderModel(ModelConfig(), 0), spec, seed=3).head_w.data
    b = attach_head(EncoderModel(ModelConfig(), 0), spec, seed=3).head_w.data
    assert np.array_equal(a, b) and a.std() > 0


def test_zero_epochs_leaves_parameters(vocab):
    data = two_class(20)
    spec = TaskSpec(TOKEN, 2, epochs=0)
    task = attach_head(EncoderModel(ModelConfig(), 0), spec)
    before = [p.data.copy() for p in task.parameters()]
    res = finetune(task, data, spec, vocab)
    assert res.steps == 0 and res.wall < 0.1
    assert all(np.array_equal(a, p.data) for a, p in zip(before, task.parameters()))


def test_separable_task_reaches_high_training_accuracy(vocab):
    data = two_class(1000)
    spec = TaskSpec(TOKEN, 2, head_init_std=0.0)
    task = attach_head(EncoderModel(ModelConfig(), seed=0), spec)
    finetune(task, data, spec, vocab, seed=0)
    assert evaluate(task, data, vocab)[0] >= 0.99


def test_finetune_is_deterministic(vocab):
    data = two_class(60)
    spec = TaskSpec(TOKEN, 2, epochs=2)
    scores = []
    for _ in range(2):
        task = attach_head(EncoderModel(ModelConfig(), 0), spec, seed=1)
        finetune(task, data, spec, vocab, seed=7)
        scores.append(evaluate(task, data, vocab)[0])
    assert scores[0] == scores[1]


def test_kfold_examples():
    data = LabeledDataset(SEQUENCE, [(f"s{i}", 0) for i in range(10)], ["a"])
    folds = kfold_split(data, 5, seed=0)
    tests = [sorted(t.examples) for _, t in folds]
    assert all(len(t) == 2 for t in tests)
    assert sorted(x for t in tests for x in t) == sorted(data.examples)
    for tr, te in folds:
        assert not set(tr.examples) & set(te.examples)
    eleven = LabeledDataset(SEQUENCE, [(f"s{i}", 0) for i in range(11)], ["a"])
    assert [len(t) for _, t in kfold_split(eleven, 5, 0)] == [3, 2, 2, 2, 2]
    again = kfold_split(data, 5, seed=0)
    assert [t.examples for _, t in again] == [t.examples for _, t in folds]


def test_conll_loader(tmp_path):
    path = tmp_path / "a.conll"
    path.write_text("Mario\tB-PER\nRossi\tI-PER\n\nRoma\tB-LOC\nè\tO\n")
    data = load_conll(path)
    assert len(data) == 2
    assert [data.label_names[i] for i in data.examples[0][1]] == ["B-PER", "I-PER"]
    write_conll([(["a", "b"], ["O", "B-X"])], tmp_path / "b.conll")
    assert load_conll(tmp_path / "b.conll").examples[0][0] == ["a", "b"]


def test_conll_loader_names_bad_line(tmp_path):
    path = tmp_path / "bad.conll"
    path.write_text("Mario\tB-PER\nRossi B-PER\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_conll(path)


def test_intent_tsv_with_split_file(tmp_path):
    rows, split = intent_dataset()
    write_classification_tsv(rows, tmp_path / "intent.tsv")
    (tmp_path / "intent.split").write_text("".join(s + "\n" for s in split))
    train, test = load_classification_tsv(tmp_path / "intent.tsv", tmp_path / "intent.split")
    assert train.num_labels == test.num_labels == 139
    assert (len(train), len(test)) == (2228, 558)


def test_tsv_loader_names_bad_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("hello\tgreet\nno tab here\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_classification_tsv(path)


def test_format_duration():
    assert format_duration(550.0) == "9'10.00''"
    assert format_duration(992.0) == "16'32.00''"


def test_kfold_report_mean_equals_headline(vocab):
    data = two_class(40)
    spec = TaskSpec(TOKEN, 2, epochs=1, folds=5, head_init_std=0.0)
    rep = run_task(EncoderModel(ModelConfig(), 0), data, None, spec, vocab, seed=0, runs=2)
    assert len(rep.per_fold) == 5
    assert abs(statistics.fmean(rep.per_fold) - rep.f1) <= 1e-9


def test_benchmark_same_model_and_swapped_order(vocab):
    data = two_class(40)
    test = two_class(20, seed=9)
    spec = TaskSpec(TOKEN, 2, epochs=1)
    teacher = EncoderModel(ModelConfig(), 0)
    student = init_student_from_teacher(teacher)
    same = benchmark_pair(teacher, teacher, data, test, spec, vocab, runs=1, task_name="t")
    assert same.reports[0].f1 == same.reports[1].f1
    ab = benchmark_pair(student, teacher, data, test, spec, vocab, runs=1)
    ba = benchmark_pair(teacher, student, data, test, spec, vocab, runs=1,
                        names=("teacher", "student"))
    assert ab.reports[0].f1 == ba.reports[1].f1 and ab.reports[1].f1 == ba.reports[0].f1
    rows = parse_table(ab.table)
    assert rows[0] == ["Model", "F1 score", "Fine-tuning time", "Evaluation time"]
    assert rows[3][0] == "ratio student/teacher" and float(rows[3][3]) > 0


def test_student_evaluates_faster_than_teacher(vocab):
    data = two_class(200)
    teacher = EncoderModel(ModelConfig(), 0)
    student = init_student_from_teacher(teacher)
    spec = TaskSpec(TOKEN, 2)
    walls = {}
    for name, model in (("student", student), ("teacher", teacher)):
        task = attach_head(model, spec)
        walls[name] = statistics.median(evaluate(task, data, vocab)[1] for _ in range(5))
    assert walls["student"] < walls["teacher"]
