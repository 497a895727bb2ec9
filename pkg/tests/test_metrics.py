import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distilkit import reference as ref
from distilkit.metrics import LabelError, bio_spans, f1_multiclass, f1_span, f1_token, span_prf


def test_token_f1_examples():
    assert f1_token([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert f1_token([[1, 2]], [[0, 0]]) == 0.0
    assert f1_token([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    assert f1_token([[1, 9, 2]], [[1, -100, 2]]) == 1.0


def test_span_f1_examples():
    gold = ["B-PER", "I-PER", "O", "B-LOC"]
    assert f1_span(gold, gold) == 1.0
    pred = ["B-PER", "I-PER", "O", "O", "B-ORG"]
    assert span_prf(pred, ["B-PER", "I-PER", "O", "B-LOC", "O"]) == (0.5, 0.5, 0.5)
    assert f1_span(["O"] * 4, gold) == 0.0
    assert f1_span(["O"] * 3, ["O"] * 3) == 1.0


def test_orphan_inside_tag_opens_a_span():
    assert bio_spans(["O", "I-PER", "I-PER", "I-LOC"]) == {("PER", 1, 3), ("LOC", 3, 4)}


def test_unknown_tag_rejected():
    with pytest.raises(LabelError):
        bio_spans(["X-PER"])


def test_weighted_f1_examples():
    assert f1_multiclass([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert abs(f1_multiclass([0, 1, 1, 1], [0, 0, 1, 1], 2) - 0.7333) <= 1e-4
    assert f1_multiclass([0] * 8, [0, 0, 1, 1, 2, 2, 3, 3], 4) == pytest.approx(0.1, abs=1e-15)


def test_weighted_f1_label_range():
    with pytest.raises(LabelError):
        f1_multiclass([0, 5], [0, 1], 2)


def random_bio(rng, n):
    tags, prev = [], "O"
    for _ in range(n):
        r = rng.random()
        if r < 0.4:
            tags.append("O")
        elif r < 0.7 or prev == "O":
            tags.append(f"B-{rng.choice(['PER', 'LOC'])}")
        else:
            tags.append("I-" + prev[2:] if rng.random() < 0.8 else "I-LOC")
        prev = tags[-1]
    return tags


def test_span_f1_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        pred = [random_bio(rng, n) for _ in range(3)]
        gold = [random_bio(rng, n) for _ in range(3)]
        assert f1_span(pred, gold) == ref.span_f1(pred, gold)
        for p in pred:
            assert bio_spans(p) == ref.spans_brute_force(p)


def test_weighted_f1_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 20))
        pred, gold = rng.integers(0, k, n).tolist(), rng.integers(0, k, n).tolist()
        assert f1_multiclass(pred, gold, k) == ref.weighted_f1(pred, gold, k)


def _canon(raw):
    # canonical BIO: an I- tag only ever continues a span of its own type
    out, prev = [], "O"
    for t in raw:
        if t == "I":
            t = "O" if prev == "O" else "I-" + prev[2:]
        out.append(t)
        prev = t
    return out


@st.composite
def bio_pair(draw):
    n = draw(st.integers(1, 12))
    raw = st.lists(st.sampled_from(["O", "B-PER", "B-LOC", "I"]), min_size=n, max_size=n)
    return _canon(draw(raw)), _canon(draw(raw))


@settings(max_examples=200, deadline=None)
@given(bio_pair())
def test_span_f1_is_one_iff_equal(pair):
    a, b = pair
    assert (f1_span(a, b) == 1.0) == (a == b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=20), st.data())
def test_token_and_weighted_f1_one_iff_equal(gold, data):
    pred = data.draw(st.lists(st.integers(0, 3), min_size=len(gold), max_size=len(gold)))
    assert (f1_token(pred, gold) == 1.0) == (pred == gold)
    assert (f1_multiclass(pred, gold, 4) == 1.0) == (pred == gold)


@settings(max_examples=100, deadline=None)
@given(bio_pair())
def test_span_f1_invariant_under_relabeling(pair):
    swap = {"PER": "LOC", "LOC": "PER"}

    def relabel(tags):
        return [t if t == "O" else t[:2] + swap[t[2:]] for t in tags]
    a, b = pair
    assert f1_span(relabel(a), relabel(b)) == f1_span(a, b)
