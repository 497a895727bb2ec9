"""F1 scores for token tagging, BIO entity spans and multi-class classification."""
from __future__ import annotations

from collections import Counter
from fractions import Fraction
from typing import Sequence

import numpy as np

IGNORE_INDEX = -100


class LabelError(ValueError):
    """A label or tag is malformed or out of range."""


def _nested(seq) -> list[list]:
    seq = list(seq)
    if seq and isinstance(seq[0], (list, tuple, np.ndarray)):
        return [list(s) for s in seq]
    return [seq]


def f1_token(pred, gold) -> float:
    """Micro-averaged F1 over token positions, skipping gold ``-100`` / ``None``.

    With exactly one prediction per position this equals accuracy.
    """
    p_seqs, g_seqs = _nested(pred), _nested(gold)
    if len(p_seqs) != len(g_seqs):
        raise ValueError(f"{len(p_seqs)} predicted sequences vs {len(g_seqs)} gold")
    correct = total = 0
    for i, (p, g) in enumerate(zip(p_seqs, g_seqs)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: {len(p)} predictions vs {len(g)} gold labels")
        for a, b in zip(p, g):
            if b is None or b == IGNORE_INDEX:
                continue
            total += 1
            correct += a == b
    return correct / total if total else 0.0


def _parse_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    raise LabelError(f"unknown tag {tag!r}; expected O, B-<type> or I-<type>")


def bio_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity spans ``(type, start, end_exclusive)``; an I- tag that cannot continue
    the open span starts a new one, as if it were B-."""
    spans = set()
    cur_type, start = None, 0
    for i, tag in enumerate(tags):
        prefix, ty = _parse_tag(tag)
        if prefix == "I" and ty == cur_type:
            continue
        if cur_type is not None:
            spans.add((cur_type, start, i))
        cur_type, start = (ty, i) if prefix != "O" else (None, i)
    if cur_type is not None:
        spans.add((cur_type, start, len(tags)))
    return spans


def span_prf(pred, gold) -> tuple[float, float, float]:
    p_seqs, g_seqs = _nested(pred), _nested(gold)
    if len(p_seqs) != len(g_seqs):
        raise ValueError(f"{len(p_seqs)} predicted sequences vs {len(g_seqs)} gold")
    n_pred = n_gold = n_hit = 0
    for i, (p, g) in enumerate(zip(p_seqs, g_seqs)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: {len(p)} predicted tags vs {len(g)} gold tags")
        ps, gs = bio_spans(p), bio_spans(g)
        n_pred += len(ps)
        n_gold += len(gs)
        n_hit += len(ps & gs)
    if n_pred == n_gold == 0:
        # nothing to find and nothing claimed: perfect agreement
        return 1.0, 1.0, 1.0
    # exact rationals, rounded once
    precision = Fraction(n_hit, n_pred) if n_pred else Fraction(0)
    recall = Fraction(n_hit, n_gold) if n_gold else Fraction(0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return float(precision), float(recall), float(f1)


def f1_span(pred, gold) -> float:
    """Entity-level F1 with exact ``(type, start, end)`` matching under BIO tagging."""
    return span_prf(pred, gold)[2]


def f1_multiclass(pred, gold, num_labels: int) -> float:
    """Support-weighted mean of per-class F1."""
    pred = [int(x) for x in pred]
    gold = [int(x) for x in gold]
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions vs {len(gold)} gold labels")
    for x in pred + gold:
        if not 0 <= x < num_labels:
            raise LabelError(f"label {x} outside [0, {num_labels})")
    if not gold:
        return 0.0
    support = Counter(gold)
    pred_count = Counter(pred)
    hits = Counter(g for p, g in zip(pred, gold) if p == g)
    score = Fraction(0)
    for c, n in support.items():
        score += n * Fraction(2 * hits[c], pred_count[c] + n)
    return float(score / len(gold))
