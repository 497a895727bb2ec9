"""Slow pure-Python reference implementations, independent of numpy and the tape.

Used by ``verify`` to cross-check the fast paths.
"""
from __future__ import annotations

import math
from fractions import Fraction


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def kd(teacher_rows, student_rows):
    total = 0.0
    for t_row, s_row in zip(teacher_rows, student_rows):
        t, s = softmax(t_row), softmax(s_row)
        total -= sum(ti * max(math.log(si), -100.0) if si > 0 else ti * -100.0
                     for ti, si in zip(t, s))
    return total / len(teacher_rows)


def kd_grad(teacher_rows, student_rows):
    """d kd / d student_logits = (softmax(s) - softmax(t)) / N."""
    n = len(student_rows)
    return [[(si - ti) / n for si, ti in zip(softmax(s_row), softmax(t_row))]
            for t_row, s_row in zip(teacher_rows, student_rows)]


def mlm(rows, labels):
    terms = []
    for row, lab in zip(rows, labels):
        if lab == -100:
            continue
        m = max(row)
        lse = m + math.log(sum(math.exp(x - m) for x in row))
        terms.append(lse - row[lab])
    return sum(terms) / len(terms) if terms else 0.0


def cos(student_rows, teacher_rows, mask):
    vals = []
    for s, t, keep in zip(student_rows, teacher_rows, mask):
        if not keep:
            continue
        ns = math.sqrt(sum(x * x for x in s))
        nt = math.sqrt(sum(x * x for x in t))
        sim = sum(a * b for a, b in zip(s, t)) / (ns * nt) if ns > 0 and nt > 0 else 0.0
        vals.append(1.0 - sim)
    return sum(vals) / len(vals) if vals else 0.0


def _continues(prev: str, tag: str) -> bool:
    return tag.startswith("I-") and prev != "O" and prev[2:] == tag[2:]


def spans_brute_force(tags):
    """Every ``(type, i, j)`` for which tags[i:j] is one maximal entity, by enumeration."""
    out = set()
    n = len(tags)
    for i in range(n):
        if tags[i] == "O":
            continue
        if i > 0 and _continues(tags[i - 1], tags[i]):
            continue
        for j in range(i + 1, n + 1):
            inner_ok = all(_continues(tags[k - 1], tags[k]) for k in range(i + 1, j))
            ends = j == n or not _continues(tags[j - 1], tags[j])
            if inner_ok and ends:
                out.add((tags[i][2:], i, j))
    return out


def span_f1(pred_seqs, gold_seqs):
    n_p = n_g = hit = 0
    for k, (p, g) in enumerate(zip(pred_seqs, gold_seqs)):
        ps = {(k,) + s for s in spans_brute_force(p)}
        gs = {(k,) + s for s in spans_brute_force(g)}
        n_p += len(ps)
        n_g += len(gs)
        hit += len(ps & gs)
    if n_p == n_g == 0:
        return 1.0
    prec = Fraction(hit, n_p) if n_p else Fraction(0)
    rec = Fraction(hit, n_g) if n_g else Fraction(0)
    return float(2 * prec * rec / (prec + rec)) if prec + rec else 0.0


def weighted_f1(pred, gold, num_labels):
    total = len(gold)
    score = Fraction(0)
    for c in range(num_labels):
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        support = tp + fn
        if support == 0:
            continue
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, support)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        score += f1 * Fraction(support, total)
    return float(score)


def shape_walk_param_count(vocab, hidden, layers, intermediate, max_seq_len):
    """Count parameters by listing every tensor shape of the encoder."""
    shapes = [(vocab, hidden), (max_seq_len, hidden)]
    for _ in range(layers):
        shapes += [(hidden, hidden), (hidden,)] * 4
        shapes += [(hidden,), (hidden,)]
        shapes += [(hidden, intermediate), (intermediate,), (intermediate, hidden), (hidden,)]
        shapes += [(hidden,), (hidden,)]
    shapes += [(hidden, vocab), (vocab,)]
    return sum(math.prod(s) for s in shapes)
