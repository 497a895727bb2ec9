"""Seeded synthetic corpora and labelled datasets for desk-scale runs.

The grammar corpus is built from clauses ``subject verb object modifier``
where verb, object and modifier are fixed functions of the subject, and
clauses are joined by a connective determined by the preceding subject. A
masked word is therefore recoverable from its clause mates, which lets a
small encoder reach low MLM loss. Each word belongs to exactly one of five
categories, which doubles as a token-classification label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_SUBJ, N_VERB, N_OBJ, N_MOD, N_CONN = 64, 32, 64, 32, 14
CATEGORIES = ("SUBJ", "VERB", "OBJ", "MOD", "CONN")


def _clause(i: int) -> list[tuple[str, str]]:
    return [(f"sub{i}", "SUBJ"),
            (f"verb{i % N_VERB}", "VERB"),
            (f"obj{(5 * i + 3) % N_OBJ}", "OBJ"),
            (f"mod{(3 * i + 1) % N_MOD}", "MOD")]


def grammar_sentence(rng: np.random.Generator, min_clauses: int = 1,
                     max_clauses: int = 4) -> list[tuple[str, str]]:
    k = int(rng.integers(min_clauses, max_clauses + 1))
    out: list[tuple[str, str]] = []
    prev = None
    for _ in range(k):
        i = int(rng.integers(N_SUBJ))
        if prev is not None:
            out.append((f"and{prev % N_CONN}", "CONN"))
        out.extend(_clause(i))
        prev = i
    return out


def grammar_corpus(n_sentences: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [" ".join(w for w, _ in grammar_sentence(rng)) for _ in range(n_sentences)]


def grammar_tagged(n_sentences: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Sentences with a per-word category tag (5 labels)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sentences):
        pairs = grammar_sentence(rng)
        out.append(([w for w, _ in pairs], [t for _, t in pairs]))
    return out


def grammar_words() -> list[str]:
    words = [f"sub{i}" for i in range(N_SUBJ)] + [f"verb{i}" for i in range(N_VERB)]
    words += [f"obj{i}" for i in range(N_OBJ)] + [f"mod{i}" for i in range(N_MOD)]
    return words + [f"and{i}" for i in range(N_CONN)]


def zipf_corpus(n_sentences: int, n_words: int = 400, exponent: float = 1.1,
                seed: int = 0, min_len: int = 3, max_len: int = 15) -> list[str]:
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    p = ranks ** -exponent
    p /= p.sum()
    lines = []
    for _ in range(n_sentences):
        n = int(rng.integers(min_len, max_len + 1))
        lines.append(" ".join(f"w{i}" for i in rng.choice(n_words, size=n, p=p)))
    return lines


# ---------------------------------------------------------------- splitter fuzz corpus

@dataclass
class CorpusLedger:
    """What the generator put into a corpus, tallied while building it."""

    sentences_in: int = 0
    words: int = 0
    sentences_out: int = 0
    over_limit: int = 0


def _pack(segment_lengths: list[int], limit: int) -> list[int]:
    # chunk sizes from greedy packing of whole segments
    sizes, acc = [], 0
    for n in segment_lengths:
        if acc and acc + n > limit:
            sizes.append(acc)
            acc = 0
        acc += n
    if acc:
        sizes.append(acc)
    return sizes


def fuzz_corpus(n_sentences: int, seed: int = 0, max_words: int = 1000,
                word_limit: int = 400, period_rate: float = 0.02
                ) -> tuple[list[str], CorpusLedger]:
    """Random sentences of 1..max_words words with sporadic sentence-final periods.

    The ledger's post-split counts come from the segment lengths the generator
    chose, not from the splitter under test.
    """
    rng = np.random.default_rng(seed)
    ledger = CorpusLedger()
    lines = []
    for _ in range(n_sentences):
        n = int(rng.integers(1, max_words + 1))
        words = [f"t{int(x)}" for x in rng.integers(0, 5000, size=n)]
        seg_lengths, run = [], 0
        for j in range(n):
            run += 1
            if rng.random() < period_rate:
                words[j] += "."
                seg_lengths.append(run)
                run = 0
        if run:
            seg_lengths.append(run)
        lines.append(" ".join(words))
        ledger.sentences_in += 1
        ledger.words += n
        sizes = [n] if n <= word_limit else _pack(seg_lengths, word_limit)
        ledger.sentences_out += len(sizes)
        ledger.over_limit += sum(s > word_limit for s in sizes)
    return lines, ledger


# ---------------------------------------------------------------- labelled datasets

def intent_dataset(n_rows: int = 2786, n_labels: int = 139, n_train: int = 2228,
                   seed: int = 0) -> tuple[list[tuple[str, str]], list[str]]:
    """Synthetic intent rows ``(text, label)`` plus a ``train``/``test`` split column.

    Every label appears at least once in the training portion when
    ``n_train >= n_labels``.
    """
    rng = np.random.default_rng(seed)
    labels = [f"intent{i:03d}" for i in range(n_labels)]
    cue = {lab: [f"cue{i}_{j}" for j in range(3)] for i, lab in enumerate(labels)}
    fillers = [f"filler{i}" for i in range(40)]
    assign = np.concatenate([np.arange(n_labels), rng.integers(0, n_labels, n_rows - n_labels)])
    rows = []
    for a in assign:
        lab = labels[int(a)]
        words = list(rng.choice(fillers, size=int(rng.integers(2, 6))))
        words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(cue[lab])))
        rows.append((" ".join(words), lab))
    split = ["train"] * n_train + ["test"] * (n_rows - n_train)
    return rows, split


def bio_dataset(n_sentences: int, seed: int = 0,
                types: tuple[str, ...] = ("PER", "LOC", "ORG")
                ) -> list[tuple[list[str], list[str]]]:
    """Token sequences with BIO entity tags; entity words are drawn from per-type pools."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sentences):
        toks, tags = [], []
        for _ in range(int(rng.integers(4, 12))):
            if rng.random() < 0.25:
                ty = types[int(rng.integers(len(types)))]
                for j in range(int(rng.integers(1, 3))):
                    toks.append(f"{ty.lower()}{int(rng.integers(20))}")
                    tags.append(("B-" if j == 0 else "I-") + ty)
            else:
                toks.append(f"word{int(rng.integers(60))}")
                tags.append("O")
        out.append((toks, tags))
    return out
