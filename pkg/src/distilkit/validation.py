"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numbers

import numpy as np


def check_sentences(X) -> list[str]:
    """Accept an iterable of strings (list, array, pandas Series)."""
    if isinstance(X, str):
        raise TypeError("expected a collection of sentences, got a single string")
    out = list(X)
    for i, s in enumerate(out):
        if not isinstance(s, str):
            raise TypeError(f"sentence {i} is {type(s).__name__}, expected str")
    if not out:
        raise ValueError("no sentences given")
    return out


def check_token_sequences(X, y=None):
    """Lists of tokens, optionally with aligned per-token labels."""
    if isinstance(X, str):
        raise TypeError("expected token sequences, got a single string")
    seqs = [list(x.split()) if isinstance(x, str) else list(x) for x in X]
    if not seqs:
        raise ValueError("no sequences given")
    for i, s in enumerate(seqs):
        if not all(isinstance(t, str) for t in s):
            raise TypeError(f"sequence {i} contains non-string tokens")
    if y is None:
        return seqs
    labels = [list(t) for t in y]
    if len(labels) != len(seqs):
        raise ValueError(f"{len(seqs)} sequences but {len(labels)} label sequences")
    for i, (s, t) in enumerate(zip(seqs, labels)):
        if len(s) != len(t):
            raise ValueError(f"sequence {i}: {len(s)} tokens but {len(t)} labels")
    return seqs, labels


def check_labels(y, n: int) -> list:
    labels = list(y.tolist() if isinstance(y, np.ndarray) else y)
    if len(labels) != n:
        raise ValueError(f"{n} samples but {len(labels)} labels")
    return labels


def check_random_state_int(seed) -> int:
    if seed is None:
        return 0
    if isinstance(seed, numbers.Integral):
        return int(seed)
    raise TypeError("random_state must be an int or None; generators are not reproducible "
                    "across fit calls")
