"""Corpus preprocessing, word-level vocabulary, encoding and MLM masking.

Corpus files are UTF-8 text with one sentence per line.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
IGNORE_INDEX = -100


class VocabError(ValueError):
    pass


# ---------------------------------------------------------------- splitting

def _ends_sentence(word: str) -> bool:
    # words come from str.split(), so a trailing '.' is followed by whitespace or end of text
    return word.endswith(".")


def split_long_sentences(text: str, word_limit: int = 400) -> list[str]:
    """Split a sentence longer than ``word_limit`` words at sentence-final periods.

    Whole period-delimited segments are packed greedily into chunks of at most
    ``word_limit`` words. A single segment longer than the limit has no split
    point and is kept as one oversized chunk.
    """
    if word_limit < 1:
        raise ValueError("word_limit must be >= 1")
    words = text.split()
    if len(words) <= word_limit:
        return [text]

    segments: list[list[str]] = []
    current: list[str] = []
    for w in words:
        current.append(w)
        if _ends_sentence(w):
            segments.append(current)
            current = []
    if current:
        segments.append(current)

    chunks: list[list[str]] = []
    acc: list[str] = []
    for seg in segments:
        if acc and len(acc) + len(seg) > word_limit:
            chunks.append(acc)
            acc = []
        acc = acc + seg
    if acc:
        chunks.append(acc)
    return [" ".join(c) for c in chunks]


@dataclass(frozen=True)
class CorpusStats:
    sentence_count: int = 0
    word_count: int = 0
    over_limit_count: int = 0

    def to_text(self) -> str:
        return (f"sentences: {self.sentence_count}\n"
                f"words: {self.word_count}\n"
                f"over_limit: {self.over_limit_count}\n")

    @classmethod
    def from_text(cls, text: str) -> CorpusStats:
        kv = dict(line.split(":", 1) for line in text.splitlines() if line.strip())
        return cls(int(kv["sentences"]), int(kv["words"]), int(kv["over_limit"]))


def corpus_stats(lines: Iterable[str], word_limit: int = 400) -> CorpusStats:
    """Count sentences (lines) and whitespace-delimited words.

    ``over_limit_count`` counts sentences with more than ``word_limit`` words.
    """
    n_sent = n_words = n_over = 0
    for line in lines:
        n = len(line.split())
        n_sent += 1
        n_words += n
        n_over += n > word_limit
    return CorpusStats(n_sent, n_words, n_over)


def read_lines(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            yield line.rstrip("\n")


def preprocess_corpus(lines: Iterable[str], word_limit: int = 400) -> Iterator[str]:
    for line in lines:
        yield from split_long_sentences(line, word_limit)


def preprocess_file(src, dst, word_limit: int = 400) -> CorpusStats:
    """Split ``src`` into ``dst`` and write a ``<dst>.stats`` sidecar."""
    out_lines = list(preprocess_corpus(read_lines(src), word_limit))
    dst = Path(dst)
    dst.write_text("".join(line + "\n" for line in out_lines), encoding="utf-8")
    stats = corpus_stats(out_lines, word_limit)
    Path(str(dst) + ".stats").write_text(stats.to_text(), encoding="utf-8")
    return stats


# ---------------------------------------------------------------- vocabulary

class Vocab:
    """Dense token <-> id mapping with the five reserved tokens first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise VocabError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id, unk_id, cls_id, sep_id, mask_id = range(5)
    n_special = len(SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        return cls([line for line in read_lines(path) if line != ""])


def build_vocab(lines: Iterable[str], target_size: int) -> Vocab:
    """Frequency-ranked lowercase word vocabulary, ties broken lexicographically."""
    if target_size <= len(SPECIAL_TOKENS):
        raise VocabError(f"target_size must exceed {len(SPECIAL_TOKENS)} reserved tokens")
    counts: collections.Counter[str] = collections.Counter()
    for line in lines:
        counts.update(line.lower().split())
    if not counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    for tok in SPECIAL_TOKENS:
        counts.pop(tok.lower(), None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[:target_size - len(SPECIAL_TOKENS)]]
    return Vocab(list(SPECIAL_TOKENS) + words)


# ---------------------------------------------------------------- encoding

def encode_words(words: Sequence[str], vocab: Vocab, max_seq_len: int):
    """``[CLS] w1 .. wn [SEP]`` padded to ``max_seq_len``; returns ``(ids, mask)``."""
    if max_seq_len < 2:
        raise ValueError("max_seq_len must leave room for [CLS] and [SEP]")
    body = [vocab.id(w.lower()) for w in words][:max_seq_len - 2]
    ids = [vocab.cls_id] + body + [vocab.sep_id]
    n = len(ids)
    ids = np.array(ids + [vocab.pad_id] * (max_seq_len - n), dtype=np.int64)
    mask = np.zeros(max_seq_len, dtype=np.int64)
    mask[:n] = 1
    return ids, mask


def encode(sentence: str, vocab: Vocab, max_seq_len: int):
    return encode_words(sentence.split(), vocab, max_seq_len)


def decode(ids, vocab: Vocab) -> str:
    """Inverse of ``encode`` for in-vocabulary sentences."""
    return " ".join(vocab.tokens[i] for i in ids if i >= vocab.n_special)


@dataclass(frozen=True)
class Batch:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    def validate(self, vocab_size: int) -> None:
        if not (self.token_ids.shape == self.attention_mask.shape == self.mlm_labels.shape):
            raise ValueError("batch arrays must share one shape")
        if (self.token_ids >= vocab_size).any() or (self.token_ids < 0).any():
            raise ValueError("token id outside vocabulary")
        if ((self.mlm_labels != IGNORE_INDEX) & (self.attention_mask == 0)).any():
            raise ValueError("mlm target on a padded position")


def make_batch(sentences: Sequence[str], vocab: Vocab, max_seq_len: int,
               trim: bool = True) -> Batch:
    """Encode sentences into one batch; with ``trim`` drop all-padding columns."""
    enc = [encode(s, vocab, max_seq_len) for s in sentences]
    ids = np.stack([e[0] for e in enc])
    mask = np.stack([e[1] for e in enc])
    if trim:
        width = int(mask.sum(axis=1).max())
        ids, mask = ids[:, :width], mask[:, :width]
    return Batch(ids, mask, np.full_like(ids, IGNORE_INDEX))


def batches(sentences: Sequence[str], vocab: Vocab, max_seq_len: int,
            batch_size: int) -> list[Batch]:
    return [make_batch(sentences[i:i + batch_size], vocab, max_seq_len)
            for i in range(0, len(sentences), batch_size)]


def mask_for_mlm(batch: Batch, vocab: Vocab | int, mask_prob: float = 0.15,
                 rng_seed=0) -> Batch:
    """Select MLM targets with BERT's 80/10/10 corruption scheme.

    ``rng_seed`` is anything ``numpy.random.default_rng`` accepts, e.g.
    ``(global_seed, batch_index)``.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError("mask_prob must lie strictly between 0 and 1")
    vocab_size = len(vocab) if isinstance(vocab, Vocab) else int(vocab)
    rng = np.random.default_rng(rng_seed)
    ids = batch.token_ids
    eligible = (batch.attention_mask == 1) & (ids >= Vocab.n_special)
    u = rng.random(ids.shape)
    action = rng.random(ids.shape)
    random_ids = rng.integers(Vocab.n_special, vocab_size, size=ids.shape)

    selected = eligible & (u < mask_prob)
    labels = np.where(selected, ids, IGNORE_INDEX)
    new_ids = ids.copy()
    new_ids[selected & (action < 0.8)] = Vocab.mask_id
    swap = selected & (action >= 0.8) & (action < 0.9)
    new_ids[swap] = random_ids[swap]
    return replace(batch, token_ids=new_ids, mlm_labels=labels)
