"""scikit-learn style wrappers around the functional core.

``MaskedLMEncoder`` trains an encoder from scratch with masked-LM,
``DistilledEncoder`` distils a fitted teacher into a half-depth student,
and ``TokenClassifier`` / ``SequenceClassifier`` fine-tune any of them.
All of them follow the ``fit``/``transform``/``predict`` conventions and
inherit ``get_params``/``set_params`` from ``BaseEstimator``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .corpus import Vocab, batches, build_vocab, make_batch, preprocess_corpus
from .distill import DistillWeights, PretrainConfig, pretrain, train_mlm
from .finetune import (SEQUENCE, TOKEN, LabeledDataset, TaskSpec, attach_head, finetune,
                       predict as predict_ids, score)
from .model import EncoderModel, ModelConfig, encoder_forward, init_student_from_teacher
from .validation import (check_labels, check_random_state_int, check_sentences,
                         check_token_sequences)


def _cls_features(model: EncoderModel, vocab: Vocab, sentences, batch_size: int = 64):
    out = []
    with T.no_grad():
        for i in range(0, len(sentences), batch_size):
            b = make_batch(sentences[i:i + batch_size], vocab, model.config.max_seq_len)
            out.append(encoder_forward(model, b.token_ids, b.attention_mask).data[:, 0, :])
    return np.concatenate(out, axis=0)


def _unwrap(encoder):
    """Return ``(EncoderModel, Vocab | None)`` from a fitted wrapper or a bare model."""
    if isinstance(encoder, MaskedLMEncoder):
        check_is_fitted(encoder, "model_")
        return encoder.model_, encoder.vocab_
    if isinstance(encoder, DistilledEncoder):
        check_is_fitted(encoder, "student_")
        return encoder.student_, encoder.vocab_
    if isinstance(encoder, EncoderModel):
        return encoder, None
    raise TypeError(f"cannot use {type(encoder).__name__} as an encoder")


class MaskedLMEncoder(TransformerMixin, BaseEstimator):
    """Encoder trained from scratch with masked language modelling.

    ``transform`` returns the final hidden state at the ``[CLS]`` position.
    """

    def __init__(self, vocab_size=211, hidden_size=32, num_layers=4, num_heads=4,
                 intermediate_size=128, max_seq_len=64, steps=2000, batch_size=16,
                 learning_rate=1e-3, mask_prob=0.15, word_limit=400, random_state=0):
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.intermediate_size = intermediate_size
        self.max_seq_len = max_seq_len
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mask_prob = mask_prob
        self.word_limit = word_limit
        self.random_state = random_state

    def fit(self, X, y=None):
        seed = check_random_state_int(self.random_state)
        sentences = list(preprocess_corpus(check_sentences(X), self.word_limit))
        self.vocab_ = build_vocab(sentences, self.vocab_size)
        config = ModelConfig(len(self.vocab_), self.hidden_size, self.num_layers, self.num_heads,
                             self.intermediate_size, self.max_seq_len)
        self.model_ = EncoderModel(config, seed=seed)
        data = batches(sentences, self.vocab_, self.max_seq_len, self.batch_size)
        self.loss_curve_ = train_mlm(self.model_, data, self.steps, self.learning_rate, seed,
                                     self.mask_prob)
        self.model_.freeze()
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return _cls_features(self.model_, self.vocab_, check_sentences(X))


class DistilledEncoder(TransformerMixin, BaseEstimator):
    """Half-depth student distilled from ``teacher``.

    ``teacher`` is a fitted ``MaskedLMEncoder`` or an ``EncoderModel`` (then
    ``vocab`` is required). The student starts as a copy of every other
    teacher block and is trained on the weighted KD + MLM + cosine loss.
    """

    def __init__(self, teacher=None, vocab=None, alpha_kd=0.45, alpha_mlm=0.45, alpha_cos=0.10,
                 batch_size=6, learning_rate=5e-4, epochs=3, max_steps=None, temperature=1.0,
                 mask_prob=0.15, word_limit=400, random_state=0):
        self.teacher = teacher
        self.vocab = vocab
        self.alpha_kd = alpha_kd
        self.alpha_mlm = alpha_mlm
        self.alpha_cos = alpha_cos
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.max_steps = max_steps
        self.temperature = temperature
        self.mask_prob = mask_prob
        self.word_limit = word_limit
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.teacher is None:
            raise ValueError("DistilledEncoder needs a teacher")
        teacher, vocab = _unwrap(self.teacher)
        vocab = self.vocab if self.vocab is not None else vocab
        if vocab is None:
            raise ValueError("a vocabulary is required when the teacher is a bare EncoderModel")
        seed = check_random_state_int(self.random_state)
        sentences = list(preprocess_corpus(check_sentences(X), self.word_limit))
        config = PretrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                                epochs=self.epochs, global_seed=seed, max_steps=self.max_steps,
                                mask_prob=self.mask_prob, temperature=self.temperature)
        weights = DistillWeights(self.alpha_kd, self.alpha_mlm, self.alpha_cos)
        self.vocab_ = vocab
        self.teacher_ = teacher
        self.student_ = init_student_from_teacher(teacher)
        data = batches(sentences, vocab, teacher.config.max_seq_len, self.batch_size)
        self.log_ = pretrain(self.student_, teacher, data, config, weights).log
        return self

    def transform(self, X):
        check_is_fitted(self, "student_")
        return _cls_features(self.student_, self.vocab_, check_sentences(X))


class _FineTunedClassifier(ClassifierMixin, BaseEstimator):
    _kind = TOKEN

    def __init__(self, encoder=None, vocab=None, epochs=4, batch_size=32, learning_rate=5e-5,
                 head_init_std=0.02, metric=None, random_state=0):
        self.encoder = encoder
        self.vocab = vocab
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.head_init_std = head_init_std
        self.metric = metric
        self.random_state = random_state

    def _setup(self, classes):
        model, vocab = _unwrap(self.encoder)
        vocab = self.vocab if self.vocab is not None else vocab
        if vocab is None:
            raise ValueError("a vocabulary is required when the encoder is a bare EncoderModel")
        self.vocab_ = vocab
        self.classes_ = np.asarray(classes)
        self.spec_ = TaskSpec(self._kind, len(classes), self.epochs, self.batch_size,
                              self.learning_rate, metric=self.metric,
                              head_init_std=self.head_init_std)
        seed = check_random_state_int(self.random_state)
        self.model_ = attach_head(model.copy(), self.spec_, seed=seed)
        return seed

    def score(self, X, y, sample_weight=None):
        """F1 under the task's scoring rule (token micro, span or weighted)."""
        data = self._dataset(X, y)
        return score(self.spec_, predict_ids(self.model_, data, self.vocab_), data)


class TokenClassifier(_FineTunedClassifier):
    """Per-token tagger; ``X`` is a list of token lists (or whitespace-joined strings)."""

    _kind = TOKEN

    def _dataset(self, X, y) -> LabeledDataset:
        seqs, labels = check_token_sequences(X, y)
        return LabeledDataset.from_token_pairs(zip(seqs, labels), list(self.classes_))

    def fit(self, X, y):
        seqs, labels = check_token_sequences(X, y)
        classes = sorted({t for seq in labels for t in seq})
        if len(classes) < 2:
            raise ValueError("need at least two distinct labels")
        seed = self._setup(classes)
        data = LabeledDataset.from_token_pairs(zip(seqs, labels), classes)
        self.finetune_wall_ = finetune(self.model_, data, self.spec_, self.vocab_, seed).wall
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        seqs = check_token_sequences(X)
        data = LabeledDataset(TOKEN, [(s, [0] * len(s)) for s in seqs], list(self.classes_))
        return [[self.classes_[i] for i in p] for p in predict_ids(self.model_, data, self.vocab_)]


class SequenceClassifier(_FineTunedClassifier):
    """Sentence classifier on the ``[CLS]`` state; scored by support-weighted F1."""

    _kind = SEQUENCE

    def __init__(self, encoder=None, vocab=None, epochs=14, batch_size=32, learning_rate=5e-5,
                 head_init_std=0.02, metric=None, random_state=0):
        super().__init__(encoder, vocab, epochs, batch_size, learning_rate, head_init_std,
                         metric, random_state)

    def _dataset(self, X, y) -> LabeledDataset:
        sentences = check_sentences(X)
        return LabeledDataset.from_text_pairs(zip(sentences, check_labels(y, len(sentences))),
                                              list(self.classes_))

    def fit(self, X, y):
        sentences = check_sentences(X)
        labels = check_labels(y, len(sentences))
        classes = sorted(set(labels))
        if len(classes) < 2:
            raise ValueError("need at least two distinct labels")
        seed = self._setup(classes)
        data = LabeledDataset.from_text_pairs(zip(sentences, labels), classes)
        self.finetune_wall_ = finetune(self.model_, data, self.spec_, self.vocab_, seed).wall
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        sentences = check_sentences(X)
        out = []
        with T.no_grad():
            for i in range(0, len(sentences), 64):
                b = make_batch(sentences[i:i + 64], self.vocab_,
                               self.model_.encoder.config.max_seq_len)
                out.append(self.model_.logits(b.token_ids, b.attention_mask).data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
