"""BERT-style transformer encoder, teacher-to-student initialisation and checkpoints."""
from __future__ import annotations

import copy
import io
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DKCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt or of an unsupported version."""


class ConfigError(ValueError):
    """Model configuration violates a structural constraint."""


class TokenIdError(ValueError):
    """A token id lies outside the vocabulary."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 211
    hidden_size: int = 32
    num_layers: int = 4
    num_heads: int = 4
    intermediate_size: int = 128
    max_seq_len: int = 64
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        for name in ("vocab_size", "hidden_size", "num_layers", "num_heads",
                     "intermediate_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def student(self) -> ModelConfig:
        """Same width, half the depth."""
        if self.num_layers % 2:
            raise ConfigError(f"teacher num_layers must be even, got {self.num_layers}")
        return replace(self, num_layers=self.num_layers // 2)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            kw[key] = float(value) if types[key] in ("float", float) else int(value)
        return cls(**kw)


# Full-scale values; desk scale keeps half depth, equal width and heads | hidden.
FULL_TEACHER = ModelConfig(vocab_size=32102, hidden_size=768, num_layers=12, num_heads=12,
                            intermediate_size=3072, max_seq_len=512)
DESK_TEACHER = ModelConfig()


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class TransformerBlock:
    """Self-attention and feed-forward sublayers, each followed by residual + layer norm."""

    PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                   "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        h, f, s = config.hidden_size, config.intermediate_size, config.init_std
        self.config = config
        self.wq, self.bq = _param(rng, (h, h), s), _zeros(h)
        self.wk, self.bk = _param(rng, (h, h), s), _zeros(h)
        self.wv, self.bv = _param(rng, (h, h), s), _zeros(h)
        self.wo, self.bo = _param(rng, (h, h), s), _zeros(h)
        self.ln1_g, self.ln1_b = _ones(h), _zeros(h)
        self.w1, self.b1 = _param(rng, (h, f), s), _zeros(f)
        self.w2, self.b2 = _param(rng, (f, h), s), _zeros(h)
        self.ln2_g, self.ln2_b = _ones(h), _zeros(h)
        self.last_attention: np.ndarray | None = None

    def named_parameters(self):
        return [(n, getattr(self, n)) for n in self.PARAM_NAMES]

    def __call__(self, x: Tensor, key_mask: np.ndarray, rng=None) -> Tensor:
        cfg = self.config
        b, s, h = x.shape
        nh, d = cfg.num_heads, cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            return t.reshape(b, s, nh, d).transpose(0, 2, 1, 3)

        q = heads(x @ self.wq + self.bq)
        # q . bk is constant across keys, so softmax cancels it exactly; leaving bk out
        # keeps its (identically zero) gradient free of finite-difference roundoff
        k = heads(x @ self.wk)
        v = heads(x @ self.wv + self.bv)
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(d))
        scores = T.masked_fill(scores, key_mask[:, None, None, :], -np.inf)
        attn = T.softmax(scores)
        self.last_attention = attn.data
        attn = T.dropout(attn, cfg.dropout, rng)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, s, h)
        out = T.dropout(ctx @ self.wo + self.bo, cfg.dropout, rng)
        x = T.layer_norm(x + out, self.ln1_g, self.ln1_b, cfg.layer_norm_eps)
        ff = T.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2
        ff = T.dropout(ff, cfg.dropout, rng)
        return T.layer_norm(x + ff, self.ln2_g, self.ln2_b, cfg.layer_norm_eps)


class EncoderModel:
    """Token + position embeddings, a stack of transformer blocks and an MLM head.

    The MLM head is an untied ``hidden -> vocab`` projection with bias.
    ``blocks_executed`` counts block invocations across forward passes.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h, s = config.hidden_size, config.init_std
        self.token_embeddings = _param(rng, (config.vocab_size, h), s)
        self.position_embeddings = _param(rng, (config.max_seq_len, h), s)
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.num_layers)]
        self.mlm_weight = _param(rng, (h, config.vocab_size), s)
        self.mlm_bias = _zeros(config.vocab_size)
        self.blocks_executed = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("token_embeddings", self.token_embeddings),
               ("position_embeddings", self.position_embeddings)]
        for i, block in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", p) for n, p in block.named_parameters())
        out.extend([("mlm_head.weight", self.mlm_weight), ("mlm_head.bias", self.mlm_bias)])
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> EncoderModel:
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> EncoderModel:
        for p in self.parameters():
            p.requires_grad = True
        return self

    def copy(self) -> EncoderModel:
        return copy.deepcopy(self)

    def __deepcopy__(self, memo):
        new = object.__new__(type(self))
        new.config = self.config
        new.token_embeddings = Tensor(self.token_embeddings.data.copy(),
                                      self.token_embeddings.requires_grad)
        new.position_embeddings = Tensor(self.position_embeddings.data.copy(),
                                         self.position_embeddings.requires_grad)
        new.blocks = [_copy_block(b) for b in self.blocks]
        new.mlm_weight = Tensor(self.mlm_weight.data.copy(), self.mlm_weight.requires_grad)
        new.mlm_bias = Tensor(self.mlm_bias.data.copy(), self.mlm_bias.requires_grad)
        new.blocks_executed = 0
        return new

    def __call__(self, token_ids, attention_mask, rng=None) -> Tensor:
        return encoder_forward(self, token_ids, attention_mask, rng=rng)


def _copy_block(block: TransformerBlock) -> TransformerBlock:
    new = object.__new__(TransformerBlock)
    new.config = block.config
    new.last_attention = None
    for name, p in block.named_parameters():
        setattr(new, name, Tensor(p.data.copy(), p.requires_grad))
    return new


def encoder_forward(model: EncoderModel, token_ids, attention_mask, rng=None) -> Tensor:
    """Final-layer hidden states, shape ``batch x seq x hidden``.

    Keys with ``attention_mask == 0`` get ``-inf`` attention logits.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    mask = np.asarray(attention_mask).astype(bool)
    if ids.ndim == 1:
        ids, mask = ids[None, :], mask[None, :]
    cfg = model.config
    b, s = ids.shape
    if mask.shape != ids.shape:
        raise ValueError(f"attention_mask shape {mask.shape} != token_ids shape {ids.shape}")
    if s > cfg.max_seq_len:
        raise ValueError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    bad = np.argwhere((ids < 0) | (ids >= cfg.vocab_size))
    if len(bad):
        r, c = bad[0]
        raise TokenIdError(f"token id {ids[r, c]} at position ({r}, {c}) "
                           f"outside vocabulary of size {cfg.vocab_size}")
    pos = T.take_rows(model.position_embeddings, np.arange(s))
    x = T.embedding(model.token_embeddings, ids) + pos
    x = T.dropout(x, cfg.dropout, rng)
    for block in model.blocks:
        x = block(x, mask, rng)
        model.blocks_executed += 1
    return x


def mlm_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    """Unnormalised vocabulary scores for every position of ``hidden``."""
    return hidden @ model.mlm_weight + model.mlm_bias


def init_student_from_teacher(teacher: EncoderModel) -> EncoderModel:
    """Build a half-depth student that copies teacher blocks 0, 2, 4, ...

    Embeddings and the MLM head are copied verbatim. No array is shared
    with the teacher.
    """
    cfg = teacher.config.student()
    student = object.__new__(EncoderModel)
    student.config = cfg
    student.token_embeddings = Tensor(teacher.token_embeddings.data.copy(), True)
    student.position_embeddings = Tensor(teacher.position_embeddings.data.copy(), True)
    student.blocks = []
    for i in range(0, teacher.config.num_layers, 2):
        block = _copy_block(teacher.blocks[i])
        block.config = cfg
        for _, p in block.named_parameters():
            p.requires_grad = True
        student.blocks.append(block)
    student.mlm_weight = Tensor(teacher.mlm_weight.data.copy(), True)
    student.mlm_bias = Tensor(teacher.mlm_bias.data.copy(), True)
    student.blocks_executed = 0
    return student


def param_count(model) -> int:
    """Exact number of scalar parameters."""
    params = model.parameters() if hasattr(model, "parameters") else model
    return int(sum(p.size for p in params))


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   magic (8 bytes) | version u32 | config_len u32 | config text (utf-8)
#   n_params u32 | per param: name_len u16, name, ndim u8, dims u32*ndim, float64 LE data
#   crc32 u32 over everything before it

def checkpoint_bytes(model: EncoderModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    named = model.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: EncoderModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> EncoderModel:
    raw = Path(path).read_bytes()
    return checkpoint_from_bytes(raw)


def checkpoint_from_bytes(raw: bytes) -> EncoderModel:
    if len(raw) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError("checkpoint truncated: header incomplete")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    r = _Reader(body, len(CHECKPOINT_MAGIC))
    version, cfg_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint corrupt or truncated: checksum mismatch")
    config = ModelConfig.from_text(r.take(cfg_len).decode("utf-8"))
    model = EncoderModel(config, seed=0)
    expected = dict(model.named_parameters())
    (n,) = r.unpack("<I")
    if n != len(expected):
        raise CheckpointError(f"checkpoint has {n} parameters, config implies {len(expected)}")
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name not in expected or expected[name].shape != tuple(shape):
            raise CheckpointError(f"unexpected parameter {name} with shape {tuple(shape)}")
        expected[name].data = data.copy()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameters")
    return model


class _Reader:
    def __init__(self, raw: bytes, pos: int):
        self.raw, self.pos = raw, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
