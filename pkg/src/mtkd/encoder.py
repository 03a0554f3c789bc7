"""Small BERT-style encoder, attentive pooler and classifier head.

Shapes: token ids and masks are ``(B, L)``; hidden states are ``(B, L, d)``.
Token id 0 is padding and id 1 the leading classification token.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError
from .numcore import ops
from .numcore.rng import Rng
from .numcore.tensor import Tensor

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    vocab_size: int = 100
    max_seq_len: int = 16
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    num_layers: int = 2
    dropout: float = 0.2
    activation: str = "gelu"  # or "relu"
    truncate: bool = True
    # Only post-LN (original BERT ordering) is implemented.
    norm_order: str = "post"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.max_seq_len < 1 or self.vocab_size < 3:
            raise ConfigError("max_seq_len must be >= 1 and vocab_size >= 3")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm_order != "post":
            raise ConfigError("only post-layer-norm encoders are supported")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _normal(rng: Rng, shape, dtype) -> Tensor:
    return Tensor.wrap(rng.normal(shape, INIT_STD, dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor.wrap(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor.wrap(np.ones(shape, dtype=dtype), requires_grad=True)


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: Rng, dtype) -> "LayerParams":
        d, f = cfg.hidden_dim, cfg.ffn_dim
        return cls(
            wq=_normal(rng, (d, d), dtype), bq=_zeros(d, dtype),
            wk=_normal(rng, (d, d), dtype), bk=_zeros(d, dtype),
            wv=_normal(rng, (d, d), dtype), bv=_zeros(d, dtype),
            wo=_normal(rng, (d, d), dtype), bo=_zeros(d, dtype),
            ln1_g=_ones(d, dtype), ln1_b=_zeros(d, dtype),
            w1=_normal(rng, (d, f), dtype), b1=_zeros(f, dtype),
            w2=_normal(rng, (f, d), dtype), b2=_zeros(d, dtype),
            ln2_g=_ones(d, dtype), ln2_b=_zeros(d, dtype),
        )

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class EncoderParams:
    config: EncoderConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: Rng, dtype=np.float32) -> "EncoderParams":
        tok = _normal(rng, (cfg.vocab_size, cfg.hidden_dim), dtype)
        pos = _normal(rng, (cfg.max_seq_len, cfg.hidden_dim), dtype)
        layers = [LayerParams.init(cfg, rng, dtype) for _ in range(cfg.num_layers)]
        return cls(cfg, tok, pos, layers)

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}tok_emb": self.tok_emb, f"{prefix}pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named().items():
                out[f"{prefix}layer{i}.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def load_named(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.named_tensors(prefix).items():
            if name not in tensors:
                raise InputError(f"missing tensor {name!r}")
            arr = np.asarray(tensors[name])
            if arr.shape != t.shape:
                raise InputError(f"tensor {name!r} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.dtype).copy()


@dataclass
class AttentivePooler:
    """Additive attention pooling: ``score_i = u . tanh(h_i W + b)``."""

    w: Tensor
    b: Tensor
    u: Tensor

    @classmethod
    def init(cls, d: int, q: int, rng: Rng, dtype=np.float32) -> "AttentivePooler":
        return cls(_normal(rng, (d, q), dtype), _zeros(q, dtype), _normal(rng, (q,), dtype))

    def named_tensors(self, prefix: str = "pooler.") -> dict[str, Tensor]:
        return {f"{prefix}w": self.w, f"{prefix}b": self.b, f"{prefix}u": self.u}

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b, self.u]


@dataclass
class ClassifierHead:
    m: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.m.shape[1] < 2:
            raise ConfigError("a classifier head needs at least 2 classes")

    @classmethod
    def init(cls, d: int, num_classes: int, rng: Rng, dtype=np.float32) -> "ClassifierHead":
        return cls(_normal(rng, (d, num_classes), dtype), _zeros(num_classes, dtype))

    @property
    def num_classes(self) -> int:
        return self.m.shape[1]

    def named_tensors(self, prefix: str = "head.") -> dict[str, Tensor]:
        return {f"{prefix}m": self.m, f"{prefix}bias": self.bias}

    def parameters(self) -> list[Tensor]:
        return [self.m, self.bias]


@dataclass
class LayerStack:
    """Hidden states of every layer; ``hidden[0]`` is the embedding output."""

    hidden: list
    mask: np.ndarray
    attention: list = field(default_factory=list)

    @property
    def top(self) -> Tensor:
        return self.hidden[-1]

    @property
    def num_layers(self) -> int:
        return len(self.hidden) - 1


def prepare_input(ids: np.ndarray, mask: Optional[np.ndarray], cfg: EncoderConfig):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if mask is None:
        mask = ids != PAD_ID
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if ids.shape != mask.shape:
        raise InputError(f"ids {ids.shape} and mask {mask.shape} differ")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    if ids.shape[1] > cfg.max_seq_len:
        if not cfg.truncate:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
        ids, mask = ids[:, : cfg.max_seq_len], mask[:, : cfg.max_seq_len]
    if not mask.any(axis=1).all():
        raise InputError("every sequence needs at least one unmasked position")
    return ids, mask


def _maybe_dropout(x: Tensor, rate: float, rng: Optional[Rng]) -> Tensor:
    if rng is None or rate == 0:
        return x
    return ops.dropout(x, rng.uniform(x.shape) >= rate, rate)


def encode(params: EncoderParams, ids, mask=None, rng: Optional[Rng] = None,
           keep_attention: bool = False) -> LayerStack:
    """Run the encoder; dropout is active only when ``rng`` is given."""
    cfg = params.config
    ids, mask = prepare_input(ids, mask, cfg)
    bsz, seq = ids.shape
    h = cfg.num_heads
    x = ops.embedding(params.tok_emb, ids) + ops.getitem(params.pos_emb, slice(0, seq))
    x = _maybe_dropout(x, cfg.dropout, rng)
    hidden = [x]
    attn_maps = []
    for lp in params.layers:
        a = ops.self_attention(x, lp.wq, lp.bq, lp.wk, lp.bk, lp.wv, lp.bv, lp.wo, lp.bo,
                               mask, h, attn_maps if keep_attention else None)
        a = _maybe_dropout(a, cfg.dropout, rng)
        x = ops.layer_norm(x + a, lp.ln1_g, lp.ln1_b)
        f = ops.feed_forward(x, lp.w1, lp.b1, lp.w2, lp.b2, cfg.activation)
        f = _maybe_dropout(f, cfg.dropout, rng)
        x = ops.layer_norm(x + f, lp.ln2_g, lp.ln2_b)
        hidden.append(x)
    return LayerStack(hidden, mask, attn_maps)


def attentive_pool(h_top: Tensor, mask: np.ndarray, pooler: AttentivePooler,
                   return_weights: bool = False):
    """Attention-weighted sum of unmasked rows of ``h_top`` (B, L, d) -> (B, d)."""
    mask = np.asarray(mask, dtype=bool)
    if h_top.ndim == 2:
        return _squeeze_pool(h_top, mask, pooler, return_weights)
    if not mask.any(axis=-1).all():
        raise InputError("attentive_pool: every sequence needs an unmasked position")
    bsz, seq, d = h_top.shape
    proj = ops.tanh(ops.linear(h_top, pooler.w, pooler.b))
    scores = ops.linear(proj, pooler.u.reshape(-1, 1)).reshape(bsz, seq)
    alpha = ops.softmax(scores, mask=mask)
    pooled = ops.matmul(alpha.reshape(bsz, 1, seq), h_top).reshape(bsz, d)
    return (pooled, alpha) if return_weights else pooled


def _squeeze_pool(h, mask, pooler, return_weights):
    if mask.ndim == 1:
        mask = mask[None, :]
    res = attentive_pool(h.reshape(1, *h.shape), mask, pooler, return_weights)
    if return_weights:
        pooled, alpha = res
        return pooled.reshape(-1), alpha.reshape(-1)
    return res.reshape(-1)


def pool_mode_baselines(h_top: Tensor, mask: np.ndarray, mode: str) -> Tensor:
    """Average, max or first-token pooling over unmasked rows."""
    mask = np.asarray(mask, dtype=bool)
    squeeze = h_top.ndim == 2
    if squeeze:
        h_top, mask = h_top.reshape(1, *h_top.shape), mask.reshape(1, -1)
    if not mask.any(axis=-1).all():
        raise InputError("pooling: every sequence needs an unmasked position")
    bsz, seq, d = h_top.shape
    if mode == "average":
        w = (mask / mask.sum(axis=1, keepdims=True)).astype(h_top.dtype)
        out = ops.matmul(Tensor.wrap(w.reshape(bsz, 1, seq)), h_top).reshape(bsz, d)
    elif mode == "max":
        # Masked rows are pushed to -inf and can never win the max.
        shifted = np.where(mask[..., None], h_top.data, -np.inf)
        arg = shifted.argmax(axis=1)  # (B, d)
        out = ops.getitem(h_top, (np.arange(bsz)[:, None], arg, np.arange(d)[None, :]))
    elif mode == "cls":
        out = ops.getitem(h_top, (slice(None), 0))
    else:
        raise ConfigError(f"unknown pooling mode {mode!r}")
    return out.reshape(-1) if squeeze else out


def classify(pooled: Tensor, head: ClassifierHead, t: float = 1.0) -> tuple[Tensor, Tensor]:
    """Logits ``pooled @ M + bias`` and their tempered softmax."""
    logits = ops.linear(pooled, head.m, head.bias)
    return logits, ops.softmax(logits, t)


@dataclass
class Classifier:
    """Encoder plus pooler and head; teachers may share the last two."""

    encoder: EncoderParams
    pooler: AttentivePooler
    head: ClassifierHead
    pooling: str = "attentive"

    @classmethod
    def init(cls, cfg: EncoderConfig, num_classes: int, rng: Rng, query_dim: int = 32,
             dtype=np.float32) -> "Classifier":
        enc = EncoderParams.init(cfg, rng, dtype)
        pooler = AttentivePooler.init(cfg.hidden_dim, query_dim, rng, dtype)
        head = ClassifierHead.init(cfg.hidden_dim, num_classes, rng, dtype)
        return cls(enc, pooler, head)

    def pool(self, stack: LayerStack) -> Tensor:
        if self.pooling == "attentive":
            return attentive_pool(stack.top, stack.mask, self.pooler)
        return pool_mode_baselines(stack.top, stack.mask, self.pooling)

    def forward(self, ids, mask=None, rng: Optional[Rng] = None, t: float = 1.0):
        """Returns ``(stack, logits, probs)``."""
        stack = encode(self.encoder, ids, mask, rng)
        logits, probs = classify(self.pool(stack), self.head, t)
        return stack, logits, probs

    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters()
        if self.pooling == "attentive":
            params += self.pooler.parameters()
        return params + self.head.parameters()

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.encoder.named_tensors(prefix + "encoder.")
        out.update(self.pooler.named_tensors(prefix + "pooler."))
        out.update(self.head.named_tensors(prefix + "head."))
        return out

    def load_named(self, tensors: dict, prefix: str = "") -> None:
        self.encoder.load_named(tensors, prefix + "encoder.")
        for name, t in {**self.pooler.named_tensors(prefix + "pooler."),
                        **self.head.named_tensors(prefix + "head.")}.items():
            if name not in tensors:
                raise InputError(f"missing tensor {name!r}")
            t.data = np.asarray(tensors[name]).astype(t.dtype).copy()

    def predict(self, ids, mask=None, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode class predictions and probabilities."""
        ids = np.asarray(ids)
        mask = ids != PAD_ID if mask is None else np.asarray(mask)
        probs = []
        for s in range(0, len(ids), batch_size):
            _, _, p = self.forward(ids[s:s + batch_size], mask[s:s + batch_size])
            probs.append(p.data)
        p = np.concatenate(probs) if probs else np.zeros((0, self.head.num_classes))
        return p.argmax(axis=1), p
