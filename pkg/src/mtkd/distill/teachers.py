"""Teacher ensembles: co-finetuning with shared pooling/prediction layers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..encoder import (AttentivePooler, Classifier, ClassifierHead, EncoderConfig, EncoderParams,
                       classify, encode)
from ..errors import ContractError
from ..numcore import ops
from ..numcore.optim import Adam
from ..numcore.rng import Rng
from ..numcore.tensor import Tape, Tensor


@dataclass
class TeacherBundle:
    """N teacher encoders with their poolers and heads.

    With ``shared=True`` every entry of ``poolers``/``heads`` is the same
    object, so gradients from all teachers land in one set of tensors.
    """

    encoders: list
    poolers: list
    heads: list

    @classmethod
    def init(cls, cfg: EncoderConfig, num_teachers: int, num_classes: int, rngs: Sequence[Rng],
             query_dim: int = 32, shared: bool = True, dtype=np.float32) -> "TeacherBundle":
        encoders = [EncoderParams.init(cfg, rngs[i], dtype) for i in range(num_teachers)]
        bundle = cls(encoders, [], [])
        bundle.reset_heads(num_classes, rngs[0] if shared else rngs, query_dim, shared, dtype)
        return bundle

    def reset_heads(self, num_classes: int, rng, query_dim: int = 32, shared: bool = True,
                    dtype=np.float32) -> None:
        """Attach fresh pooler/head pairs (one shared pair, or one per teacher)."""
        d = self.encoders[0].config.hidden_dim
        if shared:
            r = rng if isinstance(rng, Rng) else rng[0]
            pooler = AttentivePooler.init(d, query_dim, r, dtype)
            head = ClassifierHead.init(d, num_classes, r, dtype)
            self.poolers = [pooler] * len(self.encoders)
            self.heads = [head] * len(self.encoders)
        else:
            rngs = rng if not isinstance(rng, Rng) else [rng] * len(self.encoders)
            self.poolers = [AttentivePooler.init(d, query_dim, r, dtype) for r in rngs]
            self.heads = [ClassifierHead.init(d, num_classes, r, dtype) for r in rngs]

    def __len__(self) -> int:
        return len(self.encoders)

    @property
    def shared(self) -> bool:
        return all(p is self.poolers[0] for p in self.poolers) and all(h is self.heads[0] for h in self.heads)

    def classifier(self, i: int) -> Classifier:
        return Classifier(self.encoders[i], self.poolers[i], self.heads[i])

    def classifiers(self) -> list[Classifier]:
        return [self.classifier(i) for i in range(len(self))]

    def parameters(self) -> list[Tensor]:
        """Every trainable tensor exactly once (shared layers are not repeated)."""
        seen, out = set(), []
        for c in self.classifiers():
            for p in c.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, enc in enumerate(self.encoders):
            out.update(enc.named_tensors(f"teacher{i}.encoder."))
        if self.shared:
            out.update(self.poolers[0].named_tensors("shared.pooler."))
            out.update(self.heads[0].named_tensors("shared.head."))
        else:
            for i in range(len(self)):
                out.update(self.poolers[i].named_tensors(f"teacher{i}.pooler."))
                out.update(self.heads[i].named_tensors(f"teacher{i}.head."))
        return out

    def subset(self, indices: Sequence[int]) -> "TeacherBundle":
        """View on a subset of teachers (tensors are shared, not copied)."""
        return TeacherBundle([self.encoders[i] for i in indices], [self.poolers[i] for i in indices],
                             [self.heads[i] for i in indices])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.named_tensors().items():
            v.data[...] = snap[k]


def _drop_tokens(mask: np.ndarray, rate: float, rng: Optional[Rng]) -> np.ndarray:
    """Hide real tokens (never position 0) with probability ``rate``."""
    if rng is None or rate <= 0:
        return mask
    drop = rng.uniform(mask.shape) < rate
    drop[:, 0] = False
    return mask & ~drop


def finetune_step(model: Classifier, ids: np.ndarray, mask: np.ndarray, onehot: np.ndarray,
                  opt: Adam, rng: Optional[Rng] = None, token_drop: float = 0.0) -> float:
    """One supervised update of a single classifier; returns the batch loss."""
    opt.zero_grad()
    with Tape() as tape:
        _, logits, _ = model.forward(ids, _drop_tokens(mask, token_drop, rng), rng)
        loss = ops.mean(ops.softmax_cross_entropy(onehot.astype(logits.dtype), logits))
    tape.backward(loss)
    opt.step()
    return loss.item()


def cofinetune_step(bundle: TeacherBundle, ids: np.ndarray, mask: np.ndarray, onehots: Sequence[np.ndarray],
                    opt: Adam, rngs: Optional[Sequence[Optional[Rng]]] = None,
                    token_drop: Sequence[float] = ()) -> float:
    """Jointly update all teachers on ``sum_i CE(y_i, teacher_i(x))``.

    ``onehots[i]`` holds teacher i's view of the labels (normally all equal
    the gold labels). One backward pass covers every teacher, so the shared
    pooler/head accumulate gradient contributions from all of them.
    """
    if len(onehots) != len(bundle):
        raise ContractError(f"{len(onehots)} label views for {len(bundle)} teachers")
    rngs = list(rngs) if rngs is not None else [None] * len(bundle)
    drops = list(token_drop) or [0.0] * len(bundle)
    opt.zero_grad()
    with Tape() as tape:
        total = None
        for i, model in enumerate(bundle.classifiers()):
            m = _drop_tokens(mask, drops[i], rngs[i])
            _, logits, _ = model.forward(ids, m, rngs[i])
            term = ops.mean(ops.softmax_cross_entropy(onehots[i].astype(logits.dtype), logits))
            total = term if total is None else total + term
    tape.backward(total)
    opt.step()
    return total.item()


@dataclass
class TeacherOutputs:
    """Frozen teacher predictions for a row set: logits and selected hidden layers."""

    logits: list           # per teacher, (n, C)
    hidden: list           # per teacher, {layer: (n, L, d)}

    def rows(self, index: np.ndarray) -> "TeacherOutputs":
        return TeacherOutputs([z[index] for z in self.logits],
                              [{l: h[index] for l, h in hd.items()} for hd in self.hidden])

    def hidden_lists(self, depth: int) -> list[list]:
        """Per-teacher layer lists with ``None`` for layers that were not kept."""
        return [[hd.get(l) for l in range(depth + 1)] for hd in self.hidden]

    def subset(self, teachers: Sequence[int]) -> "TeacherOutputs":
        return TeacherOutputs([self.logits[i] for i in teachers], [self.hidden[i] for i in teachers])


def teacher_outputs(bundle: TeacherBundle, ids: np.ndarray, mask: np.ndarray, layers: Sequence[int],
                    batch_size: int = 256) -> TeacherOutputs:
    """Eval-mode forward of every teacher, keeping ``layers`` of hidden state."""
    all_logits, all_hidden = [], []
    for model in bundle.classifiers():
        logits, hidden = [], {l: [] for l in layers}
        for s in range(0, len(ids), batch_size):
            stack = encode(model.encoder, ids[s:s + batch_size], mask[s:s + batch_size])
            z, _ = classify(model.pool(stack), model.head)
            logits.append(z.data)
            for l in layers:
                hidden[l].append(stack.hidden[l].data)
        all_logits.append(np.concatenate(logits))
        all_hidden.append({l: np.concatenate(v) for l, v in hidden.items()})
    return TeacherOutputs(all_logits, all_hidden)

