"""Layer mapping and the three student objectives (hidden, distillation, task)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from ..numcore import ops
from ..numcore.tensor import Tensor

WEIGHTING_MODES = ("loss-weighted", "uniform", "ensemble-average")


@dataclass
class DistillSpec:
    num_teachers: int = 3
    student_layers: int = 2          # K
    layer_ratio: int = 2             # T; teachers have T * K layers
    temperature: float = 1.0
    use_hidden: bool = True
    use_distill: bool = True
    use_task: bool = True
    weighting: str = "loss-weighted"  # or uniform, ensemble-average, single:<i>
    projection_init: str = "auto"     # auto (identity when widths match), identity, gaussian
    # "student": sum over the K student layers; "literal": j = 1..T as typeset.
    hidden_bound: str = "student"
    student_init: str = "first"       # first, last, skip
    student_init_teacher: int = 0

    def __post_init__(self):
        if self.num_teachers < 1 or self.student_layers < 1 or self.layer_ratio < 1:
            raise ConfigError("num_teachers, student_layers and layer_ratio must all be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        parse_weighting(self.weighting, self.num_teachers)
        if self.projection_init not in ("auto", "identity", "gaussian"):
            raise ConfigError(f"unknown projection_init {self.projection_init!r}")
        if self.hidden_bound not in ("student", "literal"):
            raise ConfigError(f"unknown hidden_bound {self.hidden_bound!r}")
        if self.student_init not in ("first", "last", "skip"):
            raise ConfigError(f"unknown student_init {self.student_init!r}")
        if not 0 <= self.student_init_teacher < self.num_teachers:
            raise ConfigError("student_init_teacher out of range")

    @property
    def teacher_layers(self) -> int:
        return self.layer_ratio * self.student_layers

    def hidden_pairs(self) -> list[tuple[int, int]]:
        """(student layer j, teacher layer T*j) pairs covered by the hidden loss."""
        k, t = self.student_layers, self.layer_ratio
        if self.hidden_bound == "student":
            return [(j, map_layer(j, t, k)) for j in range(1, k + 1)]
        pairs = []
        for j in range(1, t + 1):
            if j > k:
                raise ContractError(f"literal bound: student layer {j} does not exist (K={k})")
            pairs.append((j, map_layer(j, t, k)))
        return pairs

    def to_dict(self) -> dict:
        return asdict(self)


def parse_weighting(mode: str, num_teachers: int) -> tuple[str, Optional[int]]:
    if mode in WEIGHTING_MODES:
        return mode, None
    if mode.startswith("single:"):
        try:
            i = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad weighting mode {mode!r}") from None
        if not 0 <= i < num_teachers:
            raise ConfigError(f"{mode!r}: teacher index out of range for {num_teachers} teachers")
        return "single", i
    raise ConfigError(f"unknown weighting mode {mode!r}")


def map_layer(j: int, ratio: int, num_student_layers: int) -> int:
    """Teacher layer supervising student layer ``j`` (both 1-based)."""
    if not 1 <= j <= num_student_layers:
        raise ContractError(f"student layer {j} outside 1..{num_student_layers}")
    if ratio < 1:
        raise ContractError("layer ratio must be >= 1")
    return ratio * j


def _const(x) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor.wrap(arr)


def mt_hidden_loss(student_hidden: Sequence[Tensor], teacher_hidden: Sequence, projections,
                   mask: np.ndarray, pairs: Sequence[tuple[int, int]]) -> Tensor:
    """Sum over teachers i and (j, T*j) pairs of masked MSE(H^s_j, H^i_{Tj} W_ij).

    ``student_hidden[j]`` / ``teacher_hidden[i][l]`` index layer outputs with
    0 the embedding layer; teacher entries may be arrays or tensors and are
    treated as constants. ``projections[i][j-1]`` is the (d_t, d_s) matrix.
    """
    mask = np.asarray(mask, dtype=bool)
    total = None
    for i, t_hidden in enumerate(teacher_hidden):
        for j, tl in pairs:
            if j >= len(student_hidden):
                raise ContractError(f"student has no layer {j}")
            if tl >= len(t_hidden) or t_hidden[tl] is None:
                raise ContractError(f"teacher {i} has no layer {tl}")
            h_s = student_hidden[j]
            projected = ops.linear(_const(t_hidden[tl]), projections[i][j - 1])
            if projected.shape != h_s.shape:
                raise DimensionError(f"projected teacher {projected.shape} vs student {h_s.shape}")
            term = ops.masked_mse(h_s, projected, mask)
            total = term if total is None else total + term
    if total is None:
        raise ContractError("hidden loss over an empty teacher/layer set")
    return total


def teacher_weight(gold, teacher_probs) -> np.ndarray:
    """``1 / (1 + CE(gold, teacher_probs))`` per row; values in (0, 1]."""
    gold = np.asarray(gold, dtype=np.float64)
    probs = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs,
                       dtype=np.float64)
    ce = ops.cross_entropy(gold, Tensor.wrap(probs)).data
    return 1.0 / (1.0 + ce)


def _probs(logits, t: float) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return ops.softmax(Tensor.wrap(z), t).data


def mt_distill_loss(teacher_logits: Sequence, student_logits: Tensor, gold,
                    t: float = 1.0, mode: str = "loss-weighted") -> Tensor:
    """Multi-teacher soft-label loss, averaged over the batch.

    Teacher probabilities come from ``softmax(z_i / t)`` and are constants.
    In loss-weighted mode each teacher's per-example term is scaled by
    :func:`teacher_weight` of its untempered prediction (no gradient through
    the weight).
    """
    if len(teacher_logits) == 0:
        raise ContractError("distillation needs at least one teacher")
    kind, which = parse_weighting(mode, len(teacher_logits))
    gold = np.asarray(gold)
    dtype = student_logits.dtype
    if kind == "ensemble-average":
        target = np.mean([_probs(z, t) for z in teacher_logits], axis=0).astype(dtype)
        return ops.mean(ops.softmax_cross_entropy(target, student_logits, t))
    chosen = [which] if kind == "single" else range(len(teacher_logits))
    total = None
    for i in chosen:
        term = ops.softmax_cross_entropy(_probs(teacher_logits[i], t), student_logits, t)
        if kind == "loss-weighted":
            w = teacher_weight(gold, _probs(teacher_logits[i], 1.0)).astype(dtype)
            term = ops.mul(term, Tensor.wrap(w))
        total = term if total is None else total + term
    return ops.mean(total)


def task_loss(gold, student_logits: Tensor) -> Tensor:
    """Batch-mean cross-entropy of gold labels against the student's softmax."""
    gold = np.asarray(gold).astype(student_logits.dtype)
    return ops.mean(ops.softmax_cross_entropy(gold, student_logits))


def total_loss(spec: DistillSpec, components: dict) -> Tensor:
    """Unweighted sum of the enabled terms (``hidden``, ``distill``, ``task``)."""
    enabled = [name for name, on in (("hidden", spec.use_hidden), ("distill", spec.use_distill),
                                      ("task", spec.use_task)) if on]
    if not enabled:
        raise ContractError("all loss terms are disabled")
    total = None
    for name in enabled:
        term = components.get(name)
        if term is None:
            raise ContractError(f"enabled loss term {name!r} was not computed")
        if not isinstance(term, Tensor):
            term = Tensor.wrap(np.asarray(term, dtype=np.float64))
        total = term if total is None else total + term
    return total
