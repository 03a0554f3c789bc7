"""Student construction, projection matrices and the distillation update."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..encoder import Classifier, EncoderParams, AttentivePooler, ClassifierHead, LayerParams
from ..errors import ContractError
from ..numcore.optim import Adam
from ..numcore.rng import Rng
from ..numcore.tensor import Tape, Tensor
from .losses import DistillSpec, mt_distill_loss, mt_hidden_loss, task_loss, total_loss
from .teachers import TeacherOutputs

PROJ_STD = 0.02


@dataclass
class ProjectionSet:
    """Learnable (d_teacher, d_student) maps, ``matrices[i][j-1]`` for teacher i, student layer j."""

    matrices: list

    @classmethod
    def init(cls, num_teachers: int, num_student_layers: int, d_teacher: int, d_student: int,
             scheme: str = "auto", rng: Optional[Rng] = None, dtype=np.float32) -> "ProjectionSet":
        if scheme == "auto":
            scheme = "identity" if d_teacher == d_student else "gaussian"
        if scheme == "identity" and d_teacher != d_student:
            raise ContractError("identity projections need equal teacher and student widths")
        if scheme == "gaussian" and rng is None:
            raise ContractError("gaussian projection init needs an rng")
        mats = []
        for _ in range(num_teachers):
            row = []
            for _ in range(num_student_layers):
                if scheme == "identity":
                    w = np.eye(d_teacher, d_student, dtype=dtype)
                else:
                    w = rng.normal((d_teacher, d_student), PROJ_STD, dtype)
                row.append(Tensor.wrap(w, requires_grad=True))
            mats.append(row)
        return cls(mats)

    def parameters(self) -> list[Tensor]:
        return [w for row in self.matrices for w in row]

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"proj.t{i}.l{j + 1}": w for i, row in enumerate(self.matrices) for j, w in enumerate(row)}

    def subset(self, teachers) -> "ProjectionSet":
        return ProjectionSet([self.matrices[i] for i in teachers])


def _copy_layer(layer: LayerParams) -> LayerParams:
    return LayerParams(**{k: Tensor.wrap(v.data.copy(), requires_grad=True) for k, v in layer.named().items()})


def init_student(teacher: EncoderParams, num_layers: int, scheme: str = "first",
                 ratio: Optional[int] = None) -> EncoderParams:
    """Copy embeddings and ``num_layers`` transformer layers out of ``teacher``.

    ``first`` takes layers 1..K, ``last`` the top K, ``skip`` every T-th
    layer (T*1, ..., T*K; ``ratio`` defaults to depth // K).
    """
    depth = len(teacher.layers)
    if not 1 <= num_layers <= depth:
        raise ContractError(f"cannot take {num_layers} layers from a {depth}-layer teacher")
    if scheme == "first":
        picks = list(range(num_layers))
    elif scheme == "last":
        picks = list(range(depth - num_layers, depth))
    elif scheme == "skip":
        t = ratio or depth // num_layers
        picks = [t * (j + 1) - 1 for j in range(num_layers)]
        if picks[-1] >= depth:
            raise ContractError(f"skip scheme with ratio {t} exceeds teacher depth {depth}")
    else:
        raise ContractError(f"unknown student init scheme {scheme!r}")
    cfg = replace(teacher.config, num_layers=num_layers)
    return EncoderParams(
        cfg,
        Tensor.wrap(teacher.tok_emb.data.copy(), requires_grad=True),
        Tensor.wrap(teacher.pos_emb.data.copy(), requires_grad=True),
        [_copy_layer(teacher.layers[i]) for i in picks],
    )


def build_student(teacher: EncoderParams, spec: DistillSpec, num_classes: int, rng: Rng,
                  query_dim: int = 32, dtype=np.float32) -> tuple[Classifier, ProjectionSet]:
    enc = init_student(teacher, spec.student_layers, spec.student_init, spec.layer_ratio)
    d = enc.config.hidden_dim
    pooler = AttentivePooler.init(d, query_dim, rng, dtype)
    head = ClassifierHead.init(d, num_classes, rng, dtype)
    proj = ProjectionSet.init(spec.num_teachers, spec.student_layers, d, d, spec.projection_init, rng, dtype)
    return Classifier(enc, pooler, head), proj


def student_parameters(student: Classifier, proj: ProjectionSet, spec: DistillSpec) -> list[Tensor]:
    """Tensors updated during distillation; projections only when the hidden loss is on."""
    params = student.parameters()
    if spec.use_hidden:
        params += proj.parameters()
    return params


def distill_losses(student: Classifier, proj: ProjectionSet, teachers: TeacherOutputs, ids: np.ndarray,
                   mask: np.ndarray, onehot: np.ndarray, spec: DistillSpec,
                   rng: Optional[Rng] = None) -> dict:
    """Forward pass producing the enabled loss components (and the total)."""
    if len(teachers.logits) != spec.num_teachers:
        raise ContractError(f"spec expects {spec.num_teachers} teachers, got {len(teachers.logits)}")
    stack, logits, _ = student.forward(ids, mask, rng)
    gold = onehot.astype(logits.dtype)
    comps = {}
    if spec.use_hidden:
        depth = spec.teacher_layers
        t_hidden = teachers.hidden_lists(depth)
        comps["hidden"] = mt_hidden_loss(stack.hidden, t_hidden, proj.matrices, stack.mask, spec.hidden_pairs())
    if spec.use_distill:
        comps["distill"] = mt_distill_loss(teachers.logits, logits, gold, spec.temperature, spec.weighting)
    if spec.use_task:
        comps["task"] = task_loss(gold, logits)
    comps["total"] = total_loss(spec, comps)
    return comps


def distill_step(student: Classifier, proj: ProjectionSet, teachers: TeacherOutputs, ids: np.ndarray,
                 mask: np.ndarray, onehot: np.ndarray, spec: DistillSpec, opt: Adam,
                 rng: Optional[Rng] = None) -> dict[str, float]:
    """One student update; teachers enter only through precomputed outputs."""
    opt.zero_grad()
    with Tape() as tape:
        comps = distill_losses(student, proj, teachers, ids, mask, onehot, spec, rng)
    tape.backward(comps["total"])
    opt.step()
    return {k: v.item() for k, v in comps.items()}
