"""Multi-teacher co-finetuning and distillation."""
from .losses import (
    DistillSpec,
    map_layer,
    mt_distill_loss,
    mt_hidden_loss,
    parse_weighting,
    task_loss,
    teacher_weight,
    total_loss,
)
from .student import (
    ProjectionSet,
    build_student,
    distill_losses,
    distill_step,
    init_student,
    student_parameters,
)
from .teachers import (
    TeacherBundle,
    TeacherOutputs,
    cofinetune_step,
    finetune_step,
    teacher_outputs,
)

__all__ = [
    "DistillSpec",
    "ProjectionSet",
    "TeacherBundle",
    "TeacherOutputs",
    "build_student",
    "cofinetune_step",
    "distill_losses",
    "distill_step",
    "finetune_step",
    "init_student",
    "map_layer",
    "mt_distill_loss",
    "mt_hidden_loss",
    "parse_weighting",
    "student_parameters",
    "task_loss",
    "teacher_outputs",
    "teacher_weight",
    "total_loss",
]
