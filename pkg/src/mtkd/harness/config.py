"""Run configuration: TOML loading, validation, hashing and seed derivation."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from ..distill.losses import DistillSpec
from ..encoder import EncoderConfig
from ..errors import ConfigError
from ..tasks import TaskSpec

OUT_DIR_ENV = "MTKD_OUT_DIR"


@dataclass
class OptimConfig:
    teacher_lr: float = 1e-3
    student_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    batch_size: int = 32
    pretrain_epochs: int = 8
    cofinetune_epochs: int = 20
    distill_epochs: int = 30
    patience: int = 5


@dataclass
class DiversityConfig:
    """How teachers are made to differ at desk scale."""

    shard_fraction: float = 0.7
    token_drop: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    noisy_teachers: list = field(default_factory=list)
    noise_rate: float = 0.3


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher: EncoderConfig = field(default_factory=lambda: EncoderConfig(num_layers=4))
    distill: DistillSpec = field(default_factory=DistillSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    repeats: int = 5
    master_seed: int = 0
    out_dir: str = "runs"
    query_dim: int = 32
    student_dropout: Optional[float] = None
    cofinetune: bool = True
    teacher_subset: list = field(default_factory=list)
    record_timing: bool = False
    variants: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.teacher.num_layers != self.distill.teacher_layers:
            raise ConfigError(
                f"teacher depth {self.teacher.num_layers} != layer_ratio * student_layers "
                f"= {self.distill.teacher_layers}")
        if self.teacher.max_seq_len < self.task.max_seq_len:
            raise ConfigError("encoder max_seq_len shorter than the task's sequences")
        if self.teacher.vocab_size < self.task.vocab_size:
            raise ConfigError("encoder vocab smaller than the task vocab")
        if not 0 < self.diversity.shard_fraction <= 1:
            raise ConfigError("shard_fraction must be in (0, 1]")
        for i in self.diversity.noisy_teachers:
            if not 0 <= i < self.distill.num_teachers:
                raise ConfigError(f"noisy teacher index {i} out of range")
        for i in self.teacher_subset:
            if not 0 <= i < self.distill.num_teachers:
                raise ConfigError(f"teacher_subset index {i} out of range")
        if len(set(self.teacher_subset)) != len(self.teacher_subset):
            raise ConfigError("teacher_subset has duplicates")
        if self.schedule.batch_size < 1 or self.schedule.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1")

    def student_encoder(self) -> EncoderConfig:
        drop = self.teacher.dropout if self.student_dropout is None else self.student_dropout
        return replace(self.teacher, num_layers=self.distill.student_layers, dropout=drop)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def run_seed(self, repeat: int) -> int:
        return self.master_seed + repeat


_SECTIONS = {
    "task": TaskSpec,
    "teacher": EncoderConfig,
    "distill": DistillSpec,
    "optim": OptimConfig,
    "schedule": ScheduleConfig,
    "diversity": DiversityConfig,
}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    run = data.pop("run", {})
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), name)
    if data:
        raise ConfigError(f"unknown sections: {', '.join(sorted(data))}")
    known_run = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    unknown = set(run) - known_run
    if unknown:
        raise ConfigError(f"[run] unknown keys: {', '.join(sorted(unknown))}")
    kwargs.update(run)
    return RunConfig(**kwargs)


def load_config(path: Optional[str] = None, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Read a TOML config; ``seed``/``out`` and ``$MTKD_OUT_DIR`` override it."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(data)
    if seed is not None:
        cfg.master_seed = int(seed)
    env_out = os.environ.get(OUT_DIR_ENV)
    if out is not None:
        cfg.out_dir = out
    elif env_out:
        cfg.out_dir = env_out
    return cfg


def config_to_toml(cfg: RunConfig) -> str:
    """Serialise ``cfg`` back to TOML (flat sections, no comments)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if v is None:
            raise ValueError
        return repr(v)

    lines = ["[run]"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v) or v is None:
            continue
        lines.append(f"{f.name} = {fmt(v)}")
    for name in _SECTIONS:
        lines.append(f"\n[{name}]")
        for k, v in asdict(getattr(cfg, name)).items():
            if v is not None:
                lines.append(f"{k} = {fmt(v)}")
    return "\n".join(lines) + "\n"


def derive_seed(seed: int, *tags) -> int:
    """Stable 64-bit seed for a named purpose within a run."""
    h = hashlib.sha256(("/".join([str(seed)] + [str(t) for t in tags])).encode()).digest()
    return int.from_bytes(h[:8], "little")
