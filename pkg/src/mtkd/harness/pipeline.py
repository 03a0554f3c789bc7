"""End-to-end runs: data, teachers, co-finetuning, distillation, ablation variants."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..distill.student import build_student
from ..distill.teachers import TeacherBundle, TeacherOutputs, teacher_outputs
from ..errors import ConfigError, DivergenceError
from ..numcore.rng import Rng
from ..tasks import Splits, gen_synthetic
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, derive_seed
from .train import EpochLog, cofinetune, distill, finetune_separately, pretrain_teachers

BASE_VARIANTS = ("full", "no-cofinetune", "uniform", "ensemble-average", "no-hidden", "no-distill", "no-task")


# ---------------------------------------------------------------- variants


def teacher_combinations(n: int) -> list[tuple[int, ...]]:
    """All non-empty teacher subsets, singles first (2**n - 1 of them)."""
    return [c for k in range(1, n + 1) for c in combinations(range(n), k)]


def combo_name(combo: Sequence[int], n: int) -> str:
    if len(combo) == n:
        return "full"
    if len(combo) == 1:
        return f"single:{combo[0]}"
    return "combo:" + "+".join(str(i) for i in combo)


def standard_variants(n: int) -> list[str]:
    """Every variant the ablation runner knows, in report order."""
    names = list(BASE_VARIANTS)
    names += [combo_name(c, n) for c in teacher_combinations(n) if len(c) < n]
    names += ["noisy-teacher", "noisy-teacher-uniform"]
    return names


def apply_variant(cfg: RunConfig, name: str) -> RunConfig:
    """Return the RunConfig a variant runs with (``cfg`` is not modified)."""
    n = cfg.distill.num_teachers
    d = cfg.distill
    if name == "full":
        return cfg
    if name == "no-cofinetune":
        return replace(cfg, cofinetune=False)
    if name in ("uniform", "ensemble-average"):
        return replace(cfg, distill=replace(d, weighting=name))
    if name in ("no-hidden", "no-distill", "no-task"):
        key = {"no-hidden": "use_hidden", "no-distill": "use_distill", "no-task": "use_task"}[name]
        return replace(cfg, distill=replace(d, **{key: False}))
    if name.startswith("single:") or name.startswith("combo:"):
        try:
            picks = [int(x) for x in name.split(":", 1)[1].split("+")]
        except ValueError:
            raise ConfigError(f"bad variant {name!r}") from None
        if any(not 0 <= i < n for i in picks) or len(set(picks)) != len(picks):
            raise ConfigError(f"variant {name!r}: teacher index out of range for {n} teachers")
        # a lone teacher is ordinary single-teacher distillation (weight 1)
        weighting = "single:0" if len(picks) == 1 else d.weighting
        return replace(cfg, teacher_subset=sorted(picks), distill=replace(d, weighting=weighting))
    if name in ("noisy-teacher", "noisy-teacher-uniform"):
        div = replace(cfg.diversity, noisy_teachers=[n - 1])
        w = "uniform" if name.endswith("uniform") else d.weighting
        return replace(cfg, diversity=div, distill=replace(d, weighting=w))
    raise ConfigError(f"unknown variant {name!r}")


# ---------------------------------------------------------------- records


@dataclass
class RunRecord:
    run_id: str
    variant: str
    seed: int
    config_hash: str
    dataset_fingerprint: str = ""
    init_fingerprint: str = ""
    logs: list = field(default_factory=list)       # EpochLog dicts
    best_epoch: int = 0
    test_accuracy: float = float("nan")
    test_macro_f1: float = float("nan")
    teacher_dev: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    status: str = "ok"
    failed_phase: str = ""
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def split_logs(self, split: str) -> list[dict]:
        return [l for l in self.logs if l["split"] == split]


def make_run_id(variant: str, seed: int, config_hash: str) -> str:
    return f"{variant}-s{seed}-{config_hash[:8]}"


def _fingerprint(tensors: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tensors[k].data).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- per-seed caches


def _teacher_key(cfg: RunConfig) -> str:
    parts = {
        "task": asdict(cfg.task), "teacher": asdict(cfg.teacher), "n": cfg.distill.num_teachers,
        "lr": cfg.optim.teacher_lr, "betas": [cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps],
        "sched": [cfg.schedule.batch_size, cfg.schedule.pretrain_epochs, cfg.schedule.cofinetune_epochs,
                  cfg.schedule.patience],
        "div": asdict(cfg.diversity), "q": cfg.query_dim, "co": cfg.cofinetune,
    }
    return json.dumps(parts, sort_keys=True)


@dataclass
class TeacherSet:
    bundle: TeacherBundle
    dev_accuracy: list
    outputs: TeacherOutputs


class SeedContext:
    """Data and teacher sets for one run seed, shared by all variants.

    Teachers are frozen after phase 2, so their train-set logits and
    hidden layers are computed once per teacher set and reused. With a
    ``store`` directory, phase results are also checkpointed there and
    reloaded instead of retrained.
    """

    def __init__(self, seed: int, log: Optional[Callable[[str], None]] = None, store: Optional[Path] = None):
        self.seed = seed
        self.log = log or (lambda msg: None)
        self.store = Path(store) if store is not None else None
        self._splits: dict = {}
        self._pre: dict = {}
        self._sets: dict = {}

    def _path(self, kind: str, key: str) -> Optional[Path]:
        if self.store is None:
            return None
        tag = hashlib.sha256(key.encode()).hexdigest()[:12]
        return self.store / f"seed{self.seed}" / f"{kind}-{tag}.ckpt"

    def splits(self, cfg: RunConfig) -> Splits:
        spec = replace(cfg.task, seed=derive_seed(self.seed, "data"))
        key = json.dumps(asdict(spec), sort_keys=True)
        if key not in self._splits:
            self._splits[key] = gen_synthetic(spec)
        return self._splits[key]

    def pretrained(self, cfg: RunConfig, train: bool = True) -> dict:
        """Phase-1 teacher tensors (private heads)."""
        key = _teacher_key(replace(cfg, cofinetune=True))
        if key not in self._pre:
            path = self._path("pretrained", key)
            if path is not None and path.exists():
                self._pre[key] = load_checkpoint(path)
            elif not train:
                raise PhaseMissing(f"no pretrained teachers for seed {self.seed}; run train-teachers first")
            else:
                t0 = time.perf_counter()
                bundle, _ = pretrain_teachers(cfg, self.splits(cfg), self.seed, cfg.diversity.noisy_teachers)
                self._pre[key] = bundle.snapshot()
                if path is not None:
                    save_checkpoint(path, self._pre[key])
                self.log(f"  seed {self.seed}: teachers pretrained ({time.perf_counter() - t0:.1f}s)")
        return self._pre[key]

    def teachers(self, cfg: RunConfig, train: bool = True) -> TeacherSet:
        """Phase-2 teachers (shared head when co-finetuned) and their cached outputs."""
        key = _teacher_key(cfg)
        if key in self._sets:
            return self._sets[key]
        splits = self.splits(cfg)
        n, C = cfg.distill.num_teachers, splits.spec.num_classes
        path = self._path("teachers", key)
        if path is not None and path.exists():
            tensors = load_checkpoint(path)
            bundle = TeacherBundle.init(cfg.teacher, n, C, [Rng(0)] * n, cfg.query_dim,
                                        shared="shared.head.m" in tensors)
            bundle.restore(tensors)
            dev = json.loads(path.with_suffix(".json").read_text())["dev_accuracy"]
        elif not train:
            raise PhaseMissing(f"no finetuned teachers for seed {self.seed}; run cofinetune first")
        else:
            bundle = TeacherBundle.init(cfg.teacher, n, C, [Rng(0)] * n, cfg.query_dim, shared=False)
            bundle.restore(self.pretrained(cfg, train))
            t0 = time.perf_counter()
            noisy = cfg.diversity.noisy_teachers
            if cfg.cofinetune:
                res = cofinetune(bundle, cfg, splits, self.seed, noisy)
                dev = [l.accuracy for l in res.logs if l.epoch == res.best_epoch]
            else:
                dev = [r.best_score for r in finetune_separately(bundle, cfg, splits, self.seed, noisy)]
            self.log(f"  seed {self.seed}: teachers ready ({'co' if cfg.cofinetune else 'separate'}, "
                     f"noisy={list(noisy)}, dev={[round(a, 3) for a in dev]}, {time.perf_counter() - t0:.1f}s)")
            if path is not None:
                save_checkpoint(path, bundle.snapshot())
                path.with_suffix(".json").write_text(json.dumps({"dev_accuracy": dev}) + "\n")
        ids, mask = splits.train.padded()
        outputs = teacher_outputs(bundle, ids, mask, list(range(cfg.teacher.num_layers + 1)))
        self._sets[key] = TeacherSet(bundle, dev, outputs)
        return self._sets[key]


class PhaseMissing(RuntimeError):
    """A CLI phase was asked for before the phase it depends on ran."""


# ---------------------------------------------------------------- runs


def run_variant(cfg: RunConfig, variant: str, seed: int, ctx: Optional[SeedContext] = None,
                out_dir: Optional[Path] = None) -> RunRecord:
    """One (variant, seed) run. Divergence marks the record failed instead of raising."""
    vcfg = apply_variant(cfg, variant)
    chash = vcfg.config_hash()
    rec = RunRecord(make_run_id(variant, seed, chash), variant, seed, chash)
    ctx = ctx or SeedContext(seed)
    t0 = time.perf_counter()
    phase = "data"
    try:
        splits = ctx.splits(vcfg)
        rec.dataset_fingerprint = splits.fingerprint()
        phase = "teachers"
        tset = ctx.teachers(vcfg)
        subset = list(vcfg.teacher_subset) or list(range(vcfg.distill.num_teachers))
        spec = replace(vcfg.distill, num_teachers=len(subset), student_init_teacher=0)
        outputs = tset.outputs.subset(subset)
        rec.teacher_dev = [tset.dev_accuracy[i] for i in subset]
        phase = "distill"
        init_teacher = tset.bundle.encoders[vcfg.distill.student_init_teacher]
        student, proj = build_student(init_teacher, spec, splits.spec.num_classes,
                                      Rng(derive_seed(seed, "student")), vcfg.query_dim)
        student.encoder.config = vcfg.student_encoder()
        rec.init_fingerprint = _fingerprint(student.named_tensors())
        res = distill(student, proj, spec, outputs, vcfg, splits, seed)
        rec.logs = [asdict(l) for l in res.logs]
        rec.best_epoch = res.best_epoch
        best_test = [l for l in res.logs if l.split == "test" and l.epoch == res.best_epoch][0]
        rec.test_accuracy, rec.test_macro_f1 = best_test.accuracy, best_test.macro_f1
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoints" / f"{rec.run_id}.ckpt",
                            {**student.named_tensors(), **proj.named_tensors()})
    except DivergenceError as exc:
        rec.status, rec.failed_phase, rec.message = "failed", exc.phase or phase, str(exc)
    rec.wall_clock_s = time.perf_counter() - t0
    return rec


def run_ablations(cfg: RunConfig, variants: Optional[Sequence[str]] = None,
                  log: Optional[Callable[[str], None]] = None, out_dir: Optional[Path] = None) -> list[RunRecord]:
    """Run every variant for every repeat under shared seeds.

    Records come back in deterministic (seed, variant) order.
    """
    names = list(variants or cfg.variants or standard_variants(cfg.distill.num_teachers))
    for name in names:
        apply_variant(cfg, name)  # fail fast on unknown names
    log = log or (lambda msg: None)
    records = []
    for r in range(cfg.repeats):
        seed = cfg.run_seed(r)
        ctx = SeedContext(seed, log)
        for name in names:
            rec = run_variant(cfg, name, seed, ctx, out_dir)
            log(f"  {rec.run_id}: {rec.status} test_acc={rec.test_accuracy:.4f} "
                f"best_epoch={rec.best_epoch} ({rec.wall_clock_s:.1f}s)")
            records.append(rec)
    return records


def run_pipeline(cfg: RunConfig, log: Optional[Callable[[str], None]] = None,
                 out_dir: Optional[Path] = None) -> list[RunRecord]:
    """The full method only, one record per repeat."""
    return run_ablations(cfg, ["full"], log, out_dir)
