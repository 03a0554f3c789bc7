"""Training phases: teacher pretraining, co-finetuning, separate finetuning and distillation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..distill.losses import DistillSpec
from ..distill.student import ProjectionSet, distill_step, student_parameters
from ..distill.teachers import TeacherBundle, TeacherOutputs, cofinetune_step, finetune_step
from ..encoder import Classifier
from ..errors import DivergenceError, NumericError
from ..numcore.optim import Adam
from ..numcore.rng import Rng
from ..tasks import Dataset, MetricsReport, Splits, flip_labels, make_batches
from .config import RunConfig, derive_seed

PROB_FLOOR = 1e-12


@dataclass
class EpochLog:
    epoch: int
    split: str
    accuracy: float = math.nan
    macro_f1: float = math.nan
    loss_task: float = math.nan
    loss_hid: float = math.nan
    loss_dis: float = math.nan


@dataclass
class PhaseResult:
    logs: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    epochs_run: int = 0


def _finite(value: float, phase: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(phase, f"non-finite loss {value}")
    return value


def evaluate(model: Classifier, data: Dataset, epoch: int = 0, split: str = "dev") -> EpochLog:
    """Accuracy, macro-F1 and mean gold-label cross-entropy on ``data``."""
    ids, mask = data.padded()
    preds, probs = model.predict(ids, mask)
    rep = MetricsReport.from_predictions(preds, data.labels, data.num_classes)
    gold_p = probs[np.arange(len(data)), data.labels].astype(np.float64)
    ce = float(-np.log(np.maximum(gold_p, PROB_FLOOR)).mean())
    return EpochLog(epoch, split, rep.accuracy, rep.macro_f1, loss_task=ce)


def fit(epochs: int, patience: int, run_epoch: Callable[[int], dict], score: Callable[[int], float],
        snapshot: Callable[[], object], restore: Callable[[object], None], phase: str = "train") -> PhaseResult:
    """Generic loop with best-score selection and early stopping.

    ``run_epoch(e)`` trains one epoch; ``score(e)`` evaluates afterwards
    (higher is better). The best state is restored before returning.
    Non-finite values met anywhere inside raise :class:`DivergenceError`
    tagged with ``phase``.
    """
    res = PhaseResult()
    best_state, stale = None, 0
    for epoch in range(1, epochs + 1):
        try:
            run_epoch(epoch)
            s = score(epoch)
        except NumericError as exc:
            raise DivergenceError(phase, f"epoch {epoch}: {exc}") from exc
        if math.isnan(s):
            raise DivergenceError(phase, f"epoch {epoch}: NaN selection score")
        res.epochs_run = epoch
        if s > res.best_score:
            res.best_score, res.best_epoch, best_state, stale = s, epoch, snapshot(), 0
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        restore(best_state)
    return res


def _snap(tensors: dict) -> dict:
    return {k: v.data.copy() for k, v in tensors.items()}


def _restore(tensors: dict, snap: dict) -> None:
    for k, v in tensors.items():
        v.data[...] = snap[k]


def label_views(cfg: RunConfig, train: Dataset, seed: int, noisy: Sequence[int]) -> list[np.ndarray]:
    """Per-teacher training labels; teachers listed in ``noisy`` see flipped labels."""
    views = []
    for i in range(cfg.distill.num_teachers):
        if i in noisy:
            rng = Rng(derive_seed(seed, "noise", i))
            views.append(flip_labels(train.labels, cfg.diversity.noise_rate, train.num_classes, rng))
        else:
            views.append(train.labels)
    return views


def _token_drop(cfg: RunConfig, i: int) -> float:
    rates = cfg.diversity.token_drop or [0.0]
    return float(rates[i % len(rates)])


def _finetune_one(model: Classifier, train: Dataset, dev: Dataset, cfg: RunConfig, seed: int,
                  phase: str, epochs: int, drop: float) -> PhaseResult:
    opt = Adam([(model.parameters(), cfg.optim.teacher_lr)], cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    rng = Rng(derive_seed(seed, phase, "dropout"))
    named = model.named_tensors()
    logs = []

    def run_epoch(e):
        for b in make_batches(train, cfg.schedule.batch_size, derive_seed(seed, phase, "shuffle", e)):
            _finite(finetune_step(model, b.ids, b.mask, b.onehot, opt, rng, drop), phase)

    def score(e):
        log = evaluate(model, dev, e)
        logs.append(log)
        return log.accuracy

    res = fit(epochs, cfg.schedule.patience, run_epoch, score, lambda: _snap(named),
              lambda s: _restore(named, s), phase)
    res.logs = logs
    return res


def pretrain_teachers(cfg: RunConfig, splits: Splits, seed: int, noisy: Sequence[int] = ()) -> tuple:
    """Phase 1: each teacher trains alone on a random shard with private pooler/head.

    Teachers differ in initialisation, shard, token-dropout rate and,
    for indices in ``noisy``, label noise. Returns (bundle, [PhaseResult]).
    """
    n, C = cfg.distill.num_teachers, splits.spec.num_classes
    rngs = [Rng(derive_seed(seed, "teacher-init", i)) for i in range(n)]
    bundle = TeacherBundle.init(cfg.teacher, n, C, rngs, cfg.query_dim, shared=False)
    views = label_views(cfg, splits.train, seed, noisy)
    results = []
    size = max(1, int(round(cfg.diversity.shard_fraction * len(splits.train))))
    for i in range(n):
        shard = np.sort(Rng(derive_seed(seed, "shard", i)).permutation(len(splits.train))[:size])
        data = splits.train.with_labels(views[i]).subset(shard)
        results.append(_finetune_one(bundle.classifier(i), data, splits.dev, cfg, seed, f"pretrain{i}",
                                     cfg.schedule.pretrain_epochs, _token_drop(cfg, i)))
    return bundle, results


def cofinetune(bundle: TeacherBundle, cfg: RunConfig, splits: Splits, seed: int,
               noisy: Sequence[int] = ()) -> PhaseResult:
    """Phase 2: all teachers train jointly through one fresh shared pooler/head.

    Selection uses the mean dev accuracy across teachers; ``logs`` holds one
    dev entry per teacher per epoch (``split`` = ``dev:t<i>``).
    """
    n, C = len(bundle), splits.spec.num_classes
    bundle.reset_heads(C, Rng(derive_seed(seed, "cofinetune-heads")), cfg.query_dim, shared=True)
    opt = Adam([(bundle.parameters(), cfg.optim.teacher_lr)], cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    views = label_views(cfg, splits.train, seed, noisy)
    eye = np.eye(C)
    rngs = [Rng(derive_seed(seed, "cofinetune-dropout", i)) for i in range(n)]
    drops = [_token_drop(cfg, i) for i in range(n)]
    named = bundle.named_tensors()
    logs = []

    def run_epoch(e):
        for b in make_batches(splits.train, cfg.schedule.batch_size, derive_seed(seed, "cofinetune", e)):
            onehots = [eye[v[b.index]] for v in views]
            _finite(cofinetune_step(bundle, b.ids, b.mask, onehots, opt, rngs, drops), "cofinetune")

    def score(e):
        accs = []
        for i, model in enumerate(bundle.classifiers()):
            log = evaluate(model, splits.dev, e, f"dev:t{i}")
            logs.append(log)
            accs.append(log.accuracy)
        return float(np.mean(accs))

    res = fit(cfg.schedule.cofinetune_epochs, cfg.schedule.patience, run_epoch, score,
              lambda: _snap(named), lambda s: _restore(named, s), "cofinetune")
    res.logs = logs
    return res


def finetune_separately(bundle: TeacherBundle, cfg: RunConfig, splits: Splits, seed: int,
                        noisy: Sequence[int] = ()) -> list[PhaseResult]:
    """Phase 2 without sharing: fresh private pooler/head per teacher, trained one by one."""
    n, C = len(bundle), splits.spec.num_classes
    bundle.reset_heads(C, [Rng(derive_seed(seed, "separate-heads", i)) for i in range(n)],
                       cfg.query_dim, shared=False)
    views = label_views(cfg, splits.train, seed, noisy)
    return [_finetune_one(bundle.classifier(i), splits.train.with_labels(views[i]), splits.dev, cfg, seed,
                          f"separate{i}", cfg.schedule.cofinetune_epochs, _token_drop(cfg, i))
            for i in range(n)]


def distill(student: Classifier, proj: ProjectionSet, spec: DistillSpec, outputs: TeacherOutputs,
            cfg: RunConfig, splits: Splits, seed: int) -> PhaseResult:
    """Train the student against frozen teacher outputs for the train rows.

    Every epoch logs mean train losses plus dev and test metrics; the
    parameters of the best-dev epoch are restored at the end.
    """
    opt = Adam([(student_parameters(student, proj, spec), cfg.optim.student_lr)],
               cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    rng = Rng(derive_seed(seed, "distill-dropout"))
    named = {**student.named_tensors(), **proj.named_tensors()}
    logs = []

    def run_epoch(e):
        sums, rows = {}, 0
        for b in make_batches(splits.train, cfg.schedule.batch_size, derive_seed(seed, "distill", e)):
            comps = distill_step(student, proj, outputs.rows(b.index), b.ids, b.mask, b.onehot, spec, opt, rng)
            _finite(comps["total"], "distill")
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v * len(b)
            rows += len(b)
        logs.append(EpochLog(e, "train", loss_task=sums.get("task", math.nan) / rows,
                             loss_hid=sums.get("hidden", math.nan) / rows,
                             loss_dis=sums.get("distill", math.nan) / rows))

    def score(e):
        dev = evaluate(student, splits.dev, e, "dev")
        logs.append(dev)
        logs.append(evaluate(student, splits.test, e, "test"))
        return dev.accuracy

    res = fit(cfg.schedule.distill_epochs, cfg.schedule.patience, run_epoch, score,
              lambda: _snap(named), lambda s: _restore(named, s), "distill")
    res.logs = logs
    return res
