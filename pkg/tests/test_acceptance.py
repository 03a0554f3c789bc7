"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

Criteria 5-7 are directional claims measured on a 5-seed TOPIC18 sweep. When
one of them does not hold the test reports FAIL and is marked xfail with the
measured numbers; it is never turned into a pass.
"""
import copy
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mtkd.distill.losses import map_layer, mt_distill_loss, teacher_weight
from mtkd.distill.teachers import TeacherBundle, cofinetune_step, finetune_step
from mtkd.encoder import Classifier, EncoderConfig
from mtkd.harness.checkpoint import load_checkpoint, save_checkpoint
from mtkd.harness.config import RunConfig, config_from_dict, load_config
from mtkd.harness.gradsuite import run_gradsuite
from mtkd.harness.pipeline import SeedContext, run_ablations
from mtkd.harness.report import records_csv, summarize
from mtkd.numcore import ops
from mtkd.numcore.optim import Adam
from mtkd.numcore.rng import Rng
from mtkd.numcore.tensor import Tensor
from mtkd.tasks import TaskSpec, gen_synthetic, MetricsReport


def report(crit: str, ok: bool, detail: str, directional: bool = False) -> None:
    line = f"{crit} {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append((crit, ok, detail))
    if not ok and directional:
        pytest.xfail(f"{crit} not reproduced: {detail} (analysis in the decision ledger)")
    assert ok, line


# ---------------------------------------------------------------- C1


def test_c1_gradient_suite():
    t0 = time.perf_counter()
    results = run_gradsuite(h=1e-4, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    ok = all(r.passed(1e-5) for r in results) and elapsed < 120 and "full_objective" in names
    report("C1", ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e} <= 1e-5, "
                     f"{elapsed:.1f}s < 120s")


# ---------------------------------------------------------------- C2


def test_c2_weighting_law():
    w_correct = teacher_weight([[0, 0, 1]], [[0.0, 0.0, 1.0]])[0]
    p = math.exp(-1)
    w_half = teacher_weight([[1, 0]], [[p, 1 - p]])[0]
    ce = np.linspace(0.0, 5.0, 100)
    gold_p = np.exp(-ce)
    sweep = teacher_weight(np.tile([1.0, 0.0], (100, 1)), np.stack([gold_p, 1 - gold_p], 1))
    monotone = bool(np.all(np.diff(sweep) < 0))
    ok = w_correct == 1.0 and abs(w_half - 0.5) <= 1e-9 and monotone
    report("C2", ok, f"w(correct)={float(w_correct)}, |w(e^-1)-0.5|={abs(w_half - 0.5):.1e}, "
                     f"strictly decreasing over 100 CE points: {monotone}")


# ---------------------------------------------------------------- C3


def test_c3_reduction_identities():
    cfg = EncoderConfig(vocab_size=20, max_seq_len=6, hidden_dim=8, num_heads=2, ffn_dim=12, num_layers=2)
    ids = np.array([[1, 5, 7, 9, 2, 0], [1, 3, 3, 0, 0, 0], [1, 11, 4, 6, 8, 2]])
    gold = np.eye(3)[[0, 2, 1]]
    bundle = TeacherBundle.init(cfg, 1, 3, [Rng(0)], query_dim=4, shared=True, dtype=np.float64)
    single = copy.deepcopy(bundle).classifier(0)
    cofinetune_step(bundle, ids, ids != 0, [gold], Adam([(bundle.parameters(), 1e-3)]))
    finetune_step(single, ids, ids != 0, gold, Adam([(single.parameters(), 1e-3)]))
    grads_equal = all(np.array_equal(a.grad, b.grad)
                      for a, b in zip(bundle.classifier(0).parameters(), single.parameters()))

    rng = Rng(1)
    zt, zs = rng.normal((5, 4), 1.0, np.float64), rng.normal((5, 4), 1.0, np.float64)
    g4 = np.eye(4)[[0, 1, 2, 3, 0]]
    tempered = mt_distill_loss([zt], Tensor(zs), g4, 1.0, "uniform").item()
    untempered = ops.mean(ops.softmax_cross_entropy(ops.softmax(Tensor(zt)).data, Tensor(zs))).item()
    t1_equal = tempered == untempered

    ens = mt_distill_loss([zt] * 3, Tensor(zs), g4, 2.0, "ensemble-average").item()
    one = mt_distill_loss([zt], Tensor(zs), g4, 2.0, "single:0").item()
    ens_gap = abs(ens - one)
    ok = grads_equal and t1_equal and ens_gap <= 1e-12
    report("C3", ok, f"N=1 co-finetune grads bitwise={grads_equal}, t=1 bitwise={t1_equal}, "
                     f"|ensemble(3 identical)-single|={ens_gap:.1e}")


# ---------------------------------------------------------------- C4


@pytest.mark.slow
def test_c4_cofinetuned_teachers_on_sent2():
    cfg = RunConfig(task=TaskSpec(kind="SENT2", n_train=2000), repeats=1)
    ctx = SeedContext(0)
    t0 = time.perf_counter()
    tset = ctx.teachers(cfg)
    elapsed = time.perf_counter() - t0
    devs = [round(a, 4) for a in tset.dev_accuracy]
    ok = tset.bundle.shared and all(a >= 0.97 for a in devs) and elapsed < 300 \
        and cfg.schedule.cofinetune_epochs <= 20
    report("C4", ok, f"dev accuracy {devs} >= 0.97 within {cfg.schedule.cofinetune_epochs} epochs, "
                     f"{elapsed:.0f}s < 300s")


# ---------------------------------------------------------------- C5-C7


# Accuracies are multiples of 1/400; this only absorbs float rounding of exact ties.
TIE = 1e-9


@pytest.fixture(scope="module")
def topic18_summary():
    cfg = load_config("configs/topic18.toml")
    assert cfg.repeats == 5
    t0 = time.perf_counter()
    records = run_ablations(cfg, cfg.variants, log=print)
    elapsed = time.perf_counter() - t0
    assert all(r.status == "ok" for r in records), [r.run_id for r in records if r.status != "ok"]
    rows = {r["variant"]: r for r in summarize(records)}
    assert all(rows[v]["runs"] == 5 for v in cfg.variants)
    print(f"TOPIC18 sweep: {len(records)} runs in {elapsed:.0f}s")
    for v, r in rows.items():
        print(f"  {v:24s} {100 * r['acc_mean']:.2f} +- {100 * r['acc_std']:.2f}")
    return {v: 100 * r["acc_mean"] for v, r in rows.items()}


@pytest.mark.slow
def test_c5_multi_teacher_gain(topic18_summary):
    acc = topic18_summary
    best_single = max(acc[f"single:{i}"] for i in range(3))
    worst_gap = min(acc["full"] - acc[p] for p in ("combo:0+1", "combo:0+2", "combo:1+2"))
    ok = acc["full"] >= best_single - TIE and worst_gap >= -0.5 - TIE
    report("C5", ok, f"full {acc['full']:.2f} vs best single {best_single:.2f}; "
                     f"min(full - pair) = {worst_gap:+.2f} pt (>= -0.5)", directional=True)


@pytest.mark.slow
def test_c6_loss_weighting_benefit(topic18_summary):
    acc = topic18_summary
    gain = acc["noisy-teacher"] - acc["noisy-teacher-uniform"]
    report("C6", gain >= 1.0 - TIE, f"noisy-teacher weighted {acc['noisy-teacher']:.2f} vs uniform "
                              f"{acc['noisy-teacher-uniform']:.2f}: {gain:+.2f} pt (>= +1.0)", directional=True)


@pytest.mark.slow
def test_c7_ablation_directions(topic18_summary):
    acc = topic18_summary
    gaps = {v: acc[v] - acc["full"] for v in ("no-cofinetune", "no-distill", "no-task")}
    ok = all(g <= 0.5 + TIE for g in gaps.values())
    detail = ", ".join(f"{v} {g:+.2f}" for v, g in gaps.items())
    report("C7", ok, f"ablation - full (pt, each <= +0.5): {detail}", directional=True)


# ---------------------------------------------------------------- C8


def test_c8_layer_mapping_grid():
    failures = []
    for t in range(1, 4):
        for k in range(1, 7):
            mapped = [map_layer(j, t, k) for j in range(1, k + 1)]
            if mapped != [t * j for j in range(1, k + 1)] or mapped[-1] != t * k:
                failures.append((t, k))
    report("C8", not failures, f"18 (T,K) pairs, top-to-top aligned; failures: {failures or 'none'}")


# ---------------------------------------------------------------- C9


TINY = {
    "run": {"repeats": 1, "query_dim": 4},
    "task": {"kind": "TOPIC18", "n_train": 72, "n_dev": 24, "n_test": 24},
    "teacher": {"hidden_dim": 8, "ffn_dim": 8, "num_heads": 2, "num_layers": 2},
    "distill": {"num_teachers": 2, "student_layers": 1, "layer_ratio": 2},
    "schedule": {"batch_size": 24, "pretrain_epochs": 1, "cofinetune_epochs": 2, "distill_epochs": 2,
                 "patience": 1},
    "diversity": {"token_drop": [0.0, 0.1]},
}


def test_c9_engineering(tmp_path):
    # checkpoint round trip
    model = Classifier.init(EncoderConfig(max_seq_len=24), 18, Rng(3), query_dim=8)
    back = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", model.named_tensors()))
    bitwise = all(back[k].tobytes() == v.data.tobytes() for k, v in model.named_tensors().items())

    # identical config + seed -> identical report CSV
    cfg = config_from_dict(TINY)
    csv_a = records_csv(run_ablations(cfg, ["full", "no-hidden"]))
    csv_b = records_csv(run_ablations(cfg, ["full", "no-hidden"]))
    same_csv = csv_a == csv_b and csv_a.count("\n") > 1

    # padding perturbation: extra pad width and junk in masked slots change no metric
    data = gen_synthetic(TaskSpec(kind="TOPIC18", n_train=10, n_dev=10, n_test=200, seed=4)).test
    ids, mask = data.padded(16)
    wide, wmask = data.padded(24)
    junk = wide.copy()
    junk[~wmask] = 3 + Rng(5).integers(90, (int((~wmask).sum()),))
    metrics = []
    for x, m in ((ids, mask), (wide, wmask), (junk, wmask)):
        preds, probs = model.predict(x, m)
        rep = MetricsReport.from_predictions(preds, data.labels, 18)
        metrics.append((rep.accuracy, rep.macro_f1, preds.tobytes()))
    pad_neutral = metrics[0] == metrics[1] == metrics[2]
    ok = bitwise and same_csv and pad_neutral
    report("C9", ok, f"checkpoint bitwise={bitwise}, rerun CSV byte-identical={same_csv}, "
                     f"padding-perturbation metrics unchanged={pad_neutral}")
