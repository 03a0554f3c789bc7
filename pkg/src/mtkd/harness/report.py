"""Report emission: per-epoch CSV, mean/std markdown table and figures."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pipeline import RunRecord

CSV_COLUMNS = ("run_id", "variant", "seed", "epoch", "split", "accuracy", "macro_f1",
               "loss_task", "loss_hid", "loss_dis", "wall_clock_s")

PLOT_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (0 for a single value)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    m = float(x.mean())
    if x.size == 1:
        return m, 0.0
    return m, float(np.sqrt(((x - m) ** 2).sum() / (x.size - 1)))


def records_csv(records: Sequence[RunRecord], include_timing: bool = False) -> str:
    """One row per (record, epoch, split); failed runs get a single marker row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        clock = rec.wall_clock_s if include_timing else None
        if rec.status != "ok":
            w.writerow([rec.run_id, rec.variant, rec.seed, 0, f"failed:{rec.failed_phase}",
                        "", "", "", "", "", _fmt(clock)])
            continue
        for log in rec.logs:
            w.writerow([rec.run_id, rec.variant, rec.seed, log["epoch"], log["split"],
                        *(_fmt(log[k]) for k in ("accuracy", "macro_f1", "loss_task", "loss_hid", "loss_dis")),
                        _fmt(clock)])
    return buf.getvalue()


def summarize(records: Sequence[RunRecord]) -> list[dict]:
    """Per-variant mean/std of best-dev test metrics, in first-seen variant order."""
    order, groups = [], {}
    for rec in records:
        if rec.variant not in groups:
            order.append(rec.variant)
            groups[rec.variant] = []
        groups[rec.variant].append(rec)
    rows = []
    for name in order:
        ok = [r for r in groups[name] if r.status == "ok"]
        acc = mean_std([r.test_accuracy for r in ok])
        f1 = mean_std([r.test_macro_f1 for r in ok])
        tdev = [np.mean(r.teacher_dev) for r in ok if r.teacher_dev]
        rows.append({
            "variant": name, "runs": len(groups[name]), "failed": len(groups[name]) - len(ok),
            "acc_mean": acc[0], "acc_std": acc[1], "f1_mean": f1[0], "f1_std": f1[1],
            "teacher_dev_mean": float(np.mean(tdev)) if tdev else math.nan,
            "seeds": [r.seed for r in groups[name]],
        })
    return rows


def summary_markdown(rows: Sequence[dict]) -> str:
    lines = ["| variant | runs | test accuracy (%) | test macro-F1 (%) | teacher dev acc (%) |",
             "|---|---:|---:|---:|---:|"]
    for r in rows:
        runs = f"{r['runs']}" + (f" ({r['failed']} failed)" if r["failed"] else "")
        lines.append(f"| {r['variant']} | {runs} | {100 * r['acc_mean']:.2f} ± {100 * r['acc_std']:.2f} | "
                     f"{100 * r['f1_mean']:.2f} ± {100 * r['f1_std']:.2f} | {100 * r['teacher_dev_mean']:.2f} |")
    return "\n".join(lines) + "\n"


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "runs", "failed", "acc_mean", "acc_std", "f1_mean", "f1_std", "teacher_dev_mean"])
    for r in rows:
        w.writerow([r["variant"], r["runs"], r["failed"]] +
                   [_fmt(float(r[k])) for k in ("acc_mean", "acc_std", "f1_mean", "f1_std", "teacher_dev_mean")])
    return buf.getvalue()


def _curve(records: Sequence[RunRecord], split: str, key: str) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``key`` per epoch across records (epochs that some runs skipped average fewer values)."""
    by_epoch: dict = {}
    for rec in records:
        for log in rec.split_logs(split):
            v = log[key]
            if v is not None and not math.isnan(v):
                by_epoch.setdefault(log["epoch"], []).append(v)
    ep = np.array(sorted(by_epoch))
    return ep, np.array([np.mean(by_epoch[e]) for e in ep])


def render_figures(records: Sequence[RunRecord], rows: Sequence[dict], out_dir: Path) -> list[Path]:
    """Variant bar chart, dev learning curves and train loss curves as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    with plt.rc_context(PLOT_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(rows) + 1.5), 3.0))
        x = np.arange(len(rows))
        ax.bar(x, [100 * r["acc_mean"] for r in rows], yerr=[100 * r["acc_std"] for r in rows],
               color="0.6", edgecolor="0.2", capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels([r["variant"] for r in rows], rotation=45, ha="right")
        ax.set_ylabel("test accuracy (%)")
        lo = min((100 * (r["acc_mean"] - r["acc_std"]) for r in rows if not math.isnan(r["acc_mean"])), default=0)
        ax.set_ylim(max(0.0, lo - 5), 100)
        fig.tight_layout()
        paths.append(out_dir / "variant_accuracy.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)

        variants = [r["variant"] for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.0))
        # the default cycle repeats after 10 colours
        cmap = plt.get_cmap("tab10" if len(variants) <= 10 else "tab20")
        for k, name in enumerate(variants):
            group = [rec for rec in records if rec.variant == name and rec.status == "ok"]
            color = cmap(k % cmap.N)
            ep, acc = _curve(group, "dev", "accuracy")
            axes[0].plot(ep, 100 * acc, lw=1, color=color, label=name)
            ep, loss = _curve(group, "train", "loss_task")
            axes[1].plot(ep, loss, lw=1, color=color, label=name)
        axes[0].set_xlabel("epoch")
        axes[0].set_ylabel("dev accuracy (%)")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("train task loss")
        axes[1].set_yscale("log")
        axes[1].legend(ncol=2, frameon=False)
        fig.tight_layout()
        paths.append(out_dir / "learning_curves.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    return paths


def emit_report(records: Sequence[RunRecord], out_dir, include_timing: bool = False,
                figures: bool = True) -> dict[str, Path]:
    """Write ``runs.csv``, ``summary.csv``, ``summary.md`` and (optionally) PNG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summarize(records)
    files = {
        "runs_csv": out_dir / "runs.csv",
        "summary_csv": out_dir / "summary.csv",
        "summary_md": out_dir / "summary.md",
    }
    files["runs_csv"].write_text(records_csv(records, include_timing))
    files["summary_csv"].write_text(summary_csv(rows))
    files["summary_md"].write_text(summary_markdown(rows))
    if figures and records:
        for p in render_figures(records, rows, out_dir):
            files[p.stem] = p
    return files


def save_records(records: Sequence[RunRecord], directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        p = d / f"{rec.run_id}.json"
        p.write_text(rec.to_json() + "\n")
        paths.append(p)
    return paths


def load_records(directory, order: Optional[Sequence[str]] = None) -> list[RunRecord]:
    """Read record JSON files, sorted by seed then by ``order`` of variants (else name)."""
    recs = [RunRecord.from_dict(json.loads(p.read_text())) for p in sorted(Path(directory).glob("*.json"))]
    rank = {v: i for i, v in enumerate(order or [])}
    return sorted(recs, key=lambda r: (r.seed, rank.get(r.variant, len(rank)), r.variant))
