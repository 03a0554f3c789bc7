"""Command-line entry point: ``mtkd <command> [--config F] [--seed S] [--out D] [--variant V]``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..encoder import Classifier
from ..errors import ConfigError, DivergenceError, IntegrityError
from ..numcore.rng import Rng
from ..tasks import save_splits
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .pipeline import PhaseMissing, SeedContext, apply_variant, make_run_id, run_ablations, run_variant, standard_variants
from .report import emit_report, load_records, save_records
from .train import evaluate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("mtkd")


def _variants(args, cfg: RunConfig) -> list[str]:
    if args.variant:
        names = [v for item in args.variant for v in item.split(",") if v]
    else:
        names = list(cfg.variants) or standard_variants(cfg.distill.num_teachers)
    for name in names:
        apply_variant(cfg, name)
    return names


def _contexts(cfg: RunConfig, out: Path):
    for r in range(cfg.repeats):
        yield SeedContext(cfg.run_seed(r), log.info, out / "teachers")


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    for ctx in _contexts(cfg, out):
        splits = ctx.splits(cfg)
        d = save_splits(splits, out / "data" / f"seed{ctx.seed}")
        log.info("seed %d: %s (%s)", ctx.seed, d, splits.fingerprint())
    return EXIT_OK


def _teacher_variants(args, cfg):
    """Distinct teacher configurations needed by the selected variants."""
    seen, out = set(), []
    for name in (_variants(args, cfg) if args.variant else ["full"]):
        vcfg = apply_variant(cfg, name)
        key = (vcfg.cofinetune, tuple(vcfg.diversity.noisy_teachers))
        if key not in seen:
            seen.add(key)
            out.append(vcfg)
    return out


def cmd_train_teachers(cfg: RunConfig, out: Path, args) -> int:
    for ctx in _contexts(cfg, out):
        for vcfg in _teacher_variants(args, cfg):
            ctx.pretrained(vcfg)
    return EXIT_OK


def cmd_cofinetune(cfg: RunConfig, out: Path, args) -> int:
    for ctx in _contexts(cfg, out):
        for vcfg in _teacher_variants(args, cfg):
            ts = ctx.teachers(vcfg)
            log.info("seed %d: teacher dev accuracy %s", ctx.seed, [round(a, 4) for a in ts.dev_accuracy])
    return EXIT_OK


def _run(cfg: RunConfig, out: Path, names, train_teachers: bool) -> int:
    records = []
    for ctx in _contexts(cfg, out):
        for name in names:
            if not train_teachers:
                ctx.teachers(apply_variant(cfg, name), train=False)
            rec = run_variant(cfg, name, ctx.seed, ctx, out)
            log.info("%s: %s test_acc=%.4f best_epoch=%d", rec.run_id, rec.status, rec.test_accuracy,
                     rec.best_epoch)
            records.append(rec)
    save_records(records, out / "records")
    files = emit_report(load_records(out / "records", standard_variants(cfg.distill.num_teachers)),
                        out / "report", include_timing=cfg.record_timing)
    log.info("report: %s", files["summary_md"])
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        log.error("%s diverged in phase %s: %s", r.run_id, r.failed_phase, r.message)
    return EXIT_DIVERGED if failed else EXIT_OK


def cmd_distill(cfg: RunConfig, out: Path, args) -> int:
    names = _variants(args, cfg) if args.variant else ["full"]
    return _run(cfg, out, names, train_teachers=False)


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    return _run(cfg, out, _variants(args, cfg), train_teachers=True)


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    names = _variants(args, cfg) if args.variant else ["full"]
    for ctx in _contexts(cfg, out):
        for name in names:
            vcfg = apply_variant(cfg, name)
            run_id = make_run_id(name, ctx.seed, vcfg.config_hash())
            path = out / "checkpoints" / f"{run_id}.ckpt"
            if not path.exists():
                raise PhaseMissing(f"no student checkpoint {path}; run distill first")
            splits = ctx.splits(vcfg)
            model = Classifier.init(vcfg.student_encoder(), splits.spec.num_classes, Rng(0), vcfg.query_dim)
            model.load_named(load_checkpoint(path))
            for split in ("dev", "test"):
                m = evaluate(model, getattr(splits, split), 0, split)
                print(f"{run_id}\t{split}\taccuracy={m.accuracy:.4f}\tmacro_f1={m.macro_f1:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    from .gradsuite import run_gradsuite

    tol = 1e-5
    results = run_gradsuite(seed=cfg.master_seed)
    for r in results:
        print(f"{'PASS' if r.passed(tol) else 'FAIL'}\t{r.name}\t{r.max_rel_error:.3e}")
    return EXIT_OK if all(r.passed(tol) for r in results) else EXIT_FAIL


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    records = load_records(out / "records", standard_variants(cfg.distill.num_teachers))
    if args.variant:
        keep = set(_variants(args, cfg))
        records = [r for r in records if r.variant in keep]
    if not records:
        raise PhaseMissing(f"no run records under {out / 'records'}")
    files = emit_report(records, out / "report", include_timing=cfg.record_timing)
    print(files["summary_md"].read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate and save train/dev/test splits per repeat"),
    "train-teachers": (cmd_train_teachers, "phase 1: train diversified teachers on data shards"),
    "cofinetune": (cmd_cofinetune, "phase 2: co-finetune teachers with a shared pooler/head"),
    "distill": (cmd_distill, "distil students from stored teachers"),
    "eval": (cmd_eval, "evaluate stored student checkpoints on dev/test"),
    "ablate": (cmd_ablate, "run every (or the selected) variant for every repeat"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "report": (cmd_report, "rebuild CSV/markdown/figures from run records"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory (overrides config and $MTKD_OUT_DIR)")
        p.add_argument("--variant", action="append", help="variant name; repeat or comma-separate")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config, args.seed, args.out)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        return COMMANDS[args.command][0](cfg, out, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except (PhaseMissing, IntegrityError) as exc:
        log.error("%s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
