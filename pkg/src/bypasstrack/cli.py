"""Command-line entry point: train, prune, finetune, track, bench, flops, gradcheck.

Exit codes: 0 success, 1 contract or configuration error, 2 a built-in check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import ContractError, ShapeError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load
from .model import PhaseError, TrackerModel

log = logging.getLogger("bypasstrack")

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_CHECK = 2

CHECKPOINT_NAME = "model.abtk"


class CheckFailed(Exception):
    """A command's own acceptance check did not hold."""


def _config(args) -> Config:
    cfg = load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.with_updates(**{"train.seed": args.seed})
    return cfg


def _model(args, cfg: Config, *, required: bool) -> tuple[TrackerModel, Config]:
    if args.checkpoint:
        model, stored = load_checkpoint(args.checkpoint)
        # the checkpoint's architecture wins; a --seed override still applies
        if args.seed is not None:
            stored = stored.with_updates(**{"train.seed": args.seed})
        return model, stored
    if required:
        raise ContractError(f"{args.command} needs --checkpoint")
    return TrackerModel(cfg.model, seed=cfg.train.seed), cfg


def _with_epochs(cfg: Config, epochs: int | None) -> Config:
    """Override the epoch count, keeping the lr drop at the same fraction of the schedule."""
    if epochs is None:
        return cfg
    frac = cfg.train.lr_drop_epoch / cfg.train.epochs
    return cfg.with_updates(**{"train.epochs": epochs, "train.lr_drop_epoch": int(frac * epochs)})


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(stats) -> None:
    log.info("epoch %d loss %.4f spar %.4f", stats.epoch, stats.mean("loss"), stats.mean("spar"))


# ---- commands -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    """dense -> reg-trained, or compacted -> final when given a compacted checkpoint."""
    from .training import finetune_with_bdms, train_with_reg, training_sequences

    cfg = _config(args)
    model, cfg = _model(args, cfg, required=False)
    cfg = _with_epochs(cfg, args.epochs)
    out = _out(args)
    seqs = training_sequences(cfg)
    if model.phase == "dense":
        train_with_reg(model, seqs, cfg, log_path=out / "metrics.csv", on_epoch=_progress)
    elif model.phase == "compacted":
        finetune_with_bdms(model, seqs, cfg, log_path=out / "metrics.csv", on_epoch=_progress)
    else:
        raise PhaseError(f"nothing to train in phase {model.phase!r}")
    save_checkpoint(model, out / CHECKPOINT_NAME, cfg)
    print(f"phase {model.phase}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_prune(args) -> int:
    from .pruning import prune_model

    model, cfg = _model(args, _config(args), required=True)
    out = _out(args)
    report = prune_model(model, cfg.prune.mu, seed=cfg.train.seed)
    text = report.to_text()
    (out / "prune_report.txt").write_text(text)
    save_checkpoint(model, out / CHECKPOINT_NAME, cfg)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .training import finetune_with_bdms, training_sequences

    model, cfg = _model(args, _config(args), required=True)
    cfg = _with_epochs(cfg, args.epochs)
    out = _out(args)
    finetune_with_bdms(model, training_sequences(cfg), cfg, log_path=out / "metrics.csv", on_epoch=_progress)
    save_checkpoint(model, out / CHECKPOINT_NAME, cfg)
    print(f"phase {model.phase}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_track(args) -> int:
    from .bypass import write_trace_csv
    from .tracker import evaluate, write_sequence_csv, write_summary

    model, cfg = _model(args, _config(args), required=True)
    if model.phase != "final":
        raise PhaseError(f"tracking needs a final model, not {model.phase!r}")
    out = _out(args)
    seq_dir = out / "sequences"
    seq_dir.mkdir(exist_ok=True)
    report: dict = {"phase": model.phase, "config_hash": cfg.hash(), "seed": cfg.train.seed}
    trace_rows = []
    for difficulty in ("easy", "hard"):
        metrics, seqs, results = evaluate(model, cfg.data, cfg.train.seed, difficulty)
        report[difficulty] = metrics
        for i, (seq, res) in enumerate(zip(seqs, results)):
            write_sequence_csv(seq, res, seq_dir / f"{difficulty}_{i:03d}.csv")
            base = len(trace_rows)
            trace_rows += [(base + t, tr) for t, tr in enumerate(res.traces) if tr is not None]
    report["executed_blocks_hard_minus_easy"] = (
        report["hard"]["mean_executed_blocks"] - report["easy"]["mean_executed_blocks"])
    write_summary(report, out / "report.json")
    with open(out / "trace.csv", "w", newline="") as fh:
        write_trace_csv(trace_rows, fh)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_blocks, bench_models, bench_problems, write_bench_csv

    cfg = _config(args)
    final = None
    if args.checkpoint:
        final, cfg = _model(args, cfg, required=True)
        if final.phase != "final":
            raise PhaseError(f"bench takes a final model, not {final.phase!r}")
    out = _out(args)
    records = []
    if args.level in ("block", "all"):
        records += bench_blocks(cfg, seed=cfg.train.seed, warmup=args.warmup, runs=args.runs)
    if args.level in ("model", "all"):
        records += bench_models(cfg, seed=cfg.train.seed, warmup=args.warmup, runs=args.runs, final=final,
                                scenarios=args.scenario)
    write_bench_csv(records, out / "bench.csv")
    for rec in records:
        print(f"{rec.scenario:<18} median {rec.median_ms:.4f} ms  p10 {rec.p10_ms:.4f}  p90 {rec.p90_ms:.4f}")
    if args.check:
        problems = bench_problems(records)
        for p in problems:
            print(f"check failed: {p}")
        if problems:
            raise CheckFailed("latency checks failed")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .flops import model_flops

    model, _ = _model(args, _config(args), required=False)
    text = f"phase {model.phase}\n" + model_flops(model).to_text()
    if args.out:
        (_out(args) / "flops.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .diagnostics import all_pass, gradcheck_suite

    results = gradcheck_suite(seed=args.seed or 0)
    for name, (err, tol) in results.items():
        print(f"{name:<8} max_rel_err {err:.3e}  bound {tol:.0e}  {'ok' if err < tol else 'FAIL'}")
    if not all_pass(results):
        raise CheckFailed("gradient check failed")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "track": cmd_track,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file (defaults if omitted)")
    common.add_argument("--checkpoint", metavar="PATH", help="input checkpoint")
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
    common.add_argument("--seed", metavar="N", type=int, help="override train.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bypasstrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "finetune"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--epochs", type=int, help="override train.epochs")
    for name in ("prune", "track", "flops", "gradcheck"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("bench", parents=[common])
    p.add_argument("--level", choices=("block", "model", "all"), default="all")
    p.add_argument("--scenario", action="append",
                   help="dense, +bdm, +bdm+vtp, forced-skip-K or forced-skip-k (all K); repeatable")
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--check", action="store_true", help="exit 2 if ordering or monotonicity fails")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, ContractError, ShapeError, PhaseError, CheckpointError, ValueError,
            RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
