"""Command-line entry point: train, eval, compare, speedup, gradcheck, vocab.

Run configs are single JSON documents (unknown keys rejected, every nested
invariant validated before any work starts), reports are JSON on stdout,
series are CSV, minimal pairs are TSV. Every subcommand is deterministic
given its inputs and seeds; wall-clock timing is opt-in (--timings) and
never enters a computed result.

Exit codes: 0 ok, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analysis, data, evaluate, model, stats, trainer
from .corruption import CorruptionConfig
from .evaluate import EvalConfig
from .model import ModelConfig
from .schedule import ScheduleError, parse_schedule
from .trainer import TrainConfig, TrainingDiverged


class ConfigError(ValueError):
    """Invalid run configuration (exit code 2)."""


def _require_keys(section: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    corpus: str
    vocab_size: int
    model: dict
    train: dict
    eval: dict
    out_dir: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


_MODEL_KEYS = {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "init_seed"}
_TRAIN_KEYS = {
    "total_steps",
    "batch_size",
    "schedule",
    "objective",
    "subset_loss_fraction",
    "min_masked",
    "peak_lr",
    "final_lr",
    "warmup_fraction",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "grad_clip",
    "seed",
    "eval_every",
    "checkpoint_every",
}
_EVAL_KEYS = {"masking_rate", "seed", "n_batches"}


def parse_run_config(doc: dict) -> RunConfig:
    _require_keys(
        doc,
        {"corpus", "vocab_size", "model", "train", "eval", "out_dir"},
        {"corpus", "vocab_size", "model", "train", "out_dir"},
        "run config",
    )
    _require_keys(doc["model"], _MODEL_KEYS, {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"}, "model section")
    _require_keys(doc["train"], _TRAIN_KEYS, {"total_steps", "batch_size", "schedule"}, "train section")
    eval_section = doc.get("eval", {})
    _require_keys(eval_section, _EVAL_KEYS, set(), "eval section")
    if not isinstance(doc["vocab_size"], int) or doc["vocab_size"] < 6:
        raise ConfigError("vocab_size must be an integer >= 6")
    return RunConfig(
        corpus=doc["corpus"],
        vocab_size=doc["vocab_size"],
        model=dict(doc["model"]),
        train=dict(doc["train"]),
        eval=dict(eval_section),
        out_dir=doc["out_dir"],
    )


def build_configs(run: RunConfig, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(vocab_size=vocab_size, **run.model)
    model_cfg.validate()
    t = dict(run.train)
    total_steps = t.pop("total_steps")
    try:
        schedule = parse_schedule(t.pop("schedule"), max(total_steps, 1))
    except ScheduleError as exc:
        raise ConfigError(f"train.schedule: {exc}") from None
    corruption = CorruptionConfig(
        objective=t.pop("objective", "mlm"),
        subset_loss_fraction=t.pop("subset_loss_fraction", None),
        min_masked=t.pop("min_masked", 1),
    )
    eval_cfg = EvalConfig(**run.eval)
    train_cfg = TrainConfig(
        total_steps=total_steps,
        schedule=schedule,
        corruption=corruption,
        eval=eval_cfg,
        **t,
    )
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"train section: {exc}") from None
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    run = parse_run_config(doc)
    out_dir = run.out_dir
    config_path = os.path.join(out_dir, "config.json")
    if os.path.exists(config_path) and not (args.force or args.resume):
        raise ConfigError(
            f"refusing to overwrite existing run dir {out_dir!r} (use --force)"
        )

    lines = data.load_corpus(run.corpus)
    vocab = data.build_vocab(lines, run.vocab_size)
    model_cfg, train_cfg = build_configs(run, vocab.size)
    dataset = data.encode_corpus(vocab, lines, model_cfg.max_seq_len)

    os.makedirs(out_dir, exist_ok=True)
    with open(config_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(run.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    data.save_vocab(vocab, os.path.join(out_dir, "vocab.txt"))

    result = trainer.train(
        model_cfg,
        train_cfg,
        dataset,
        vocab,
        out_dir=out_dir,
        resume_from=args.resume,
        stop_after=args.stop_after,
        log_timings=args.timings,
    )
    summary = {
        "steps": result.opt.step,
        "final_checkpoint": result.final_checkpoint,
    }
    if result.metrics.records:
        last = result.metrics.records[-1]
        summary["final_loss"] = last.loss
        if last.eval_loss is not None:
            summary["final_eval_loss"] = last.eval_loss
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_eval_context(args):
    header, params, _ = trainer.load_training_checkpoint(args.checkpoint)
    model_cfg = ModelConfig(**header["model"])
    vocab_path = args.vocab
    if vocab_path is None:
        run_dir = os.path.dirname(os.path.dirname(os.path.abspath(args.checkpoint)))
        vocab_path = os.path.join(run_dir, "vocab.txt")
    vocab = data.load_vocab(vocab_path)
    if vocab.size != model_cfg.vocab_size:
        raise ConfigError(
            f"vocab file has {vocab.size} entries but the checkpoint expects "
            f"{model_cfg.vocab_size}"
        )
    return header, params, model_cfg, vocab


def cmd_eval(args) -> int:
    if args.pairs is None and args.corpus is None:
        raise ConfigError("eval needs --corpus (MLM loss) or --pairs (minimal pairs)")
    header, params, model_cfg, vocab = _load_eval_context(args)
    if args.pairs is not None:
        pairs = evaluate.load_minimal_pairs(args.pairs)
        report = evaluate.minimal_pair_accuracy(params, model_cfg, vocab, pairs)
        report["n_pairs"] = len(pairs)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    if not (0.0 <= args.rate <= 1.0):
        raise ConfigError(f"--rate out of [0,1]: {args.rate}")
    lines = data.load_corpus(args.corpus)
    dataset = data.encode_corpus(vocab, lines, model_cfg.max_seq_len)
    cfg = EvalConfig(masking_rate=args.rate, seed=args.seed, n_batches=args.batches)
    batch_size = args.batch_size or header["train"]["batch_size"]
    loss = evaluate.eval_mlm(params, model_cfg, dataset, cfg, batch_size)
    print(
        json.dumps(
            {
                "mean_loss": loss,
                "rate": args.rate,
                "seed": args.seed,
                "n_batches": args.batches,
                "step": header["step"],
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def cmd_compare(args) -> int:
    with open(args.samples, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        samples = stats.samples_from_json(doc)
        report = stats.parity_table(samples, alpha=args.alpha)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(stats.report_json_text(report))
    print()
    print(stats.format_parity_text(report))
    return 0


def cmd_speedup(args) -> int:
    series: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for path in args.series:
        stem = os.path.splitext(os.path.basename(path))[0]
        for name, arrays in analysis.load_series_csv(path, default_name=stem).items():
            if name in series:
                raise ConfigError(f"duplicate series name {name!r}")
            series[name] = arrays
    if args.baseline not in series:
        raise ConfigError(
            f"baseline {args.baseline!r} not among series {sorted(series)}"
        )
    for name, (steps, _) in series.items():
        if np.unique(steps).size < 4:
            raise ConfigError(f"series {name!r} has fewer than 4 distinct steps")

    fits = {name: analysis.fit_speedup_curve(steps, values) for name, (steps, values) in series.items()}
    bad = [name for name, fit in fits.items() if not fit.converged]
    if bad:
        print(f"error: fit did not converge for {bad}", file=sys.stderr)
        return 1
    base_steps, base_values = series[args.baseline]
    baseline_best = float(base_values.max())
    baseline_total = float(base_steps.max())
    out = {
        "baseline": args.baseline,
        "baseline_best": baseline_best,
        "baseline_total_steps": baseline_total,
        "series": {},
    }
    crossovers: dict[str, float] = {}
    for name, fit in fits.items():
        entry: dict = {"fit": fit.to_json()}
        if name != args.baseline:
            cross = analysis.crossover_step(fit, baseline_best)
            entry["crossover_step"] = cross
            entry["speedup"] = (
                analysis.speedup_from_steps(baseline_total, cross) if cross is not None else None
            )
            if cross is not None:
                crossovers[name] = cross
        out["series"][name] = entry
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.plot:
        analysis.emit_plot(series, fits, args.plot, crossovers=crossovers)
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        d_model=args.d_model,
        d_ff=args.d_ff,
        vocab_size=args.vocab_size,
        max_seq_len=args.seq_len,
        init_seed=args.seed,
    )
    config.validate()
    report = model.grad_check(config, seed=args.seed, n_coords=args.coords, h=args.h, tol=args.tol)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0 if report.passed else 1


def cmd_vocab(args) -> int:
    lines = data.load_corpus(args.corpus)
    vocab = data.build_vocab(lines, args.max_size)
    data.save_vocab(vocab, args.out)
    print(json.dumps({"size": vocab.size, "out": args.out}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masksched",
        description="Masked-LM pretraining with dynamic masking-rate schedules.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run pretraining from a JSON run config")
    p.add_argument("config", help="path to the run-config JSON document")
    p.add_argument("--force", action="store_true", help="overwrite an existing run dir")
    p.add_argument("--resume", metavar="CKPT", help="resume from a checkpoint file")
    p.add_argument("--stop-after", type=int, default=None, help="stop early at this step")
    p.add_argument("--timings", action="store_true", help="log wall_ms into metrics.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fixed-rate MLM loss or minimal-pair accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="evaluation corpus (one document per line)")
    p.add_argument("--vocab", help="vocab file; defaults to the run dir's vocab.txt")
    p.add_argument("--rate", type=float, default=0.15, help="evaluation masking rate")
    p.add_argument("--seed", type=int, default=0, help="mask seed")
    p.add_argument("--batches", type=int, default=8, help="number of eval batches")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--pairs", help="minimal-pair TSV file (pll scoring mode)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="significance report from per-seed metric samples")
    p.add_argument("samples", help="JSON file: {task: {schedule: [values]}}")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("speedup", help="fit speedup curves and solve crossovers")
    p.add_argument("series", nargs="+", help="CSV files with header step,value[,schedule]")
    p.add_argument("--baseline", required=True, help="baseline schedule name")
    p.add_argument("--plot", help="write an SVG plot to this path")
    p.set_defaults(func=cmd_speedup)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--d-ff", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("vocab", help="build and write a vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
