"""The pretraining loop: scheduled corruption, AdamW, warmup+decay LR, logging.

Every source of randomness is derived functionally from (seed, step, row)
via SeedSequence, so a run is bit-reproducible and a checkpoint-resume split
produces exactly the same bytes as an uninterrupted run. The optimizer state
is stored in the checkpoint alongside the parameters.

Run directory layout: config.json, vocab.txt, metrics.jsonl,
checkpoints/step-N.ckpt. Metrics records are JSON lines with keys
{step, rate, lr, loss, eval_loss?, wall_ms?}; wall_ms is written only when
timing logging is enabled so that reruns are byte-identical by default.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluate, model
from .corruption import (
    CorruptionConfig,
    MaskOutcome,
    corrupt_sequence,
    maskable_indices,
    round_half_up,
)
from .data import Vocab, epoch_permutation, pad_batch
from .evaluate import EvalConfig
from .model import ModelConfig, Params
from .schedule import ScheduleSpec, masking_rate, schedule_name, validate

# Seed-derivation domains for per-(step, row) corruption generators and the
# per-step loss-subset draw.
_CORRUPT_DOMAIN = 202
_SUBSET_DOMAIN = 204


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"diverged at step {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Optimization defaults follow the BERT-style recipe this toolkit targets."""

    total_steps: int
    batch_size: int
    schedule: ScheduleSpec
    corruption: CorruptionConfig = CorruptionConfig()
    peak_lr: float = 5e-4
    final_lr: float = 1e-5
    warmup_fraction: float = 0.06
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 1e-5
    grad_clip: float | None = None
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    eval: EvalConfig = EvalConfig()

    @property
    def objective(self) -> str:
        return self.corruption.objective

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.warmup_fraction < 1):
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.total_steps > 0:  # zero-step runs never evaluate the schedule
            problems = validate(self.schedule)
            if problems:
                raise ValueError("; ".join(problems))
            if self.schedule.total_steps != self.total_steps:
                raise ValueError("schedule.total_steps must equal total_steps")
        self.corruption.validate()
        if self.corruption.subset_loss_fraction is not None and self.objective != "mlm":
            raise ValueError("subset_loss_fraction requires the mlm objective")
        self.eval.validate()


@dataclass
class OptState:
    m: Params
    v: Params
    step: int = 0


@dataclass
class MetricsRecord:
    step: int
    rate: float
    lr: float
    loss: float
    eval_loss: float | None = None
    wall_ms: float | None = None
    masked: int = 0
    maskable: int = 0
    loss_positions: int = 0

    def to_json(self, with_timings: bool = False) -> str:
        out: dict = {"step": self.step, "rate": self.rate, "lr": self.lr, "loss": self.loss}
        if self.eval_loss is not None:
            out["eval_loss"] = self.eval_loss
        if with_timings and self.wall_ms is not None:
            out["wall_ms"] = self.wall_ms
        return json.dumps(out)


@dataclass
class RunMetrics:
    records: list[MetricsRecord] = field(default_factory=list)

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("metrics steps must be strictly increasing")
        self.records.append(record)


@dataclass
class TrainResult:
    params: Params
    opt: OptState
    metrics: RunMetrics
    final_checkpoint: str | None = None


def lr_at(config: TrainConfig, t: float) -> float:
    """Linear warmup from 0 to peak over the warmup fraction, then linear decay."""
    total = config.total_steps
    if not (0 <= t <= total):
        raise ValueError(f"step out of range: {t!r}")
    warm = config.warmup_fraction * total
    if t <= warm:
        return config.peak_lr * (t / warm)
    return config.peak_lr + (t - warm) / (total - warm) * (config.final_lr - config.peak_lr)


def init_opt_state(params: Params) -> OptState:
    return OptState(m=model.zeros_like_params(params), v=model.zeros_like_params(params))


def _decays(name: str) -> bool:
    # weight decay applies everywhere except layer-norm scale/shift
    return not name.endswith((".scale", ".shift"))


def adamw_step(
    params: Params,
    grads: Params,
    opt: OptState,
    lr: float,
    config: TrainConfig,
) -> None:
    """One bias-corrected decoupled-weight-decay update, in place."""
    opt.step += 1
    t = opt.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDiverged(t - 1, f"non-finite gradient in {name}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if _decays(name) and config.weight_decay:
            update = update + config.weight_decay * theta
        theta -= lr * update


def clip_gradients(grads: Params, max_norm: float) -> float:
    """Scale gradients to a global L2 norm cap; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def batch_indices(n_sequences: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Dataset rows for one step; the dataset is cycled epoch by epoch."""
    per_epoch = math.ceil(n_sequences / batch_size)
    epoch, slot = divmod(step, per_epoch)
    order = epoch_permutation(n_sequences, seed, epoch)
    return order[slot * batch_size : (slot + 1) * batch_size]


def corruption_rng(seed: int, step: int, row: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _CORRUPT_DOMAIN, step, row)))


def restrict_loss_budget(
    labels: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    maskable_total: int,
    fraction: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cap the batch's loss positions at a fraction of its maskable tokens.

    The subset is drawn uniformly from the pooled masked positions of the
    whole batch, so the step-level budget |loss_set| <= round(fraction *
    maskable) holds exactly (per-sequence rounding could overshoot it). At
    least one position is always kept so the loss stays defined.
    """
    budget = max(1, round_half_up(fraction * maskable_total))
    if labels.size <= budget:
        return labels, rows, cols
    keep = np.sort(rng.choice(labels.size, size=budget, replace=False))
    return labels[keep], rows[keep], cols[keep]


def collate_targets(outcomes: list[MaskOutcome | None]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten per-sequence loss sets into (labels, rows, cols) arrays."""
    labels: list[np.ndarray] = []
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    for row, outcome in enumerate(outcomes):
        if outcome is None or outcome.loss_set.size == 0:
            continue
        labels.append(outcome.labels)
        rows.append(np.full(outcome.loss_set.size, row, dtype=np.int64))
        cols.append(outcome.loss_set)
    if not labels:
        return (np.empty(0, dtype=np.int64),) * 3
    return np.concatenate(labels), np.concatenate(rows), np.concatenate(cols)


def corrupt_batch(
    seqs: list[np.ndarray],
    rate: float,
    vocab_size: int,
    seed: int,
    step: int,
    config: CorruptionConfig,
) -> tuple[list[MaskOutcome | None], np.ndarray, np.ndarray]:
    # subset-loss restriction happens at batch level (restrict_loss_budget),
    # not per sequence, so strip it here
    config = dataclasses.replace(config, subset_loss_fraction=None)
    outcomes = [
        corrupt_sequence(seq, rate, vocab_size, corruption_rng(seed, step, row), config)
        for row, seq in enumerate(seqs)
    ]
    corrupted = [
        outcomes[i].corrupted if outcomes[i] is not None else seqs[i] for i in range(len(seqs))
    ]
    ids, real = pad_batch(corrupted)
    return outcomes, ids, real


def _config_header(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    # the schedule is stored as its full field dict (lossless even for
    # general step schedules); the canonical name rides along for display
    cfg = dataclasses.asdict(train_config)
    cfg["schedule_name"] = schedule_name(train_config.schedule)
    return {
        "model": dataclasses.asdict(model_config),
        "train": cfg,
        "rng": {"scheme": "stateless-counter", "seed": train_config.seed},
    }


def _checkpoint_tensors(params: Params, opt: OptState) -> dict[str, np.ndarray]:
    tensors = dict(params)
    for name, t in opt.m.items():
        tensors["opt.m." + name] = t
    for name, t in opt.v.items():
        tensors["opt.v." + name] = t
    return tensors


def save_training_checkpoint(
    path: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int,
    params: Params,
    opt: OptState,
) -> None:
    header = _config_header(model_config, train_config)
    header["step"] = step
    model.save_checkpoint(path, header, _checkpoint_tensors(params, opt))


def load_training_checkpoint(path: str) -> tuple[dict, Params, OptState]:
    header, tensors = model.load_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt = OptState(
        m={k[len("opt.m.") :]: v for k, v in tensors.items() if k.startswith("opt.m.")},
        v={k[len("opt.v.") :]: v for k, v in tensors.items() if k.startswith("opt.v.")},
        step=header["step"],
    )
    return header, params, opt


def _headers_match(header: dict, model_config: ModelConfig, train_config: TrainConfig) -> bool:
    want = _config_header(model_config, train_config)
    have = {"model": header.get("model"), "train": header.get("train"), "rng": header.get("rng")}
    return json.loads(json.dumps(want)) == have


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: list[np.ndarray],
    vocab: Vocab,
    out_dir: str | None = None,
    resume_from: str | None = None,
    stop_after: int | None = None,
    log_timings: bool = False,
) -> TrainResult:
    """Run (part of) a training job.

    ``stop_after`` ends the loop early at the given step so a run can be
    split and resumed; the final post-run evaluation and checkpoint happen
    only when the stop point is the configured total.
    """
    model_config.validate()
    train_config.validate()
    if model_config.vocab_size != vocab.size:
        raise ValueError("model vocab_size does not match the vocabulary")
    if not dataset:
        raise ValueError("empty dataset")
    total = train_config.total_steps
    stop = total if stop_after is None else min(stop_after, total)

    if resume_from is not None:
        header, params, opt = load_training_checkpoint(resume_from)
        if not _headers_match(header, model_config, train_config):
            raise ValueError("config mismatch between checkpoint and requested run")
        start = header["step"]
    else:
        params = model.init_params(model_config)
        opt = init_opt_state(params)
        start = 0

    metrics = RunMetrics()
    metrics_fh = None
    ckpt_dir = None
    final_ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        mode = "ab" if resume_from is not None else "wb"
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), mode)

    def run_eval(p: Params) -> float:
        return evaluate.eval_mlm(
            p, model_config, dataset, train_config.eval, train_config.batch_size
        )

    def save_step_checkpoint(step: int) -> str | None:
        if ckpt_dir is None:
            return None
        path = os.path.join(ckpt_dir, f"step-{step}.ckpt")
        save_training_checkpoint(path, model_config, train_config, step, params, opt)
        return path

    try:
        if total == 0 or start >= stop:
            final_ckpt = save_step_checkpoint(start)
            return TrainResult(params, opt, metrics, final_ckpt)

        eval_every = train_config.eval_every
        for t in range(start, stop):
            t0 = time.perf_counter()
            rate = masking_rate(train_config.schedule, t)
            record = MetricsRecord(step=t, rate=rate, lr=lr_at(train_config, t), loss=math.nan)
            if eval_every and t % eval_every == 0:
                record.eval_loss = run_eval(params)

            idx = batch_indices(len(dataset), train_config.batch_size, train_config.seed, t)
            seqs = [dataset[int(i)] for i in idx]
            outcomes, ids, real = corrupt_batch(
                seqs, rate, vocab.size, train_config.seed, t, train_config.corruption
            )
            labels, rows, cols = collate_targets(outcomes)
            if labels.size == 0:
                raise TrainingDiverged(t, "loss undefined: no maskable positions in batch")
            maskable_total = sum(maskable_indices(s).size for s in seqs)
            fraction = train_config.corruption.subset_loss_fraction
            if fraction is not None:
                labels, rows, cols = restrict_loss_budget(
                    labels,
                    rows,
                    cols,
                    maskable_total,
                    fraction,
                    np.random.default_rng(
                        np.random.SeedSequence((train_config.seed, _SUBSET_DOMAIN, t))
                    ),
                )
            head = "rts" if train_config.objective == "rts" else "mlm"
            loss, grads = model.backward(
                params, model_config, ids, real, {head: (labels, rows, cols)}
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(t, f"non-finite loss {loss!r}")
            if train_config.grad_clip is not None:
                clip_gradients(grads, train_config.grad_clip)
            adamw_step(params, grads, opt, record.lr, train_config)

            record.loss = loss
            record.masked = sum(o.mask_set.size for o in outcomes if o is not None)
            record.maskable = maskable_total
            record.loss_positions = labels.size
            if t == stop - 1 and stop == total:
                record.eval_loss = run_eval(params)
            record.wall_ms = (time.perf_counter() - t0) * 1000.0
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write((record.to_json(log_timings) + "\n").encode("utf-8"))

            done = t + 1
            if (
                train_config.checkpoint_every and done % train_config.checkpoint_every == 0
            ) or done == stop:
                final_ckpt = save_step_checkpoint(done)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    return TrainResult(params, opt, metrics, final_ckpt)
