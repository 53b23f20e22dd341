"""Fixed-rate MLM evaluation, pseudo-log-likelihood, minimal-pair accuracy.

Evaluation masks are derived from the eval seed alone, so two checkpoints
scored with the same EvalConfig see identical masks and their losses are
directly comparable. Sentence scoring replaces one position at a time with
[MASK] (no 80/10/10 here) and sums the masked-token log-likelihoods.

Minimal-pair files are UTF-8 TSV with a header row and columns
pair_id, super_task, sentence_good, sentence_bad.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from . import model
from .corruption import CorruptionConfig, corrupt_sequence, maskable_indices
from .data import MASK_ID, Vocab, encode, pad_batch
from .model import ModelConfig, Params

# Seed-derivation domain for per-(batch, row) evaluation masks.
_EVAL_DOMAIN = 303


@dataclass(frozen=True)
class EvalConfig:
    masking_rate: float = 0.15
    seed: int = 0
    n_batches: int = 8

    def validate(self) -> None:
        if not (0.0 <= self.masking_rate <= 1.0):
            raise ValueError("eval masking_rate out of [0,1]")
        if self.n_batches < 1:
            raise ValueError("n_batches must be >= 1")
        if self.seed < 0:
            raise ValueError("eval seed must be >= 0")


@dataclass(frozen=True)
class MinimalPair:
    pair_id: str
    super_task: str
    sentence_good: str
    sentence_bad: str


def _eval_rng(seed: int, batch: int, row: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _EVAL_DOMAIN, batch, row)))


def eval_batches(dataset: list[np.ndarray], cfg: EvalConfig, batch_size: int):
    """First n_batches of the dataset in natural order (masks vary, data does not)."""
    n = min(cfg.n_batches * batch_size, len(dataset))
    for b, start in enumerate(range(0, n, batch_size)):
        yield b, dataset[start : start + batch_size]


def eval_mlm(
    params: Params,
    config: ModelConfig,
    dataset: list[np.ndarray],
    cfg: EvalConfig = EvalConfig(),
    batch_size: int = 16,
    return_mask_digest: bool = False,
):
    """Mean of per-batch mean NLL under fixed-seed corruption; no updates.

    With ``return_mask_digest`` the SHA-256 over all sampled mask indices is
    returned too, to let callers assert that two evaluations saw the same
    masks.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("empty evaluation set")
    ccfg = CorruptionConfig()
    digest = hashlib.sha256()
    batch_losses = []
    for b, seqs in eval_batches(dataset, cfg, batch_size):
        outcomes = [
            corrupt_sequence(seq, cfg.masking_rate, config.vocab_size, _eval_rng(cfg.seed, b, r), ccfg)
            for r, seq in enumerate(seqs)
        ]
        corrupted = [
            o.corrupted if o is not None else seqs[i] for i, o in enumerate(outcomes)
        ]
        ids, real = pad_batch(corrupted)
        labels, rows, cols = [], [], []
        for r, o in enumerate(outcomes):
            if o is None or o.loss_set.size == 0:
                continue
            digest.update(np.asarray([r], dtype=np.int64).tobytes())
            digest.update(o.mask_set.astype(np.int64).tobytes())
            labels.append(o.labels)
            rows.append(np.full(o.loss_set.size, r, dtype=np.int64))
            cols.append(o.loss_set)
        if not labels:
            continue
        out = model.forward(params, config, ids, real, heads=("mlm",))
        batch_losses.append(
            model.mlm_loss(out, np.concatenate(labels), np.concatenate(rows), np.concatenate(cols))
        )
    if not batch_losses:
        raise ValueError("empty evaluation set: no maskable positions")
    mean_loss = float(np.mean(batch_losses))
    if return_mask_digest:
        return mean_loss, digest.hexdigest()
    return mean_loss


def pll(params: Params, config: ModelConfig, ids: np.ndarray) -> float:
    """Pseudo-log-likelihood: mask each non-special position in turn and sum
    the log-likelihood of the hidden token. One batched forward covers all
    positions (rows are independent)."""
    ids = np.asarray(ids, dtype=np.int64)
    positions = maskable_indices(ids)
    if positions.size == 0:
        raise ValueError("sentence has no scoreable tokens")
    batch = np.tile(ids, (positions.size, 1))
    batch[np.arange(positions.size), positions] = MASK_ID
    real = np.ones_like(batch, dtype=bool)
    out = model.forward(params, config, batch, real, heads=("mlm",))
    logp = model.log_softmax(out.mlm_logits[np.arange(positions.size), positions])
    return float(logp[np.arange(positions.size), ids[positions]].sum())


def load_minimal_pairs(path: str) -> list[MinimalPair]:
    pairs = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        required = {"pair_id", "super_task", "sentence_good", "sentence_bad"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"minimal-pair file must have columns {sorted(required)}")
        for row in reader:
            pairs.append(
                MinimalPair(
                    pair_id=row["pair_id"],
                    super_task=row["super_task"],
                    sentence_good=row["sentence_good"],
                    sentence_bad=row["sentence_bad"],
                )
            )
    if not pairs:
        raise ValueError("no minimal pairs in file")
    return pairs


def minimal_pair_accuracy(
    params: Params,
    config: ModelConfig,
    vocab: Vocab,
    pairs: list[MinimalPair],
) -> dict:
    """Per-super-task accuracy plus their unweighted mean.

    A pair is correct iff the grammatical sentence scores strictly higher;
    ties count as incorrect.
    """
    if not pairs:
        raise ValueError("no minimal pairs given")
    correct: dict[str, int] = {}
    totals: dict[str, int] = {}
    for pair in pairs:
        good = encode(vocab, pair.sentence_good, config.max_seq_len)
        bad = encode(vocab, pair.sentence_bad, config.max_seq_len)
        score_good = pll(params, config, good)
        score_bad = pll(params, config, bad)
        totals[pair.super_task] = totals.get(pair.super_task, 0) + 1
        if score_good > score_bad:
            correct[pair.super_task] = correct.get(pair.super_task, 0) + 1
    per_task = {
        task: correct.get(task, 0) / totals[task] for task in sorted(totals)
    }
    overall = sum(per_task.values()) / len(per_task)
    return {"super_tasks": per_task, "overall": overall}
