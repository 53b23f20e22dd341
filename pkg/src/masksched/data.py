"""Corpus ingestion, vocabulary construction, tokenization, seeded batching.

Deliberately simple at desk scale: whitespace tokenization over lowercased
lines, a frequency-capped vocabulary, and one line = one sequence. Corpus
files are UTF-8 plain text with one document per line (LF endings); vocab
files hold one token per line where the line number is the id. Both are
bit-exactly reproducible from the same inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

PAD_TOKEN = "[PAD]"
MASK_TOKEN = "[MASK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN)
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)
N_SPECIALS = len(SPECIAL_TOKENS)

# Seed-derivation domain for epoch shuffles (keeps streams disjoint from
# the corruption/eval domains used elsewhere).
_SHUFFLE_DOMAIN = 101

# A token sequence is an int64 id array: [CLS] ... [SEP], optionally padded.
TokenSequence = np.ndarray


@dataclass(frozen=True)
class Vocab:
    """Dense token<->id mapping with the five specials pinned to ids 0..4."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tokens[:N_SPECIALS] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens in order")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def id_of(self) -> dict[str, int]:
        return self._index()

    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {tok: i for i, tok in enumerate(self.tokens)}
            self.__dict__["_idx"] = idx
        return idx

    def lookup(self, token: str) -> int:
        return self._index().get(token, UNK_ID)


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Specials plus the (max_size - 5) most frequent lowercased tokens.

    Frequency ties break lexicographically.
    """
    if max_size < N_SPECIALS + 1:
        raise ValueError("vocab too small: max_size must be at least 6")
    counts: Counter[str] = Counter()
    saw_line = False
    for line in corpus:
        saw_line = True
        counts.update(line.lower().split())
    if not saw_line or not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = tuple(tok for tok, _ in ranked[: max_size - N_SPECIALS])
    return Vocab(SPECIAL_TOKENS + kept)


def encode(vocab: Vocab, line: str, max_len: int) -> TokenSequence:
    """[CLS] + token ids (OOV -> [UNK]) + [SEP], truncated from the right."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    words = line.lower().split()[: max_len - 2]
    ids = [CLS_ID] + [vocab.lookup(w) for w in words] + [SEP_ID]
    return np.asarray(ids, dtype=np.int64)


def decode(vocab: Vocab, ids: TokenSequence) -> str:
    """Inverse of encode: drops [CLS]/[SEP]/[PAD], keeps the [UNK] string."""
    keep = [int(i) for i in ids if int(i) not in (CLS_ID, SEP_ID, PAD_ID)]
    return " ".join(vocab.tokens[i] for i in keep)


def epoch_permutation(n_sequences: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Deterministic shuffle of [0, n_sequences) for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SHUFFLE_DOMAIN, epoch)))
    return rng.permutation(n_sequences)


def pad_batch(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into (ids, real_mask), padding with [PAD] on the right."""
    longest = max(len(s) for s in seqs)
    ids = np.full((len(seqs), longest), PAD_ID, dtype=np.int64)
    real = np.zeros((len(seqs), longest), dtype=bool)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = seq
        real[row, : len(seq)] = True
    return ids, real


def batches(
    dataset: list[TokenSequence], batch_size: int, seed: int, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One seeded epoch over the dataset; the short remainder batch is kept."""
    if not dataset:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(dataset), batch_size):
        chunk = order[start : start + batch_size]
        yield pad_batch([dataset[i] for i in chunk])


def load_corpus(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def encode_corpus(vocab: Vocab, lines: Iterable[str], max_len: int) -> list[TokenSequence]:
    return [encode(vocab, line, max_len) for line in lines]


def save_vocab(vocab: Vocab, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for token in vocab.tokens:
            fh.write(token + "\n")


def load_vocab(path: str) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        return Vocab(tuple(line.rstrip("\n") for line in fh))


def synthetic_zipf_corpus(
    n_lines: int,
    n_word_types: int = 195,
    seed: int = 0,
    min_len: int = 6,
    max_len: int = 14,
) -> list[str]:
    """Toy corpus of iid Zipf-distributed words, for desk-scale runs."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    words = [f"w{k:03d}" for k in range(n_word_types)]
    weights = 1.0 / np.arange(1, n_word_types + 1)
    probs = weights / weights.sum()
    lines = []
    for _ in range(n_lines):
        length = int(rng.integers(min_len, max_len + 1))
        picks = rng.choice(n_word_types, size=length, p=probs)
        lines.append(" ".join(words[k] for k in picks))
    return lines
