"""Synthetic Zipf corpora, token-stream files, and frequency-decile binning."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .errors import IngestionError, ParameterError, StreamParseError

TOKEN_MAGIC = b"TIDETOK1"
TIERS = ("rare", "mid", "common")


@dataclass(frozen=True)
class ZipfSpec:
    """Parameters of a synthetic corpus.

    With ``successor_prob = 0`` tokens are i.i.d. Zipf draws. A positive value
    adds bigram structure: with that probability the next token is the
    rank-neighbour partner of the current one (ids 2i <-> 2i+1), otherwise a
    fresh Zipf draw. Partners have nearly equal frequency, so the marginal
    stays close to Zipf while the next token depends on token identity.
    """

    vocab_size: int
    exponent: float = 1.0
    seed: int = 0
    length: int = 100_000
    successor_prob: float = 0.0


def zipf_probs(vocab_size: int, exponent: float = 1.0) -> np.ndarray:
    """f_v proportional to (v+1)^-s; id 0 is the most frequent type."""
    if vocab_size < 1:
        raise ParameterError("vocab_size must be >= 1")
    if not exponent > 0:
        raise ParameterError(f"Zipf exponent must be > 0, got {exponent}")
    w = np.arange(1, vocab_size + 1, dtype=np.float64) ** (-float(exponent))
    return w / w.sum()


def partner_ids(vocab_size: int) -> np.ndarray:
    ids = np.arange(vocab_size)
    partner = ids ^ 1
    partner[partner >= vocab_size] = ids[partner >= vocab_size]
    return partner


def unigram_probs(spec: ZipfSpec) -> np.ndarray:
    """Stationary per-token probability of a corpus drawn from ``spec``."""
    f = zipf_probs(spec.vocab_size, spec.exponent)
    p = spec.successor_prob
    if p == 0:
        return f
    return (f + p * f[partner_ids(spec.vocab_size)]) / (1.0 + p)


def zipf_sample_corpus(spec: ZipfSpec) -> np.ndarray:
    """Draw ``spec.length`` token ids; identical output for identical spec."""
    if spec.vocab_size < 2:
        raise ParameterError("vocab_size must be >= 2")
    if spec.length < 1:
        raise ParameterError("length must be >= 1")
    if not 0.0 <= spec.successor_prob < 1.0:
        raise ParameterError("successor_prob must lie in [0, 1)")
    f = zipf_probs(spec.vocab_size, spec.exponent)
    rng = np.random.default_rng(spec.seed)
    fresh = rng.choice(spec.vocab_size, size=spec.length, p=f)
    if spec.successor_prob == 0:
        return fresh.astype(np.int64)
    follow = rng.random(spec.length) < spec.successor_prob
    follow[0] = False
    idx = np.arange(spec.length)
    last = np.maximum.accumulate(np.where(follow, 0, idx))
    out = fresh[last]
    odd = ((idx - last) % 2).astype(bool)
    out[odd] = partner_ids(spec.vocab_size)[out[odd]]
    return out.astype(np.int64)


# -- frequency tables --------------------------------------------------------


@dataclass
class FrequencyBinTable:
    """Per-token counts plus, after :func:`build_bins`, ranks and decile bins.

    ``ranks`` and ``bins`` hold -1 for tokens that received no bin (unseen
    or removed by the filter).
    """

    counts: np.ndarray
    ranks: np.ndarray | None = None
    bins: np.ndarray | None = None
    bin_count: int = 10
    filtered: frozenset = field(default_factory=frozenset)

    @property
    def vocab_size(self) -> int:
        return len(self.counts)

    def bin_sizes(self) -> np.ndarray:
        return np.bincount(self.bins[self.bins >= 0], minlength=self.bin_count)

    def clean_ids(self) -> np.ndarray:
        return np.flatnonzero(self.bins >= 0)


def count_frequencies(tokens, vocab_size: int) -> FrequencyBinTable:
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        off = int(np.flatnonzero((tokens < 0) | (tokens >= vocab_size))[0])
        raise IndexError(f"token id {int(tokens[off])} at offset {off} outside [0, {vocab_size})")
    return FrequencyBinTable(counts=np.bincount(tokens, minlength=vocab_size).astype(np.int64))


def accept_all(token_id: int) -> bool:
    return True


def build_bins(
    table: FrequencyBinTable,
    bin_count: int = 10,
    token_filter: Callable[[int], bool] = accept_all,
) -> FrequencyBinTable:
    """Assign b(v) = min(floor(rank(v) / n_clean * B), B - 1) to clean types.

    Clean types have count >= 1 and pass ``token_filter``. Ranks are by
    ascending count, ties broken by ascending token id.
    """
    if bin_count < 1:
        raise ParameterError("bin_count must be >= 1")
    counts = table.counts
    observed = np.flatnonzero(counts > 0)
    keep = np.array([bool(token_filter(int(v))) for v in observed], dtype=bool)
    clean = observed[keep] if observed.size else observed
    filtered = frozenset(int(v) for v in observed[~keep]) if observed.size else frozenset()
    n = clean.size
    if bin_count > n:
        raise ParameterError(f"bin_count {bin_count} exceeds {n} clean token types")
    order = clean[np.lexsort((clean, counts[clean]))]
    ranks = np.full(len(counts), -1, dtype=np.int64)
    ranks[order] = np.arange(n)
    bins = np.full(len(counts), -1, dtype=np.int64)
    bins[order] = np.minimum((np.arange(n) * bin_count) // n, bin_count - 1)
    return replace(table, ranks=ranks, bins=bins, bin_count=bin_count, filtered=filtered)


def bin_tier(b: int) -> str:
    """Decile bins 0-2 are rare, 3-6 mid, 7-9 common."""
    if not 0 <= b < 10:
        raise ParameterError(f"bin {b} outside [0, 10)")
    if b <= 2:
        return "rare"
    if b <= 6:
        return "mid"
    return "common"


def uniform_bin_sizes(n_clean: int, bin_count: int) -> np.ndarray:
    ranks = np.arange(n_clean)
    return np.bincount(np.minimum(ranks * bin_count // n_clean, bin_count - 1), minlength=bin_count)


# -- token stream files ------------------------------------------------------


def write_token_stream(path, tokens: Iterable[int], binary: bool = True) -> None:
    arr = np.asarray(list(tokens) if not isinstance(tokens, np.ndarray) else tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise ParameterError("token ids must fit in an unsigned 32-bit integer")
    with open(path, "wb") as fh:
        if binary:
            fh.write(TOKEN_MAGIC)
            fh.write(arr.astype("<u4").tobytes())
        else:
            fh.write("".join(f"{int(t)}\n" for t in arr).encode("ascii"))


def ingest_token_stream(path, vocab_size: int) -> np.ndarray:
    """Read a binary (``TIDETOK1`` + LE uint32) or one-integer-per-line file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(TOKEN_MAGIC):
        payload = raw[len(TOKEN_MAGIC):]
        if len(payload) % 4:
            raise StreamParseError(f"{os.fspath(path)}: binary payload of {len(payload)} bytes is not a multiple of 4")
        ids = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    else:
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise StreamParseError(f"{os.fspath(path)}: not ASCII text and no binary magic") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        values = []
        for i, line in enumerate(lines):
            s = line.strip()
            if not s.isdigit():
                raise StreamParseError(f"{os.fspath(path)}: line {i + 1} is not an unsigned integer: {line!r}")
            values.append(int(s))
        ids = np.array(values, dtype=np.int64)
    bad = np.flatnonzero(ids >= vocab_size)
    if bad.size:
        off = int(bad[0])
        raise IngestionError(f"token id {int(ids[off])} at offset {off} >= vocab_size {vocab_size}", offset=off)
    return ids
