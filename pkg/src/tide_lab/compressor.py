"""Post-training compression of MemoryBlock tables: per-row quantization and
truncated-SVD factorization."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, model_checkpoint
from .errors import ParameterError
from .memory import static_memory_model
from .model import TideModel
from .trainer import evaluate_perplexity

SUPPORTED_BITS = (4, 8, 16)


@dataclass(frozen=True)
class CompressionSpec:
    """Either ``bits`` (quantize) or one of ``rank`` / ``percent`` (lowrank)."""

    mode: str
    bits: int | None = None
    rank: int | None = None
    percent: float | None = None
    targets: tuple[int, ...] | None = None  # block indices; None means all

    def __post_init__(self):
        if self.mode == "quantize":
            if self.bits not in SUPPORTED_BITS:
                raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        elif self.mode == "lowrank":
            if (self.rank is None) == (self.percent is None):
                raise ParameterError("lowrank needs exactly one of rank or percent")
            if self.percent is not None and not 0 <= self.percent < 100:
                raise ParameterError(f"percent must lie in [0, 100), got {self.percent}")
        else:
            raise ParameterError(f"unknown compression mode {self.mode!r}")

    def rank_for(self, n_rows: int, d_b: int) -> int:
        r = self.rank if self.rank is not None else rank_for_reduction(d_b, self.percent)
        if not 1 <= r <= min(n_rows, d_b):
            raise ParameterError(f"rank {r} outside [1, {min(n_rows, d_b)}]")
        return r


def max_saving_rank(vocab_size: int, d_b: int) -> int:
    """Largest r with (|V| + d_b) r <= |V| d_b."""
    if vocab_size < 1 or d_b < 1:
        raise ParameterError("vocab_size and d_b must be >= 1")
    return (vocab_size * d_b) // (vocab_size + d_b)


def rank_for_reduction(d_b: int, percent: float) -> int:
    """r = ceil((1 - p) d_b), guarded against float noise just above an integer."""
    x = (1.0 - percent / 100.0) * d_b
    return max(1, math.ceil(x - 1e-9))


# -- SVD --------------------------------------------------------------------


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n - 1 rounds of n/2 disjoint column pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        a = np.array(players[: n // 2])
        b = np.array(players[n // 2:][::-1])
        rounds.append((np.minimum(a, b), np.maximum(a, b)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(A: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns U (m, n), s (n,) descending, Vt (n, n) for m >= n; wide inputs are
    handled through the transpose. Each round rotates n/2 disjoint column
    pairs at once. Sweeps stop once every pair has
    |a_i . a_j| <= tol * ||a_i|| ||a_j||.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ParameterError("jacobi_svd expects a matrix")
    m, n = A.shape
    if m < n:
        U, s, Vt = jacobi_svd(A.T, tol, max_sweeps)
        return Vt.T, s, U.T
    n_pad = n + (n % 2)
    W = np.zeros((m, n_pad))
    W[:, :n] = A
    V = np.eye(n_pad)
    rounds = _round_robin(n_pad) if n_pad > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for i, j in rounds:
            wi, wj = W[:, i], W[:, j]
            alpha = np.einsum("mk,mk->k", wi, wi)
            beta = np.einsum("mk,mk->k", wj, wj)
            gamma = np.einsum("mk,mk->k", wi, wj)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            g = np.where(act, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(act, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            sn = np.where(act, c * t, 0.0)
            W[:, i], W[:, j] = c * wi - sn * wj, sn * wi + c * wj
            vi, vj = V[:, i], V[:, j]
            V[:, i], V[:, j] = c * vi - sn * vj, sn * vi + c * vj
        if not rotated:
            break
    W, V = W[:, :n], V[:n, :n]
    s = np.linalg.norm(W, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    W = W[:, order]
    V = V[:, order]
    U = np.divide(W, s, out=np.zeros_like(W), where=s > 0)
    return U, s, V.T


@dataclass
class LowRankFactors:
    U: np.ndarray  # (|V|, r), singular values folded in
    V: np.ndarray  # (r, d_b)
    singular_values: np.ndarray  # full spectrum

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.U @ self.V

    def tail_norm(self) -> float:
        return float(np.sqrt(np.sum(self.singular_values[self.rank:] ** 2)))


def lowrank_compress(table: np.ndarray, r: int) -> LowRankFactors:
    """Best rank-r Frobenius approximation, stored as U (|V| x r) and V (r x d_b)."""
    table = np.asarray(table, dtype=np.float64)
    if not 1 <= r <= min(table.shape):
        raise ParameterError(f"rank {r} outside [1, {min(table.shape)}]")
    U, s, Vt = jacobi_svd(table)
    return LowRankFactors(U[:, :r] * s[:r], Vt[:r].copy(), s)


# -- quantization -------------------------------------------------------------


@dataclass
class QuantizedTable:
    codes: np.ndarray  # integer codes in [-qmax, qmax]
    scales: np.ndarray  # per row; 0 for an all-zero row
    bits: int

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scales[:, None]

    def nbytes(self) -> int:
        return self.codes.size * self.bits // 8


def quantize_table(table: np.ndarray, bits: int) -> QuantizedTable:
    """Per-row symmetric linear quantization.

    scale_v = max|row_v| / qmax with qmax = 2^(bits-1) - 1; codes are
    round(x / scale). An all-zero row gets scale 0 and zero codes.
    """
    if bits not in SUPPORTED_BITS:
        raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    table = np.asarray(table, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    amax = np.max(np.abs(table), axis=1)
    scales = amax / qmax
    safe = np.where(scales > 0, scales, 1.0)
    codes = np.clip(np.rint(table / safe[:, None]), -qmax, qmax).astype(np.int32)
    codes[scales == 0] = 0
    return QuantizedTable(codes, scales, bits)


# -- model-level application ----------------------------------------------------


def _targets(model: TideModel, spec: CompressionSpec) -> list[int]:
    K = model.n_blocks
    if K < 1:
        raise ParameterError("model has no MemoryBlocks to compress")
    t = list(range(K)) if spec.targets is None else list(spec.targets)
    if any(not 0 <= k < K for k in t):
        raise ParameterError(f"block targets {t} outside [0, {K})")
    return t


SvdCache = dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]


def compress_block(
    table: np.ndarray, spec: CompressionSpec, svd: tuple | None = None
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Reconstructed table plus the records that store it. ``svd`` reuses a
    precomputed (U, s, Vt) of ``table``."""
    if spec.mode == "quantize":
        q = quantize_table(table, spec.bits)
        return q.dequantize(), {f"q{spec.bits}": q.codes.astype(np.float64), "scales": q.scales}
    r = spec.rank_for(*table.shape)
    if svd is None:
        f = lowrank_compress(table, r)
    else:
        U, s, Vt = svd
        f = LowRankFactors(U[:, :r] * s[:r], Vt[:r].copy(), s)
    return f.reconstruct(), {"U": f.U, "V": f.V}


def _pmap(fn, items, jobs: int) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def compress_model(
    model: TideModel, spec: CompressionSpec, jobs: int = 1, svd_cache: SvdCache | None = None
) -> tuple[TideModel, dict[str, np.ndarray]]:
    """Static-memory copy of ``model`` (tables hold M_k) with targeted tables
    replaced by their compressed reconstructions, and the compressed records
    keyed ``mem.k.{i}.*``.

    ``svd_cache`` maps block index to the SVD of its static table; missing
    entries are filled in, so a rank sweep factorizes each table once.
    """
    targets = _targets(model, spec)
    out = static_memory_model(model)
    static = {k: out.p(f"mem.k.{k}.table").data.copy() for k in targets}
    table = lambda k: static[k]
    if spec.mode == "lowrank" and svd_cache is not None:
        todo = [k for k in targets if k not in svd_cache]
        for k, f in zip(todo, _pmap(lambda k: jacobi_svd(table(k)), todo, jobs)):
            svd_cache[k] = f
    cache = svd_cache or {}
    results = _pmap(lambda k: compress_block(table(k), spec, cache.get(k)), targets, jobs)
    records: dict[str, np.ndarray] = {}
    for k, (recon, recs) in zip(targets, results):
        out.p(f"mem.k.{k}.table").data[...] = recon
        for suffix, arr in recs.items():
            records[f"mem.k.{k}.{suffix}"] = arr
    return out, records


def checkpoint_with_records(model: TideModel, spec: CompressionSpec, records: dict[str, np.ndarray]) -> Checkpoint:
    """Checkpoint of the static-memory model whose targeted dense tables are
    replaced by compressed records."""
    targets = _targets(model, spec)
    meta = {"compression": {**spec.__dict__, "targets": targets}}
    ckpt = model_checkpoint(static_memory_model(model), meta=meta)
    for k in targets:
        del ckpt.records[f"mem.k.{k}.table"]
    ckpt.records.update(records)
    return ckpt


def compressed_checkpoint(model: TideModel, spec: CompressionSpec, jobs: int = 1) -> Checkpoint:
    _, records = compress_model(model, spec, jobs)
    return checkpoint_with_records(model, spec, records)


def decompress_records(records: dict[str, np.ndarray], K: int) -> dict[str, np.ndarray]:
    """Rebuild dense ``mem.k.{i}.table`` records from compressed ones."""
    out = dict(records)
    for k in range(K):
        pre = f"mem.k.{k}."
        if pre + "U" in out:
            out[pre + "table"] = out.pop(pre + "U") @ out.pop(pre + "V")
            continue
        for bits in SUPPORTED_BITS:
            if f"{pre}q{bits}" in out:
                out[pre + "table"] = out.pop(f"{pre}q{bits}") * out.pop(pre + "scales")[:, None]
    return out


@dataclass
class CompressionRow:
    label: str
    rank: int | None
    bits: int | None
    ppl: float
    delta_ppl: float
    rel_delta: float
    stored_params: int


@dataclass
class CompressionSweep:
    base_ppl: float
    rows: list[CompressionRow] = field(default_factory=list)
    records: list[dict[str, np.ndarray]] = field(default_factory=list)


def _stored_params(model: TideModel, spec: CompressionSpec) -> int:
    V, d_b = model.p("mem.k.0.table").shape
    n = len(_targets(model, spec))
    if spec.mode == "quantize":
        return n * V * d_b
    return n * (V + d_b) * spec.rank_for(V, d_b)


def compressed_eval(
    model: TideModel,
    specs: list[CompressionSpec],
    eval_tokens: np.ndarray,
    seq_len: int,
    jobs: int = 1,
) -> CompressionSweep:
    """Perplexity change from swapping compressed MemoryBlock tables in."""
    base = evaluate_perplexity(model, eval_tokens, seq_len, "tide")
    sweep = CompressionSweep(base)
    V, d_b = model.p("mem.k.0.table").shape if model.n_blocks else (0, 0)
    cache: SvdCache = {}
    for spec in specs:
        cm, records = compress_model(model, spec, jobs, cache)
        sweep.records.append(records)
        ppl = evaluate_perplexity(cm, eval_tokens, seq_len, "tide")
        if spec.mode == "quantize":
            label, rank, bits = f"{spec.bits}bit", None, spec.bits
        else:
            rank = spec.rank_for(V, d_b)
            label = f"{spec.percent:g}%" if spec.percent is not None else f"r{rank}"
            bits = None
        sweep.rows.append(
            CompressionRow(label, rank, bits, ppl, ppl - base, (ppl - base) / base, _stored_params(model, spec))
        )
    return sweep
