"""Numerical probes of gradient starvation, contextual collapse, and the
memory pathway, plus the post-training studies (layer drop, router
statistics, embedding distances, nearest-neighbour overlap)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import FrequencyBinTable
from .errors import ParameterError, TemplateError
from .memory import (
    build_memory_tensor,
    forward_tide,
    memory_block_lookup,
    memory_blocks,
    suppression_logit,
)
from .model import TideModel, ffn, ffn_lipschitz_upper, forward_base, layer_names
from .trainer import TrainConfig, Trainer, evaluate_perplexity

# -- analytic starvation formulas -------------------------------------------


@dataclass
class ExpectedUpdates:
    exact: float
    approx: float
    approx_rel_error: float


def expected_updates(f_v: float, B: int, T: int, tau: float) -> ExpectedUpdates:
    """E[N_v] = tau (1 - (1 - f_v)^{BT}) and its small-f form tau f_v BT."""
    if not (0 < f_v <= 1) or B <= 0 or T <= 0 or tau <= 0:
        raise ParameterError("need 0 < f_v <= 1 and positive B, T, tau")
    n = B * T
    p = 1.0 if f_v == 1 else -math.expm1(n * math.log1p(-f_v))
    exact = tau * p
    approx = tau * f_v * n
    return ExpectedUpdates(exact, approx, abs(approx - exact) / exact)


def occurrence_probability(f: np.ndarray, B: int, T: int) -> np.ndarray:
    """P[v in batch] = 1 - (1 - f_v)^{BT}, elementwise."""
    f = np.asarray(f, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(f >= 1.0, 1.0, -np.expm1(B * T * np.log1p(-np.minimum(f, 1.0 - 1e-300))))


@dataclass
class RatioBound:
    bound: float
    kappa: float
    kappa_exp_approx: float
    c_times_bt: float
    eps_over_c: float


def grad_ratio_bound(eps_f: float, c: float, B: int, T: int, G2: float, G2min: float) -> RatioBound:
    """Upper bound eps*BT*G^2 / (kappa*G_min^2) on the rare/common ratio of
    cumulative squared gradient, with kappa = 1 - (1 - c)^{BT}."""
    if not (0 < eps_f <= c < 1):
        raise ParameterError(f"need 0 < eps <= c < 1, got eps={eps_f}, c={c}")
    if B <= 0 or T <= 0 or not G2 > 0 or not G2min > 0:
        raise ParameterError("B, T, G2 and G2min must be positive")
    n = B * T
    kappa = -math.expm1(n * math.log1p(-c))
    return RatioBound(
        bound=eps_f * n * G2 / (kappa * G2min),
        kappa=kappa,
        kappa_exp_approx=-math.expm1(-c * n),
        c_times_bt=c * n,
        eps_over_c=eps_f / c,
    )


# -- empirical gradient audits ----------------------------------------------


def iid_batches(probs: np.ndarray, B: int, T: int, seed: int) -> Callable[[], np.ndarray]:
    """Sampler of (B, T+1) batches whose positions are i.i.d. draws."""
    rng = np.random.default_rng(seed)
    V = len(probs)

    def draw() -> np.ndarray:
        return rng.choice(V, size=(B, T + 1), p=probs)

    return draw


def table_names(model: TideModel) -> list[str]:
    return ["embed"] + [f"mem.k.{k}.table" for k in range(model.n_blocks)]


@dataclass
class GradAudit:
    """Per-token accumulators over an audited run.

    ``sq_norm[name][v]`` is sum_s ||grad of row v of table name||^2;
    ``occurrences[v]`` counts steps whose input positions contain v.
    ``G2``/``G2_min`` are the max / min per-step squared row norm over
    occurrence events of the primary table.
    """

    steps: int
    sq_norm: dict[str, np.ndarray]
    occurrences: np.ndarray
    G2: float = 0.0
    G2_min: float = math.inf
    sparsity_violations: int = 0

    def kappa(self, f: np.ndarray, B: int, T: int) -> np.ndarray:
        return occurrence_probability(f, B, T)


def _row_sq_norms(g: np.ndarray) -> np.ndarray:
    return np.einsum("vd,vd->v", g, g)


def run_grad_audit(
    model: TideModel,
    batches: Callable[[], np.ndarray],
    steps: int,
    cfg: TrainConfig | None = None,
    arch: str = "tide",
    update: bool = True,
) -> GradAudit:
    """Train (or, with ``update=False``, only differentiate) for ``steps``
    batches and accumulate per-row squared gradient norms of every
    embedding table. Rows of tokens absent from a batch must receive a
    bitwise-zero gradient; any exception is counted."""
    cfg = cfg or TrainConfig(steps=max(steps, 1), warmup_iters=0)
    V = model.config.vocab_size
    names = table_names(model) if arch == "tide" else ["embed"]
    audit = GradAudit(0, {n: np.zeros(V) for n in names}, np.zeros(V, dtype=np.int64))
    from .trainer import AdamState, train_step

    state = AdamState.zeros(model.params)

    def hook(m: TideModel, batch: np.ndarray, grads: dict) -> None:
        present = np.bincount(batch[:, :-1].ravel(), minlength=V) > 0
        audit.occurrences += present
        for n in names:
            sq = _row_sq_norms(grads[n])
            audit.sq_norm[n] += sq
            audit.sparsity_violations += int(np.count_nonzero(sq[~present]))
            if n == "embed" and present.any():
                audit.G2 = max(audit.G2, float(sq[present].max()))
                audit.G2_min = min(audit.G2_min, float(sq[present].min()))
        audit.steps += 1

    for s in range(steps):
        batch = batches()
        if update:
            train_step(model, batch, state, cfg, s, arch, hook)
        else:
            model.zero_grad()
            fwd = forward_tide if arch == "tide" else forward_base
            loss = ad.cross_entropy_with_zloss(fwd(model, batch[:, :-1]).logits, batch[:, 1:], cfg.z_coeff)
            ad.backward(loss)
            hook(model, batch, {n: p.grad for n, p in model.params.items()})
    return audit


def occurrence_agreement(audit: GradAudit, probs: np.ndarray, B: int, T: int, n_sigma: float = 3.0) -> np.ndarray:
    """Per token: is N_v within n_sigma binomial std of tau * P[v in batch]?"""
    p = occurrence_probability(probs, B, T)
    mean = audit.steps * p
    sd = np.sqrt(audit.steps * p * (1.0 - p))
    return np.abs(audit.occurrences - mean) <= n_sigma * sd


@dataclass
class KPathwayReport:
    tokens: np.ndarray
    occurrences: np.ndarray
    cofire: np.ndarray  # steps with all K rows nonzero, per token
    primary_sq: np.ndarray
    memory_sq: np.ndarray  # (n_tokens, K)
    absent_nonzero: int  # absent-token rows with nonzero grad, any table
    G2_min_memory: float = math.inf

    @property
    def cofire_rate(self) -> float:
        total = int(self.occurrences.sum())
        return float(self.cofire.sum() / total) if total else 1.0

    @property
    def amplification(self) -> np.ndarray:
        """sum_k accumulated memory signal / primary-table signal, per token."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.memory_sq.sum(axis=1) / self.primary_sq


def k_pathway_audit(trainer: Trainer, steps: int, tokens: Sequence[int] | None = None) -> KPathwayReport:
    """Run ``steps`` training steps, checking on each that every occurrence
    of a monitored token drives a nonzero gradient into its row of all K
    memory tables, and that absent tokens' rows stay exactly zero."""
    model = trainer.model
    K = model.n_blocks
    if K < 1:
        raise ParameterError("k_pathway_audit needs a model with n_blocks >= 1")
    V = model.config.vocab_size
    toks = np.arange(V) if tokens is None else np.asarray(tokens, dtype=np.int64)
    names = [f"mem.k.{k}.table" for k in range(K)]
    rep = KPathwayReport(
        toks,
        np.zeros(len(toks), dtype=np.int64),
        np.zeros(len(toks), dtype=np.int64),
        np.zeros(len(toks)),
        np.zeros((len(toks), K)),
        0,
    )

    def hook(m: TideModel, batch: np.ndarray, grads: dict) -> None:
        present = np.bincount(batch[:, :-1].ravel(), minlength=V) > 0
        prim = _row_sq_norms(grads["embed"])
        mem = np.stack([_row_sq_norms(grads[n]) for n in names], axis=1)
        rep.absent_nonzero += int(np.count_nonzero(prim[~present]) + np.count_nonzero(mem[~present]))
        here = present[toks]
        rep.occurrences += here
        rep.cofire += here & np.all(mem[toks] > 0, axis=1)
        rep.primary_sq += prim[toks]
        rep.memory_sq += mem[toks]
        if here.any():
            rep.G2_min_memory = min(rep.G2_min_memory, float(mem[toks][here].min()))

    trainer.run(steps, grad_hook=hook)
    return rep


# -- contextual collapse ----------------------------------------------------

SLOT = -1


def make_templates(
    n: int, length: int, vocab_size: int, seed: int = 0, slot: int | None = None, exclude: Sequence[int] = ()
) -> list[np.ndarray]:
    """Random context sequences with one slot (marked ``SLOT``)."""
    rng = np.random.default_rng(seed)
    allowed = np.setdiff1d(np.arange(vocab_size), np.asarray(exclude, dtype=np.int64))
    out = []
    for _ in range(n):
        t = rng.choice(allowed, size=length)
        t[length - 1 if slot is None else slot] = SLOT
        out.append(t.astype(np.int64))
    return out


def _fill(templates: Sequence[np.ndarray], token: int) -> tuple[np.ndarray, np.ndarray]:
    rows, slots = [], []
    for t in templates:
        where = np.flatnonzero(np.asarray(t) == SLOT)
        if where.size != 1:
            raise TemplateError(f"template must hold exactly one slot, found {where.size}")
        row = np.array(t, dtype=np.int64)
        row[where[0]] = token
        rows.append(row)
        slots.append(where[0])
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise TemplateError("templates must share one length")
    return np.stack(rows), np.array(slots)


@dataclass
class CollapseReport:
    pairs: list[tuple[int, int]]
    hidden_dist: np.ndarray  # (n_pairs, L+1) mean ||h_u - h_v|| at the slot
    ffn_input_dist: np.ndarray  # (n_pairs, L) max over templates of ||n~_u - n~_v||
    ffn_output_dist: np.ndarray  # (n_pairs, L) max over templates
    memory_dist: np.ndarray  # (n_pairs, K)
    lipschitz: np.ndarray  # (L,) certified FFN bounds
    delta_tol: float
    collapsed: np.ndarray = field(default=None)  # (n_pairs, L+1) bool

    def __post_init__(self):
        if self.collapsed is None:
            self.collapsed = self.hidden_dist <= self.delta_tol


def _slot_trace(model: TideModel, rows: np.ndarray, slots: np.ndarray, arch: str):
    with ad.no_grad():
        fwd = forward_tide if arch == "tide" else forward_base
        tr = fwd(model, rows, trace=True)
    idx = np.arange(len(rows))
    hidden = np.stack([h[idx, slots] for h in tr.hidden])  # (L+1, n, d)
    normed = [n[idx, slots] for n in tr.normed]
    return hidden, normed


def _ffn_apply(model: TideModel, layer: int, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return ffn(Tensor(x), model, layer).data


def collapse_scan(
    model: TideModel,
    templates: Sequence[np.ndarray],
    pairs: Sequence[tuple[int, int]],
    delta_tol: float,
    arch: str = "tide",
) -> CollapseReport:
    """Per-layer hidden-state distances at the slot for each token pair."""
    L = model.config.n_layers
    K = model.n_blocks if arch == "tide" else 0
    hd = np.zeros((len(pairs), L + 1))
    fin = np.zeros((len(pairs), L))
    fout = np.zeros((len(pairs), L))
    md = np.zeros((len(pairs), K))
    blocks = memory_blocks(model) if K else []
    for i, (u, v) in enumerate(pairs):
        ru, su = _fill(templates, u)
        rv, sv = _fill(templates, v)
        hu, nu = _slot_trace(model, ru, su, arch)
        hv, nv = _slot_trace(model, rv, sv, arch)
        hd[i] = np.linalg.norm(hu - hv, axis=-1).mean(axis=1)
        for l in range(L):
            fin[i, l] = np.linalg.norm(nu[l] - nv[l], axis=-1).max()
            fout[i, l] = np.linalg.norm(_ffn_apply(model, l, nu[l]) - _ffn_apply(model, l, nv[l]), axis=-1).max()
        with ad.no_grad():
            for k, b in enumerate(blocks):
                M = memory_block_lookup(b, np.array([u, v]), model.config.norm_eps).data
                md[i, k] = np.linalg.norm(M[0] - M[1])
    lip = np.array([ffn_lipschitz_upper(model, l) for l in range(L)])
    return CollapseReport(list(pairs), hd, fin, fout, md, lip, delta_tol)


@dataclass
class FfnBoundReport:
    layer: int
    delta: float  # largest FFN-input gap over the probed contexts
    ffn_gap: float  # largest FFN-output gap
    lipschitz: float
    target_separation: float
    lipschitz_holds: bool
    floor: float  # (C - L*delta)/2, or 0 when the bound is vacuous
    vacuous: bool


def ffn_bound_from_inputs(model: TideModel, layer: int, xu: np.ndarray, xv: np.ndarray, C: float) -> FfnBoundReport:
    xu, xv = np.atleast_2d(xu), np.atleast_2d(xv)
    gaps_in = np.linalg.norm(xu - xv, axis=-1)
    gaps_out = np.linalg.norm(_ffn_apply(model, layer, xu) - _ffn_apply(model, layer, xv), axis=-1)
    lip = ffn_lipschitz_upper(model, layer)
    holds = bool(np.all(gaps_out <= lip * gaps_in))
    delta = float(gaps_in.max())
    vacuous = C <= lip * delta
    floor = 0.0 if vacuous else (C - lip * delta) / 2.0
    return FfnBoundReport(layer, delta, float(gaps_out.max()), lip, C, holds, floor, vacuous)


def ffn_lower_bound_check(
    model: TideModel,
    layer: int,
    pair: tuple[int, int],
    C: float,
    templates: Sequence[np.ndarray],
    arch: str = "tide",
) -> FfnBoundReport:
    """Check ||FFN(n~_u) - FFN(n~_v)|| <= L_FFN * delta on every template and
    report the approximation floor (C - L_FFN * delta) / 2 for any target
    with separation C."""
    u, v = pair
    ru, su = _fill(templates, u)
    rv, sv = _fill(templates, v)
    _, nu = _slot_trace(model, ru, su, arch)
    _, nv = _slot_trace(model, rv, sv, arch)
    return ffn_bound_from_inputs(model, layer, nu[layer], nv[layer], C)


# -- memory separation ------------------------------------------------------


def max_separation(gain: np.ndarray) -> float:
    return 2.0 * float(np.max(np.abs(gain))) * math.sqrt(len(gain))


def separated_rows(gain: np.ndarray, C: float, row_scale: float = 1e6) -> tuple[np.ndarray, np.ndarray]:
    """Two table rows whose RMSNorm outputs (with this gain) are C apart.

    Row u points along the largest-|gain| axis j; row v is rotated by theta
    towards another axis i. The output distance grows monotonically from 0
    (theta = 0) to 2 |g_j| sqrt(d) (theta = pi), and theta is found by
    bisection. Rows are scaled up so the RMSNorm eps is negligible.
    """
    g = np.asarray(gain, dtype=np.float64)
    d = len(g)
    if d < 2:
        raise ParameterError("separation construction needs d_b >= 2")
    top = max_separation(g)
    if not 0 < C <= top:
        raise ParameterError(f"separation {C} outside achievable range (0, {top}]")
    j = int(np.argmax(np.abs(g)))
    i = (j + 1) % d
    rd = math.sqrt(d)

    def dist(theta: float) -> float:
        c, s = math.cos(theta), math.sin(theta)
        return rd * math.hypot(g[j] * (1.0 - c), g[i] * s)

    lo, hi = 0.0, math.pi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dist(mid) < C:
            lo = mid
        else:
            hi = mid
    theta = hi if abs(dist(hi) - C) <= abs(dist(lo) - C) else lo
    yu = np.zeros(d)
    yv = np.zeros(d)
    yu[j] = rd
    yv[j] = rd * math.cos(theta)
    yv[i] = rd * math.sin(theta)
    return row_scale * yu, row_scale * yv


@dataclass
class SeparationReport:
    pair: tuple[int, int]
    measured: np.ndarray  # ||M_k(u) - M_k(v)|| per block
    requested: float | None = None
    achieved: float | None = None
    context_invariant: bool = True
    contexts_checked: int = 0


def memory_separation_check(
    model: TideModel,
    pair: tuple[int, int],
    C: float | None = None,
    block: int = 0,
    n_contexts: int = 100,
    context_len: int = 8,
    seed: int = 0,
) -> SeparationReport:
    """Measure per-block separation, optionally assign rows E_k[u], E_k[v] to
    reach ``C`` (on a copy of the model), and confirm that M_k(u) - M_k(v)
    is bitwise identical across random contexts."""
    u, v = pair
    if u == v:
        raise ParameterError("pair must hold two distinct tokens")
    work = model
    if C is not None:
        work = model.copy()
        b = memory_blocks(work)[block]
        scale = 1.0 if b.static else 1e6
        ru, rv = separated_rows(b.gain.data, C, scale)
        if b.static:  # store the normalized outputs themselves
            ru, rv = b.gain.data * ru, b.gain.data * rv
        b.table.data[u] = ru
        b.table.data[v] = rv
    eps = work.config.norm_eps
    blocks = memory_blocks(work)
    with ad.no_grad():
        measured = np.array(
            [np.linalg.norm(np.subtract(*memory_block_lookup(b, np.array([u, v]), eps).data)) for b in blocks]
        )
        rng = np.random.default_rng(seed)
        V = work.config.vocab_size
        ref = None
        invariant = True
        for _ in range(n_contexts):
            ctx = rng.integers(0, V, size=(2, context_len))
            pos_u, pos_v = rng.integers(0, context_len, size=2)
            ctx[0, pos_u] = u
            ctx[1, pos_v] = v
            M = build_memory_tensor(blocks, ctx, eps).data
            diff = M[0, pos_u] - M[1, pos_v]
            if ref is None:
                ref = diff
            elif not np.array_equal(diff, ref):
                invariant = False
    rep = SeparationReport((u, v), measured, context_invariant=invariant, contexts_checked=n_contexts)
    if C is not None:
        rep.requested = C
        rep.achieved = float(measured[block])
    return rep


# -- post-training studies --------------------------------------------------


@dataclass
class LayerDropRow:
    layer: int
    ppl: float
    delta_ppl: float
    pct: float


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def layer_drop_ablation(model: TideModel, eval_tokens: np.ndarray, seq_len: int, jobs: int = 1) -> tuple[float, list[LayerDropRow]]:
    """Zero the routed memory at one layer at a time; report perplexity change."""
    base = evaluate_perplexity(model, eval_tokens, seq_len, "tide")

    def one(l: int) -> LayerDropRow:
        ppl = evaluate_perplexity(model, eval_tokens, seq_len, "tide", drop_layers={l})
        return LayerDropRow(l, ppl, ppl - base, 100.0 * (ppl - base) / base)

    return base, _pmap(one, range(model.config.n_layers), jobs)


def all_layers_dropped_ppl(model: TideModel, eval_tokens: np.ndarray, seq_len: int) -> float:
    return evaluate_perplexity(
        model, eval_tokens, seq_len, "tide", drop_layers=set(range(model.config.n_layers))
    )


def null_suppressed_ppl(model: TideModel, eval_tokens: np.ndarray, seq_len: int, eps: float) -> tuple[float, float]:
    """Perplexity with every router forced to the suppression logit s*(eps)."""
    s = suppression_logit(model, eps)
    return evaluate_perplexity(model, eval_tokens, seq_len, "tide", forced_null_logit=s), s


@dataclass
class RouterStats:
    mean_alpha: np.ndarray  # (L, n_bins, K+1)
    counts: np.ndarray  # (n_bins,)


def router_stats(model: TideModel, eval_tokens: np.ndarray, bins: FrequencyBinTable, seq_len: int) -> RouterStats:
    """Mean routing weight per layer and slot, stratified by the frequency bin
    of the token at each position (null slot last)."""
    K, L, nb = model.n_blocks, model.config.n_layers, bins.bin_count
    sums = np.zeros((L, nb, K + 1))
    counts = np.zeros(nb, dtype=np.int64)
    toks = np.asarray(eval_tokens, dtype=np.int64)
    n_win = len(toks) // seq_len
    with ad.no_grad():
        for start in range(0, n_win, 16):
            rows = np.arange(start, min(n_win, start + 16)) * seq_len
            win = toks[rows[:, None] + np.arange(seq_len)[None, :]]
            tr = forward_tide(model, win, trace=True)
            b = bins.bins[win].ravel()
            ok = b >= 0
            counts += np.bincount(b[ok], minlength=nb)
            for l in range(L):
                a = tr.alphas[l].reshape(-1, K + 1)[ok]
                for k in range(K + 1):
                    sums[l, :, k] += np.bincount(b[ok], weights=a[:, k], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts[None, :, None]
    return RouterStats(mean, counts)


def model_tables(model: TideModel) -> dict[str, np.ndarray]:
    out = {"E": model.p("embed").data}
    for k in range(model.n_blocks):
        out[f"M{k + 1}"] = model.p(f"mem.k.{k}.table").data
    return out


def embedding_cosine_matrix(tables: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise mean cosine distance 1 - mean_v cos(A[v], B[v]).

    Rows where either table is zero are skipped; the second return value
    counts them per pair.
    """
    tabs = [np.asarray(t, dtype=np.float64) for t in tables]
    V = tabs[0].shape[0]
    if any(t.shape[0] != V for t in tabs):
        raise ParameterError("all tables must share the vocabulary axis")
    norms = [np.linalg.norm(t, axis=1) for t in tabs]
    n = len(tabs)
    dist = np.zeros((n, n))
    skipped = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(a, n):
            ok = (norms[a] > 0) & (norms[b] > 0)
            if not ok.any():
                raise ParameterError(f"tables {a} and {b} have no row pair with nonzero norm")
            cos = np.einsum("vd,vd->v", tabs[a][ok], tabs[b][ok]) / (norms[a][ok] * norms[b][ok])
            dist[a, b] = dist[b, a] = 1.0 - float(np.mean(cos))
            skipped[a, b] = skipped[b, a] = int(V - ok.sum())
    return dist, skipped


def cosine_neighbors(table: np.ndarray, queries: Sequence[int], k_nn: int) -> np.ndarray:
    """Top-k rows by cosine similarity to each query, excluding the query;
    ties go to the lower id."""
    table = np.asarray(table, dtype=np.float64)
    V = table.shape[0]
    if not 0 < k_nn < V:
        raise ParameterError(f"k_nn must lie in [1, {V - 1}]")
    norms = np.linalg.norm(table, axis=1)
    unit = np.divide(table, norms[:, None], out=np.zeros_like(table), where=norms[:, None] > 0)
    out = np.zeros((len(queries), k_nn), dtype=np.int64)
    ids = np.arange(V)
    for i, q in enumerate(queries):
        sim = unit @ unit[q]
        sim[q] = -np.inf
        order = np.lexsort((ids, -sim))
        out[i] = order[:k_nn]
    return out


@dataclass
class NeighborReport:
    queries: np.ndarray
    neighbors: dict[str, np.ndarray]  # table name -> (n_queries, k_nn)
    jaccard: dict[str, np.ndarray]  # memory table name -> (n_queries,)


def jaccard(a, b) -> float:
    a, b = set(int(x) for x in a), set(int(x) for x in b)
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def knn_jaccard(tables: dict[str, np.ndarray], queries: Sequence[int], k_nn: int = 10, primary: str = "E") -> NeighborReport:
    """Jaccard overlap of each table's top-k cosine neighbours with the
    primary table's, per query."""
    q = np.asarray(queries, dtype=np.int64)
    nbrs = {name: cosine_neighbors(t, q, k_nn) for name, t in tables.items()}
    base = nbrs[primary]
    jac = {
        name: np.array([jaccard(base[i], n[i]) for i in range(len(q))])
        for name, n in nbrs.items()
        if name != primary
    }
    return NeighborReport(q, nbrs, jac)


def random_jaccard_expectation(V: int, k_nn: int) -> float:
    """E[J] for two independent uniform k-subsets of V - 1 candidates."""
    X = stats.hypergeom(V - 1, k_nn, k_nn)
    xs = np.arange(0, k_nn + 1)
    return float(np.sum(X.pmf(xs) * xs / (2 * k_nn - xs)))


def embedding_norms_by_bin(table: np.ndarray, bins: FrequencyBinTable) -> np.ndarray:
    """Mean row norm per frequency bin (NaN for empty bins)."""
    norms = np.linalg.norm(table, axis=1)
    ok = bins.bins >= 0
    s = np.bincount(bins.bins[ok], weights=norms[ok], minlength=bins.bin_count)
    c = np.bincount(bins.bins[ok], minlength=bins.bin_count)
    with np.errstate(invalid="ignore", divide="ignore"):
        return s / c
