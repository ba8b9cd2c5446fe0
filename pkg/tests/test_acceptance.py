"""End-to-end acceptance suite: one test per criterion, each recording a
PASS/FAIL line that is printed in the pytest terminal summary."""

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from tide_lab import autodiff as ad
from tide_lab.autodiff import Tensor
from tide_lab.cli import main
from tide_lab.compressor import CompressionSpec, compressed_eval, lowrank_compress, max_saving_rank
from tide_lab.corpus import FrequencyBinTable, ZipfSpec, build_bins, count_frequencies, zipf_probs, zipf_sample_corpus
from tide_lab.diagnostics import (
    KPathwayReport,
    all_layers_dropped_ppl,
    collapse_scan,
    expected_updates,
    grad_ratio_bound,
    iid_batches,
    k_pathway_audit,
    layer_drop_ablation,
    make_templates,
    max_separation,
    memory_separation_check,
    null_suppressed_ppl,
    occurrence_agreement,
    run_grad_audit,
)
from tide_lab.memory import (
    active_mass,
    forward_tide,
    memory_blocks,
    memory_norms_under_suppression,
    suppression_logit,
)
from tide_lab.model import ModelConfig, TideConfig, TideModel, forward_base
from tide_lab.trainer import BinLossReport, TrainConfig, Trainer, eval_per_bin, split_train_val

TOY = ModelConfig(vocab_size=512, d=64, n_layers=2, n_heads=4, d_ff=128, max_seq_len=64)
TOY_EXPONENT = 1.5
TOY_LENGTH = 2_000_000
TOY_STEPS = 5000
SEEDS = (0, 1, 2)


@dataclass
class SeedRun:
    seed: int
    base: Trainer
    tide: Trainer
    base_report: BinLossReport
    tide_report: BinLossReport
    val: np.ndarray
    bins: FrequencyBinTable
    kpath: KPathwayReport | None
    seconds: float

    def gap(self, tier: str) -> float:
        return self.base_report.tier_mean[tier] - self.tide_report.tier_mean[tier]


@pytest.fixture(scope="session")
def toy_runs() -> list[SeedRun]:
    """Baseline and K=4 TIDE toy models trained on the same Zipf stream per
    seed. Seed 0's TIDE run is audited for co-firing over its first 2,000
    steps (the audit only reads gradients)."""
    runs = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        toks = zipf_sample_corpus(ZipfSpec(TOY.vocab_size, TOY_EXPONENT, seed, TOY_LENGTH, 0.5))
        train, val = split_train_val(toks)
        bins = build_bins(count_frequencies(train, TOY.vocab_size), 10)
        cfg = TrainConfig(steps=TOY_STEPS, warmup_iters=200, seed=seed)
        base = Trainer(TideModel(TOY, seed=seed), train, cfg, "base")
        base.run()
        tide = Trainer(TideModel(TOY, TideConfig(n_blocks=4), seed=seed), train, cfg, "tide")
        kpath = k_pathway_audit(tide, 2000) if seed == 0 else None
        tide.run()
        runs.append(
            SeedRun(
                seed,
                base,
                tide,
                eval_per_bin(base.model, val, bins, 32, "base"),
                eval_per_bin(tide.model, val, bins, 32, "tide"),
                val,
                bins,
                kpath,
                time.perf_counter() - t0,
            )
        )
    return runs


# -- 1 -----------------------------------------------------------------------------


def _op_checks(rng) -> dict[str, float]:
    def p(shape, name, scale=1.0):
        return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)

    def proj(fn, shape):
        R = Tensor(rng.normal(size=shape))
        return lambda: ad.tsum(ad.mul(fn(), R))

    errs = {}
    a, b = p((3, 4), "a"), p((4, 2), "b")
    errs.update({f"matmul.{k}": v for k, v in ad.gradient_check(proj(lambda: a @ b, (3, 2)), [a, b]).items()})
    x, y = p((3, 4), "x"), p((3, 4), "y")
    errs.update({f"add_mul.{k}": v for k, v in ad.gradient_check(proj(lambda: ad.mul(x + y, y), (3, 4)), [x, y]).items()})
    errs["scale_transpose_reshape"] = ad.gradient_check(
        proj(lambda: ad.reshape(ad.transpose(ad.scale(x, 0.3), (1, 0)), (2, 6)), (2, 6)), [x]
    )["x"]
    g = p((4,), "g")
    errs.update({f"rmsnorm.{k}": v for k, v in ad.gradient_check(proj(lambda: ad.rmsnorm(x, g), (3, 4)), [x, g]).items()})
    errs["softmax"] = ad.gradient_check(proj(lambda: ad.softmax_lastdim(x), (3, 4)), [x])["x"]
    mask = np.triu(np.ones((3, 4), bool), 1)
    errs["masked_fill"] = ad.gradient_check(proj(lambda: ad.softmax_lastdim(ad.masked_fill(x, mask, -np.inf)), (3, 4)), [x])["x"]
    errs["silu"] = ad.gradient_check(proj(lambda: ad.silu(x), (3, 4)), [x])["x"]
    table = p((6, 4), "table")
    errs["embedding"] = ad.gradient_check(proj(lambda: ad.embedding_lookup(table, np.array([[1, 3, 1]])), (1, 3, 4)), [table])["table"]
    t = np.array([0, 3, 2])
    errs["cross_entropy_zloss"] = ad.gradient_check(lambda: ad.cross_entropy_with_zloss(x, t, 1e-2), [x])["x"]
    r = p((2, 3, 4), "r")
    errs["rope"] = ad.gradient_check(proj(lambda: ad.rope_apply(r, np.arange(3)), (2, 3, 4)), [r])["r"]
    errs.update({f"stack.{k}": v for k, v in ad.gradient_check(proj(lambda: ad.stack([x, y], -2), (3, 2, 4)), [x, y]).items()})
    z, M = p((3, 3), "z"), p((3, 2, 4), "M")
    errs.update({f"route_mix.{k}": v for k, v in ad.gradient_check(proj(lambda: ad.route_mix(ad.softmax_lastdim(z), M), (3, 4)), [z, M]).items()})
    return errs


def test_criterion_01_gradient_checks(record):
    t0 = time.perf_counter()
    errs = _op_checks(np.random.default_rng(0))
    cfg = ModelConfig(vocab_size=16, d=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=4)
    m = TideModel(cfg, TideConfig(n_blocks=2), seed=1)
    toks = np.random.default_rng(1).integers(0, 16, size=(2, 5))
    loss = lambda: ad.cross_entropy_with_zloss(forward_tide(m, toks[:, :-1]).logits, toks[:, 1:], 1e-6)
    errs.update({f"tide.{k}": v for k, v in ad.gradient_check(loss, m.parameters()).items()})
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and secs < 60
    record(1, ok, f"{len(errs)} gradients, worst {worst} rel err {errs[worst]:.2e}, {secs:.1f}s")
    assert ok, errs


# -- 2 -----------------------------------------------------------------------------


def test_criterion_02_degeneracy(record):
    rng = np.random.default_rng(2)
    m = TideModel(TOY, TideConfig(n_blocks=0), seed=3)
    same = 0
    for _ in range(100):
        toks = rng.integers(0, TOY.vocab_size, size=(rng.integers(1, 4), rng.integers(1, 33)))
        same += np.array_equal(forward_tide(m, toks).logits.data, forward_base(m, toks).logits.data)
    ok = same == 100
    record(2, ok, f"{same}/100 inputs bitwise equal")
    assert ok


# -- 3 -----------------------------------------------------------------------------


def test_criterion_03_null_suppression(record, toy_runs):
    eps = 1e-3
    worst = {}
    for K in (1, 4, 8):
        if K == 4:
            m = toy_runs[0].tide.model
        else:
            m = TideModel(TOY, TideConfig(n_blocks=K), seed=K)
            rng = np.random.default_rng(K)
            for k in range(K):
                m.p(f"mem.k.{k}.gain").data[...] = rng.uniform(0.1, 3.0, size=TOY.d)
        norms = memory_norms_under_suppression(m, suppression_logit(m, eps))
        assert norms.shape == (TOY.vocab_size,)
        worst[K] = float(norms.max())
    ok = all(v <= eps for v in worst.values())
    record(3, ok, "max ||m(v)|| " + ", ".join(f"K={k}: {v:.6e}" for k, v in worst.items()))
    assert ok


# -- 4 -----------------------------------------------------------------------------


def test_criterion_04_active_mass(record):
    worst = 0.0
    for K in (1, 2, 4, 8, 16):
        for s in np.linspace(-10, 20, 601):
            z = np.zeros((1, 1, K + 1))
            z[..., K] = s
            a = ad.softmax_lastdim(Tensor(z)).data[0, 0]
            worst = max(worst, abs(a[:K].sum() - active_mass(K, s)))
    ok = worst <= 1e-12
    record(4, ok, f"max |sum alpha - K/(K+e^s)| = {worst:.2e}")
    assert ok


# -- 5 -----------------------------------------------------------------------------


def test_criterion_05_occurrence_monte_carlo(record):
    t0 = time.perf_counter()
    V, B, T, tau = 256, 4, 32, 5000
    probs = zipf_probs(V, 1.0)
    m = TideModel(ModelConfig(vocab_size=V, d=8, n_layers=1, n_heads=1, d_ff=8, max_seq_len=T))
    audit = run_grad_audit(m, iid_batches(probs, B, T, seed=5), tau, arch="base", update=False)
    frac = float(occurrence_agreement(audit, probs, B, T).mean())
    BT = 8 * 2048
    rare = expected_updates(8.3e-9, 8, 2048, 2e11 / BT)
    common = expected_updates(8.3e-3, 8, 2048, 2e11 / BT)
    table_ok = f"{rare.exact:.3g}" == "1.66e+03" and f"{common.approx:.3g}" == "1.66e+09"
    secs = time.perf_counter() - t0
    ok = frac >= 0.95 and table_ok and audit.sparsity_violations == 0 and secs < 300
    record(5, ok, f"{frac:.3f} of tokens within 3 sigma; E[N] rare {rare.exact:.4g}, common approx {common.approx:.4g}; {secs:.0f}s")
    assert ok


# -- 6 -----------------------------------------------------------------------------


def test_criterion_06_ratio_bound_constants(record):
    r = grad_ratio_bound(8.3e-9, 8.3e-3, 8, 2048, 1.0, 1.0)
    ok = abs(r.eps_over_c - 1e-6) <= 1e-18 and round(r.c_times_bt) == 136 and r.kappa == 1.0 and r.kappa_exp_approx == 1.0
    record(6, ok, f"eps/c = {r.eps_over_c:.6g}, c*BT = {r.c_times_bt:.4f}, kappa = {r.kappa!r}")
    assert ok


# -- 7 -----------------------------------------------------------------------------


def test_criterion_07_k_pathway_cofiring(record, toy_runs):
    rep = toy_runs[0].kpath
    occ = int(rep.occurrences.sum())
    ok = occ > 0 and bool(np.all(rep.cofire == rep.occurrences)) and rep.absent_nonzero == 0
    record(7, ok, f"co-firing {int(rep.cofire.sum())}/{occ} occurrence events over 2000 steps; absent nonzero rows {rep.absent_nonzero}")
    assert ok


# -- 8 -----------------------------------------------------------------------------


def test_criterion_08_collapse_machinery(record, toy_runs):
    model = toy_runs[0].tide.model.copy()
    u, v = 500, 501
    model.p("embed").data[v] = model.p("embed").data[u]
    templates = make_templates(50, 12, TOY.vocab_size, seed=8, exclude=[u, v])
    rep = collapse_scan(model, templates, [(u, v)], 0.0)
    collapsed = rep.hidden_dist[0, 0] == 0 and rep.ffn_input_dist[0, 0] == 0
    ffn_equal = rep.ffn_output_dist[0, 0] == 0
    gain = memory_blocks(model)[0].gain.data
    top = max_separation(gain)
    errs, invariant = [], True
    for frac in (1e-6, 1e-3, 0.1, 0.5, 0.9, 1.0):
        sep = memory_separation_check(model, (u, v), C=frac * top, n_contexts=100, seed=8)
        errs.append(abs(sep.achieved - frac * top))
        invariant &= sep.context_invariant and sep.contexts_checked == 100
    ok = collapsed and ffn_equal and max(errs) <= 1e-9 and invariant
    record(8, ok, f"layer-0 delta {rep.hidden_dist[0, 0]}, FFN gap {rep.ffn_output_dist[0, 0]}, max separation error {max(errs):.2e}, context invariant {invariant}")
    assert ok


# -- 9 -----------------------------------------------------------------------------


def test_criterion_09_directional_outcome(record, toy_runs):
    rare_wins = sum(r.tide_report.tier_mean["rare"] <= r.base_report.tier_mean["rare"] for r in toy_runs)
    gaps = {t: float(np.mean([r.gap(t) for r in toy_runs])) for t in ("rare", "mid", "common")}
    secs = sum(r.seconds for r in toy_runs)
    ok = rare_wins >= 2 and gaps["rare"] >= gaps["common"] and secs < 1800
    per_seed = "; ".join(f"seed {r.seed}: rare gap {r.gap('rare'):+.4f}, common gap {r.gap('common'):+.4f}" for r in toy_runs)
    record(9, ok, f"TIDE rare CE <= baseline in {rare_wins}/3 seeds; mean gaps {gaps}; {per_seed}; {secs:.0f}s")
    assert ok


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_rank_bound_and_sweep(record, toy_runs):
    rank_ok = max_saving_rank(128_256, 2048) == 2015
    rng = np.random.default_rng(10)
    tail_err = 0.0
    for _ in range(5):
        A = rng.normal(size=(64, 16))
        for r in range(1, 17):
            f = lowrank_compress(A, r)
            tail_err = max(tail_err, abs(np.linalg.norm(A - f.reconstruct()) - f.tail_norm()))
    run = toy_runs[0]
    specs = [CompressionSpec("lowrank", percent=p) for p in (0, 30, 60, 90)]
    sweep = compressed_eval(run.tide.model, specs, run.val, 32)
    deltas = [row.delta_ppl for row in sweep.rows]
    zero_ok = abs(sweep.rows[0].rel_delta) <= 1e-6
    mono = all(b >= a for a, b in zip(deltas, deltas[1:]))
    ok = rank_ok and tail_err <= 1e-8 and zero_ok and mono
    record(10, ok, f"rank bound 2015 {rank_ok}; max tail error {tail_err:.1e}; dPPL at 0/30/60/90% = {', '.join(f'{d:.4g}' for d in deltas)}")
    assert ok


# -- 11 ----------------------------------------------------------------------------


def test_criterion_11_layer_drop(record, toy_runs):
    run = toy_runs[0]
    model = run.tide.model
    base, rows = layer_drop_ablation(model, run.val, 32)
    dropped = all_layers_dropped_ppl(model, run.val, 32)
    suppressed, s = null_suppressed_ppl(model, run.val, 32, 1e-9)
    rel = abs(dropped - suppressed) / dropped
    drops = [r.delta_ppl for r in rows]
    ok = len(rows) == TOY.n_layers and rel <= 1e-6 and drops[0] >= float(np.median(drops))
    record(11, ok, f"all-dropped ppl {dropped:.6f} vs suppressed {suppressed:.6f} (rel {rel:.1e}, s* {s:.2f}); per-layer dPPL {[round(d, 4) for d in drops]}")
    assert ok


# -- 12 ----------------------------------------------------------------------------

CLI_INI = """
[model]
vocab_size = 64
d = 16
n_heads = 2
d_ff = 32
max_seq_len = 16
[tide]
n_blocks = 2
[train]
batch_size = 4
seq_len = 16
steps = 24
warmup_iters = 4
checkpoint_every = 8
[corpus]
length = 8000
[diagnostics]
eval_seq_len = 16
audit_steps = 30
audit_batch = 2
audit_seq_len = 8
kpath_steps = 10
n_templates = 8
template_len = 6
collapse_pairs = 2
knn_queries = 6
knn_k = 5
"""

CLI_SEQUENCE = [
    ["corpus"],
    ["train"],
    ["audit", "--kpath"],
    ["collapse"],
    ["ablate"],
    ["router-stats"],
    ["knn"],
    ["compress"],
    ["footprint"],
]


def test_criterion_12_determinism_and_persistence(record, tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(CLI_INI)
    codes = []
    for name in ("a", "b"):
        for cmd in CLI_SEQUENCE:
            codes.append(main([*cmd, "--config", str(ini), "--out", str(tmp_path / name), "--jobs", "2" if name == "b" else "1"]))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    # resume from the step-8 checkpoint reproduces the uninterrupted run
    res = tmp_path / "resume"
    main(["corpus", "--config", str(ini), "--out", str(res)])
    codes.append(main(["train", "--config", str(ini), "--out", str(res), "--resume", str(tmp_path / "a" / "ckpt_000008.ckpt")]))
    resume_differ = [f for f in ("model.ckpt", "ckpt_000016.ckpt", "ckpt_000024.ckpt", "eval_bins.csv") if (res / f).read_bytes() != (tmp_path / "a" / f).read_bytes()]
    # a fresh directory holds no metrics from before the checkpoint
    if (res / "metrics.csv").read_text().splitlines()[1:] != (tmp_path / "a" / "metrics.csv").read_text().splitlines()[9:]:
        resume_differ.append("metrics.csv")
    # the trainer-level round trip, on the toy architecture
    toks = zipf_sample_corpus(ZipfSpec(TOY.vocab_size, TOY_EXPONENT, 0, 20_000, 0.5))
    cfg = TrainConfig(steps=30, warmup_iters=5)
    full = Trainer(TideModel(TOY, TideConfig(n_blocks=4)), toks, cfg)
    full.run()
    part = Trainer(TideModel(TOY, TideConfig(n_blocks=4)), toks, cfg)
    part.run(steps=13)
    part.save(tmp_path / "p.ckpt")
    resumed = Trainer.from_checkpoint(str(tmp_path / "p.ckpt"), toks)
    resumed.run()
    same_hist = [(h.loss, h.grad_norm) for h in full.history] == [(h.loss, h.grad_norm) for h in part.history + resumed.history]
    same_params = all(np.array_equal(full.model.p(n).data, resumed.model.p(n).data) for n in full.model.params)
    ok = all(c == 0 for c in codes) and not differ and not resume_differ and same_hist and same_params
    record(12, ok, f"{len(files)} CLI outputs compared, {len(differ)} differ; exit codes {sorted(set(codes))}; CLI resume diffs {resume_differ}; trainer resume bitwise {same_hist and same_params}")
    assert ok, (differ, resume_differ, codes)
