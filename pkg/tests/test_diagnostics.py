import decimal
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tide_lab import autodiff as ad
from tide_lab.corpus import FrequencyBinTable, build_bins, zipf_probs
from tide_lab.diagnostics import (
    SLOT,
    collapse_scan,
    cosine_neighbors,
    embedding_cosine_matrix,
    expected_updates,
    ffn_bound_from_inputs,
    ffn_lower_bound_check,
    grad_ratio_bound,
    iid_batches,
    jaccard,
    k_pathway_audit,
    knn_jaccard,
    layer_drop_ablation,
    make_templates,
    max_separation,
    memory_separation_check,
    model_tables,
    occurrence_agreement,
    occurrence_probability,
    random_jaccard_expectation,
    router_stats,
    run_grad_audit,
    separated_rows,
)
from tide_lab.errors import ParameterError, TemplateError
from tide_lab.memory import memory_block_lookup, memory_blocks, static_memory_model
from tide_lab.model import ModelConfig, TideConfig, TideModel, layer_names
from tide_lab.trainer import TrainConfig, Trainer

TINY = ModelConfig(vocab_size=16, d=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)


# -- analytic formulas -------------------------------------------------------------


def test_expected_updates_reference_instantiations():
    B, T = 8, 2048
    tau = 2e11 / (B * T)
    rare = expected_updates(8.3e-9, B, T, tau)
    assert f"{rare.exact:.3g}" == "1.66e+03"
    assert f"{rare.approx:.3g}" == "1.66e+03"
    assert rare.approx_rel_error < 1e-4
    common = expected_updates(8.3e-3, B, T, tau)
    assert f"{common.approx:.3g}" == "1.66e+09"
    # the exact count saturates at tau since the token is in essentially every batch
    assert abs(common.exact - tau) <= 1e-9 * tau
    assert common.approx_rel_error > 100


def test_expected_updates_certain_token():
    assert expected_updates(1.0, 4, 32, 5000).exact == 5000


@pytest.mark.parametrize("args", [(0.0, 1, 1, 1), (1.5, 1, 1, 1), (0.1, 0, 1, 1), (0.1, 1, -1, 1), (0.1, 1, 1, 0)])
def test_expected_updates_rejects(args):
    with pytest.raises(ParameterError):
        expected_updates(*args)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-12, 0.5), st.integers(1, 64), st.integers(1, 256))
def test_occurrence_probability_matches_direct_formula(f, B, T):
    p = float(occurrence_probability(np.array([f]), B, T)[0])
    with decimal.localcontext() as ctx:
        ctx.prec = 60
        direct = float(1 - (1 - decimal.Decimal(f)) ** (B * T))
    assert abs(p - direct) <= 1e-12 * direct
    assert 0 <= p <= 1
    assert abs(expected_updates(f, B, T, 7.0).exact - 7.0 * p) <= 1e-12 * 7.0


def test_ratio_bound_reference_constants():
    r = grad_ratio_bound(8.3e-9, 8.3e-3, 8, 2048, 1.0, 1.0)
    assert abs(r.eps_over_c - 1e-6) <= 1e-18
    assert round(r.c_times_bt) == 136
    assert r.kappa_exp_approx == -math.expm1(-r.c_times_bt)
    # 1 - e^-136 is 1 in double precision; so is the exact kappa
    assert r.kappa == 1.0 and r.kappa_exp_approx == 1.0


def test_ratio_bound_symmetric_degenerate_case():
    c, B, T = 0.01, 4, 8
    r = grad_ratio_bound(c, c, B, T, 2.5, 2.5)
    assert abs(r.bound - B * T * c / r.kappa) <= 1e-12


def test_ratio_bound_scales_with_constants():
    a = grad_ratio_bound(1e-6, 1e-2, 4, 8, 1.0, 1.0)
    b = grad_ratio_bound(1e-6, 1e-2, 4, 8, 4.0, 2.0)
    assert abs(b.bound / a.bound - 2.0) <= 1e-12


@pytest.mark.parametrize("eps,c", [(0.2, 0.1), (0.0, 0.1), (0.1, 1.0)])
def test_ratio_bound_rejects(eps, c):
    with pytest.raises(ParameterError):
        grad_ratio_bound(eps, c, 4, 8, 1.0, 1.0)


# -- gradient audits -------------------------------------------------------------------


def test_grad_audit_sparsity_and_zero_frequency_token():
    probs = zipf_probs(16, 1.0)
    probs[5] = 0.0
    probs /= probs.sum()
    m = TideModel(TINY, TideConfig(n_blocks=2))
    audit = run_grad_audit(m, iid_batches(probs, 2, 8, seed=0), steps=30)
    assert audit.sparsity_violations == 0
    assert audit.occurrences[5] == 0
    for table in audit.sq_norm.values():
        assert table[5] == 0.0
    np.testing.assert_array_equal(audit.sq_norm["embed"] > 0, audit.occurrences > 0)
    assert np.all(audit.occurrences <= audit.steps)
    assert 0 < audit.G2_min <= audit.G2


def test_occurrence_agreement_on_small_run():
    probs = zipf_probs(32, 1.0)
    m = TideModel(ModelConfig(vocab_size=32, d=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=8))
    audit = run_grad_audit(m, iid_batches(probs, 2, 4, seed=1), steps=400, arch="base", update=False)
    assert occurrence_agreement(audit, probs, 2, 4).mean() >= 0.9


def test_k_pathway_cofiring_on_short_run():
    toks = np.random.default_rng(0).integers(0, 12, size=2000)  # ids 12..15 never occur
    m = TideModel(TINY, TideConfig(n_blocks=3))
    tr = Trainer(m, toks, TrainConfig(batch_size=2, seq_len=8, steps=40, warmup_iters=5))
    rep = k_pathway_audit(tr, 40)
    assert rep.absent_nonzero == 0
    assert rep.cofire_rate == 1.0
    assert np.all(rep.occurrences[12:] == 0) and np.all(rep.memory_sq[12:] == 0)
    assert np.all(rep.amplification[:12] > 0)
    assert rep.G2_min_memory > 0


def test_k_pathway_needs_memory():
    with pytest.raises(ParameterError):
        k_pathway_audit(Trainer(TideModel(TINY), np.arange(40) % 16, TrainConfig(steps=1, warmup_iters=0)), 1)


# -- collapse probes -------------------------------------------------------------------


def test_templates_have_one_slot_and_respect_exclusions():
    ts = make_templates(20, 6, 16, seed=1, exclude=[3, 4])
    for t in ts:
        assert np.count_nonzero(t == SLOT) == 1 and t[-1] == SLOT
        assert not np.isin(t, [3, 4]).any()
    assert make_templates(3, 5, 16, slot=2)[0][2] == SLOT


def test_template_without_slot_rejected():
    with pytest.raises(TemplateError):
        collapse_scan(TideModel(TINY), [np.array([1, 2, 3])], [(0, 1)], 1e-6)
    with pytest.raises(TemplateError):
        collapse_scan(TideModel(TINY), [np.array([SLOT, 2, SLOT])], [(0, 1)], 1e-6)


def test_identity_pair_has_zero_distance_everywhere():
    m = TideModel(TINY, TideConfig(n_blocks=2))
    rep = collapse_scan(m, make_templates(10, 6, 16), [(4, 4)], 1e-12)
    assert np.all(rep.hidden_dist == 0) and np.all(rep.collapsed)
    assert np.all(rep.ffn_output_dist == 0) and np.all(rep.memory_dist == 0)


def test_identical_embedding_rows_collapse_at_layer_zero():
    m = TideModel(TINY, TideConfig(n_blocks=2), seed=1)
    m.p("embed").data[9] = m.p("embed").data[2]
    rep = collapse_scan(m, make_templates(10, 6, 16), [(2, 9)], 1e-12)
    assert rep.hidden_dist[0, 0] == 0 and rep.collapsed[0, 0]
    assert rep.ffn_input_dist[0, 0] == 0 and rep.ffn_output_dist[0, 0] == 0
    # the memory path still tells them apart, so later layers separate
    assert np.all(rep.memory_dist[0] > 0)
    assert rep.hidden_dist[0, 1] > 0
    base = collapse_scan(m, make_templates(10, 6, 16), [(2, 9)], 1e-12, arch="base")
    assert np.all(base.hidden_dist == 0) and base.memory_dist.shape == (1, 0)


def test_ffn_bound_with_zero_gap():
    m = TideModel(TINY)
    x = np.random.default_rng(0).normal(size=(3, 8))
    rep = ffn_bound_from_inputs(m, 0, x, x, C=2.0)
    assert rep.delta == 0 and rep.ffn_gap == 0 and rep.floor == 1.0 and not rep.vacuous


def test_ffn_bound_vacuous_branch_and_soundness():
    m = TideModel(TINY, seed=2)
    for k in ("w_gate", "w_up", "w_down"):
        m.p(layer_names(1)[k]).data *= 30
    rng = np.random.default_rng(1)
    gain = m.p(layer_names(1)["ffn_norm"])
    a = ad.rmsnorm(ad.Tensor(rng.normal(size=(500, 8))), gain).data
    b = ad.rmsnorm(ad.Tensor(a + 0.1 * rng.normal(size=(500, 8))), gain).data
    rep = ffn_bound_from_inputs(m, 1, a, b, C=1e-3)
    assert rep.lipschitz_holds
    assert rep.vacuous and rep.floor == 0.0


def test_ffn_lower_bound_check_on_templates():
    m = TideModel(TINY, TideConfig(n_blocks=2))
    rep = ffn_lower_bound_check(m, 1, (3, 7), 5.0, make_templates(8, 5, 16))
    assert rep.lipschitz_holds and rep.delta > 0


# -- memory separation --------------------------------------------------------------


def test_equal_rows_have_zero_separation():
    m = TideModel(TINY, TideConfig(n_blocks=2))
    m.p("mem.k.1.table").data[4] = m.p("mem.k.1.table").data[6]
    rep = memory_separation_check(m, (4, 6))
    assert rep.measured[1] == 0 and rep.measured[0] > 0 and rep.context_invariant


def test_antipodal_rows_match_direct_evaluation():
    m = TideModel(TINY, TideConfig(n_blocks=1))
    b = memory_blocks(m)[0]
    b.table.data[0] = np.ones(8)
    b.table.data[1] = -np.ones(8)
    out = memory_block_lookup(b, np.array([0, 1]), eps=0.0).data
    direct = np.linalg.norm(out[0] - out[1])
    assert abs(direct - 2 * math.sqrt(8)) <= 1e-12
    assert abs(direct - max_separation(b.gain.data)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 1.0), st.integers(0, 1000))
def test_separated_rows_reach_requested_distance(frac, seed):
    gain = np.random.default_rng(seed).uniform(-2, 2, size=8)
    C = frac * max_separation(gain)
    u, v = separated_rows(gain, C)
    x = ad.rmsnorm(ad.Tensor(np.stack([u, v])), ad.Tensor(gain), 1e-6).data
    assert abs(np.linalg.norm(x[0] - x[1]) - C) <= 1e-9


def test_separation_check_constructive_and_invariant():
    m = TideModel(TINY, TideConfig(n_blocks=2), seed=3)
    m.p("mem.k.1.gain").data[...] = np.linspace(0.5, 2.0, 8)
    top = max_separation(m.p("mem.k.1.gain").data)
    for C in (1e-4, 0.37, top / 2, top):
        rep = memory_separation_check(m, (2, 11), C=C, block=1)
        assert abs(rep.achieved - C) <= 1e-9
        assert rep.context_invariant and rep.contexts_checked == 100
    # the original model is untouched
    assert not np.any(np.abs(m.p("mem.k.1.table").data) > 1)


def test_separation_check_on_static_memory():
    m = TideModel(TINY, TideConfig(n_blocks=2), seed=4)
    m.p("mem.k.0.gain").data[...] = np.linspace(2.0, 0.5, 8)
    sm = static_memory_model(m)
    top = max_separation(sm.p("mem.k.0.gain").data)
    for C in (1e-4, 0.9, top):
        rep = memory_separation_check(sm, (5, 9), C=C, block=0)
        assert abs(rep.achieved - C) <= 1e-9 and rep.context_invariant


@pytest.mark.parametrize("C", [0.0, -1.0, 1e3])
def test_separation_out_of_range(C):
    m = TideModel(TINY, TideConfig(n_blocks=1))
    with pytest.raises(ParameterError):
        memory_separation_check(m, (0, 1), C=C)


def test_separation_needs_distinct_pair():
    with pytest.raises(ParameterError):
        memory_separation_check(TideModel(TINY, TideConfig(n_blocks=1)), (3, 3))


# -- post-training studies on an untrained model ------------------------------------------


def test_layer_drop_table_has_one_row_per_layer():
    m = TideModel(TINY, TideConfig(n_blocks=2))
    toks = np.random.default_rng(0).integers(0, 16, 200)
    base, rows = layer_drop_ablation(m, toks, 8)
    assert [r.layer for r in rows] == [0, 1]
    for r in rows:
        assert abs(r.delta_ppl - (r.ppl - base)) <= 1e-12
    _, rows2 = layer_drop_ablation(m, toks, 8, jobs=2)
    assert [(r.layer, r.ppl) for r in rows2] == [(r.layer, r.ppl) for r in rows]


def test_zero_router_gives_uniform_router_stats():
    m = TideModel(TINY, TideConfig(n_blocks=3))
    for l in range(2):
        m.p(f"router.{l}.W").data[...] = 0
    toks = np.random.default_rng(1).integers(0, 16, 400)
    bins = build_bins(FrequencyBinTable(np.bincount(toks, minlength=16)), 4)
    rs = router_stats(m, toks, bins, 8)
    assert rs.mean_alpha.shape == (2, 4, 4)
    np.testing.assert_allclose(rs.mean_alpha, 0.25, atol=1e-15)
    assert rs.counts.sum() == 400


def test_router_stat_slots_sum_to_one():
    m = TideModel(TINY, TideConfig(n_blocks=2), seed=4)
    for l in range(2):
        m.p(f"router.{l}.W").data *= 200
    toks = np.random.default_rng(2).integers(0, 16, 320)
    bins = build_bins(FrequencyBinTable(np.bincount(toks, minlength=16)), 5)
    rs = router_stats(m, toks, bins, 16)
    np.testing.assert_allclose(rs.mean_alpha.sum(-1), 1.0, atol=1e-9)


# -- embedding geometry -----------------------------------------------------------------


def test_cosine_matrix_basics():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(20, 6)), rng.normal(size=(20, 6))
    dist, skipped = embedding_cosine_matrix([A, B, -A])
    assert abs(dist[0, 0]) <= 1e-15 and abs(dist[0, 2] - 2.0) <= 1e-15
    np.testing.assert_allclose(dist, dist.T, atol=1e-12)
    assert np.all(skipped == 0)


def test_cosine_matrix_skips_zero_rows():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    B[[2, 5]] = 0
    dist, skipped = embedding_cosine_matrix([A, B])
    ok = np.ones(10, bool)
    ok[[2, 5]] = False
    cos = np.sum(A[ok] * B[ok], 1) / np.linalg.norm(A[ok], axis=1) / np.linalg.norm(B[ok], axis=1)
    assert abs(dist[0, 1] - (1 - cos.mean())) <= 1e-12
    assert skipped[0, 1] == 2 and skipped[0, 0] == 0
    with pytest.raises(ParameterError):
        embedding_cosine_matrix([np.zeros((3, 2))])


def brute_force_neighbors(table, q, k):
    """Plain loop over all candidates; ties to the lower id."""
    scored = []
    for v in range(len(table)):
        if v == q:
            continue
        na, nb = np.linalg.norm(table[q]), np.linalg.norm(table[v])
        sim = float(table[q] @ table[v]) / (na * nb) if na > 0 and nb > 0 else 0.0
        scored.append((-sim, v))
    return [v for _, v in sorted(scored)[:k]]


def test_neighbors_match_brute_force_scan():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(256, 16))
    M = E + 0.5 * rng.normal(size=(256, 16))
    qs = rng.choice(256, 25, replace=False)
    rep = knn_jaccard({"E": E, "M1": M}, qs, k_nn=10)
    for i, q in enumerate(qs):
        bE, bM = brute_force_neighbors(E, q, 10), brute_force_neighbors(M, q, 10)
        assert rep.neighbors["E"][i].tolist() == bE
        assert rep.neighbors["M1"][i].tolist() == bM
        assert rep.jaccard["M1"][i] == len(set(bE) & set(bM)) / len(set(bE) | set(bM))


def test_neighbor_ties_go_to_lower_id():
    table = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
    assert cosine_neighbors(table, [2], 2).tolist() == [[0, 1]]
    with pytest.raises(ParameterError):
        cosine_neighbors(table, [0], 4)


def test_identical_tables_give_unit_jaccard():
    E = np.random.default_rng(3).normal(size=(50, 8))
    rep = knn_jaccard({"E": E, "M1": E.copy()}, range(10), k_nn=5)
    assert np.all(rep.jaccard["M1"] == 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), max_size=12), st.lists(st.integers(0, 30), max_size=12))
def test_jaccard_bounds(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert jaccard(a, a) == 1.0


def test_hypergeometric_expectation_oracle():
    # exhaustive enumeration on a small universe
    V, k = 9, 3
    cands = range(V - 1)
    subsets = list(combinations(cands, k))
    A = set(subsets[0])
    exact = np.mean([len(A & set(s)) / len(A | set(s)) for s in subsets])
    assert abs(random_jaccard_expectation(V, k) - exact) <= 1e-12


def test_random_tables_jaccard_near_expectation():
    rng = np.random.default_rng(4)
    V, k = 512, 10
    E, M = rng.normal(size=(V, 64)), rng.normal(size=(V, 64))
    rep = knn_jaccard({"E": E, "M1": M}, np.arange(200), k_nn=k)
    mu = random_jaccard_expectation(V, k)
    X = stats.hypergeom(V - 1, k, k)
    xs = np.arange(k + 1)
    sd = math.sqrt(np.sum(X.pmf(xs) * (xs / (2 * k - xs)) ** 2) - mu**2)
    assert abs(rep.jaccard["M1"].mean() - mu) <= 4 * sd / math.sqrt(200)


def test_model_tables_names():
    m = TideModel(TINY, TideConfig(n_blocks=2))
    assert list(model_tables(m)) == ["E", "M1", "M2"]
