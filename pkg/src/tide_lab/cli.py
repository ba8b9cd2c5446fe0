"""Command-line entry point: ``tide-lab <command> [--config PATH] [--seed N] [--out DIR] [--jobs N]``."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, write_checkpoint
from .compressor import CompressionSpec, checkpoint_with_records, compressed_eval, max_saving_rank
from .config import ExperimentConfig, load_config
from .corpus import (
    ZipfSpec,
    bin_tier,
    build_bins,
    count_frequencies,
    ingest_token_stream,
    unigram_probs,
    write_token_stream,
    zipf_sample_corpus,
)
from .diagnostics import (
    KPathwayReport,
    all_layers_dropped_ppl,
    collapse_scan,
    embedding_cosine_matrix,
    grad_ratio_bound,
    iid_batches,
    k_pathway_audit,
    knn_jaccard,
    layer_drop_ablation,
    make_templates,
    max_separation,
    memory_separation_check,
    model_tables,
    null_suppressed_ppl,
    occurrence_agreement,
    random_jaccard_expectation,
    router_stats,
    run_grad_audit,
)
from .errors import ConfigError, TideError, TrainingDivergence
from .memory import footprint_report, memory_blocks
from .model import ModelConfig, TideConfig, TideModel
from .reports import read_csv, write_csv
from .trainer import TrainConfig, Trainer, eval_per_bin, evaluate_perplexity, split_train_val

CORPUS_FILE = "corpus.tok"
MODEL_FILE = "model.ckpt"
# Absolute slack on the Lipschitz comparison: outputs are computed
# separately, so rounding can exceed L * delta when delta is ~1e-16.
LIPSCHITZ_SLACK = 1e-12


# -- shared setup -------------------------------------------------------------


class Context:
    def __init__(self, args: argparse.Namespace):
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.replace("run", seed=args.seed)
        self.cfg = cfg
        self.out = Path(args.out)
        self.jobs = max(1, args.jobs)
        self.failures: list[str] = []

    def setup(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.write(self.out / "config.resolved.ini")

    def check(self, ok: bool, message: str) -> None:
        if not ok:
            self.failures.append(message)

    def corpus_spec(self) -> ZipfSpec:
        c = self.cfg.corpus
        return ZipfSpec(self.cfg.model.vocab_size, c.exponent, self.cfg.seed, c.length, c.successor_prob)

    def tokens(self) -> np.ndarray:
        V = self.cfg.model.vocab_size
        if (self.out / CORPUS_FILE).exists():
            return ingest_token_stream(self.out / CORPUS_FILE, V)
        if self.cfg.corpus.stream:
            return ingest_token_stream(self.cfg.corpus.stream, V)
        return zipf_sample_corpus(self.corpus_spec())

    def split(self):
        train, val = split_train_val(self.tokens(), self.cfg.corpus.val_fraction)
        bins = build_bins(count_frequencies(train, self.cfg.model.vocab_size), self.cfg.corpus.bin_count)
        return train, val, bins

    def model(self, checkpoint: str | None) -> TideModel:
        path = Path(checkpoint) if checkpoint else self.out / MODEL_FILE
        if path.exists():
            return load_model(path)
        if checkpoint:
            raise ConfigError(f"checkpoint {path} not found")
        tide = self.cfg.tide if self.cfg.run.arch == "tide" else TideConfig(0)
        return TideModel(self.cfg.model, tide, seed=self.cfg.seed)


def _tier(b: int, bin_count: int) -> str:
    if b < 0:
        return "none"
    return bin_tier(b) if bin_count == 10 else "all"


def _pick_by_bins(bins, wanted_bins, n: int, rng) -> np.ndarray:
    pool = np.flatnonzero(np.isin(bins.bins, list(wanted_bins)))
    return np.sort(rng.choice(pool, size=min(n, pool.size), replace=False))


# -- commands -------------------------------------------------------------------


def cmd_corpus(ctx: Context, args) -> None:
    c = ctx.cfg.corpus
    V = ctx.cfg.model.vocab_size
    if c.stream:
        tokens = ingest_token_stream(c.stream, V)
    else:
        tokens = zipf_sample_corpus(ctx.corpus_spec())
    write_token_stream(ctx.out / CORPUS_FILE, tokens)
    train, _ = split_train_val(tokens, c.val_fraction)
    bins = build_bins(count_frequencies(train, V), c.bin_count)
    rows = [
        {"token": v, "count": int(bins.counts[v]), "rank": int(bins.ranks[v]), "bin": int(bins.bins[v]), "tier": _tier(int(bins.bins[v]), c.bin_count)}
        for v in range(V)
    ]
    write_csv(ctx.out / "bins.csv", rows)
    sizes = bins.bin_sizes()
    ctx.check(int(sizes.max() - sizes.min()) <= 1, f"bin cardinalities {sizes.tolist()} differ by more than 1")
    print(f"wrote {len(tokens)} tokens, {len(bins.clean_ids())} binned types, bin sizes {sizes.tolist()}")


def _metric_rows(history) -> list[dict]:
    return [{"step": m.step, "loss": m.loss, "lr": m.lr, "grad_norm": m.grad_norm} for m in history]


def cmd_train(ctx: Context, args) -> None:
    cfg = ctx.cfg
    arch = args.arch or cfg.run.arch
    if args.steps is not None:
        cfg = cfg.replace("train", steps=args.steps, warmup_iters=min(cfg.train.warmup_iters, args.steps))
    if args.k is not None:
        cfg = cfg.replace("tide", n_blocks=args.k)
    if arch != cfg.run.arch:
        cfg = cfg.replace("run", arch=arch)
    ctx.cfg = cfg
    ctx.setup()
    train, val, bins = ctx.split()
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, train)
    else:
        tide = cfg.tide if arch == "tide" else TideConfig(0)
        trainer = Trainer(TideModel(cfg.model, tide, seed=cfg.seed), train, cfg.train, arch)
    start = trainer.step

    def save(tr: Trainer) -> None:
        tr.save(ctx.out / f"ckpt_{tr.step:06d}.ckpt")

    try:
        trainer.run(on_checkpoint=save)
    except TrainingDivergence as e:
        dump = {k: (float(v) if np.isscalar(v) else str(v)) for k, v in e.dump.items()}
        print(f"training diverged: {e} {dump}", file=sys.stderr)
        ctx.check(False, "loss became non-finite")
        return
    rows = []
    metrics = ctx.out / "metrics.csv"
    if start and metrics.exists():
        rows = [r for r in read_csv(metrics) if int(r["step"]) < start]
        rows = [{"step": int(r["step"]), "loss": float(r["loss"]), "lr": float(r["lr"]), "grad_norm": float(r["grad_norm"])} for r in rows]
    write_csv(metrics, rows + _metric_rows(trainer.history), ["step", "loss", "lr", "grad_norm"])
    trainer.save(ctx.out / MODEL_FILE)
    model = trainer.model
    seq = cfg.diagnostics.eval_seq_len
    rep = eval_per_bin(model, val, bins, seq, trainer.arch)
    write_csv(ctx.out / "eval_bins.csv", rep.rows(), ["bin", "tier", "count", "mean_ce"])
    summary = {
        "arch": trainer.arch,
        "n_blocks": model.n_blocks,
        "steps": trainer.step,
        "val_ppl": math.exp(rep.global_mean),
        "global_ce": rep.global_mean,
    }
    summary.update({f"{t}_ce": v for t, v in rep.tier_mean.items()})
    write_csv(ctx.out / "eval_summary.csv", [summary])
    ctx.check(bool(np.isfinite(rep.global_mean)), "validation loss is not finite")
    print(f"{trainer.arch} K={model.n_blocks} steps={trainer.step} val ppl {summary['val_ppl']:.4f}")


def cmd_audit(ctx: Context, args) -> None:
    d = ctx.cfg.diagnostics
    model = ctx.model(args.checkpoint).copy()
    arch = "tide" if model.n_blocks else "base"
    steps = d.audit_steps if args.steps is None else args.steps
    probs = unigram_probs(ctx.corpus_spec())
    B, T = d.audit_batch, d.audit_seq_len
    cfg = TrainConfig(batch_size=B, seq_len=T, steps=max(steps, 1), warmup_iters=0, seed=ctx.cfg.seed)
    audit = run_grad_audit(model, iid_batches(probs, B, T, ctx.cfg.seed), steps, cfg, arch, update=d.audit_update)
    within = occurrence_agreement(audit, probs, B, T) if steps else np.ones(len(probs), dtype=bool)
    expected = steps * (1.0 - (1.0 - probs) ** (B * T))
    names = list(audit.sq_norm)
    rows = []
    for v in range(len(probs)):
        r = {"token": v, "freq": float(probs[v]), "occurrences": int(audit.occurrences[v]), "expected": float(expected[v]), "within_3sigma": bool(within[v])}
        r.update({f"sq_{n}": float(audit.sq_norm[n][v]) for n in names})
        rows.append(r)
    write_csv(ctx.out / "audit_tokens.csv", rows)
    never = audit.occurrences == 0
    summary = {
        "steps": audit.steps,
        "batch": B,
        "seq_len": T,
        "G2": audit.G2,
        "G2_min": audit.G2_min if math.isfinite(audit.G2_min) else 0.0,
        "sparsity_violations": audit.sparsity_violations,
        "frac_within_3sigma": float(within.mean()),
    }
    if steps and audit.G2_min > 0 and math.isfinite(audit.G2_min):
        rb = grad_ratio_bound(float(probs.min()), float(probs.max()), B, T, audit.G2, audit.G2_min)
        summary.update(ratio_bound=rb.bound, kappa=rb.kappa, eps_over_c=rb.eps_over_c)
    write_csv(ctx.out / "audit_summary.csv", [summary])
    ctx.check(audit.sparsity_violations == 0, f"{audit.sparsity_violations} absent-token rows received gradient")
    ctx.check(all(np.all(audit.sq_norm[n][never] == 0) for n in names), "never-seen tokens accumulated gradient")
    ctx.check(not steps or within.mean() >= 0.95, f"only {within.mean():.3f} of tokens within 3 sigma")
    if args.kpath and model.n_blocks and d.kpath_steps:
        train, _, _ = ctx.split()
        rep = k_pathway_audit(Trainer(model, train, ctx.cfg.train, "tide"), d.kpath_steps)
        write_csv(ctx.out / "audit_kpath.csv", _kpath_rows(rep))
        ctx.check(bool(np.all(rep.cofire == rep.occurrences)), f"co-firing rate {rep.cofire_rate:.6f} < 1")
        ctx.check(rep.absent_nonzero == 0, f"{rep.absent_nonzero} absent rows received gradient")
    print(f"audit: {audit.steps} steps, {summary['frac_within_3sigma']:.3f} within 3 sigma")


def _kpath_rows(rep: KPathwayReport) -> list[dict]:
    rows = []
    amp = rep.amplification
    for i, v in enumerate(rep.tokens):
        r = {"token": int(v), "occurrences": int(rep.occurrences[i]), "cofire": int(rep.cofire[i]), "primary_sq": float(rep.primary_sq[i])}
        r.update({f"memory_sq_{k}": float(rep.memory_sq[i, k]) for k in range(rep.memory_sq.shape[1])})
        r["amplification"] = float(amp[i]) if np.isfinite(amp[i]) else 0.0
        rows.append(r)
    return rows


def cmd_collapse(ctx: Context, args) -> None:
    d = ctx.cfg.diagnostics
    model = ctx.model(args.checkpoint)
    arch = "tide" if model.n_blocks else "base"
    _, _, bins = ctx.split()
    rng = np.random.default_rng([ctx.cfg.seed, 2])
    nb = bins.bin_count
    rare = _pick_by_bins(bins, [0], 2 * d.collapse_pairs, rng)
    common = _pick_by_bins(bins, [nb - 1], 2 * d.collapse_pairs, rng)
    pairs, kinds = [], []
    for kind, ids in (("rare", rare), ("common", common)):
        for i in range(0, len(ids) - 1, 2):
            pairs.append((int(ids[i]), int(ids[i + 1])))
            kinds.append(kind)
    pairs.append((int(rare[0]), int(rare[0])))
    kinds.append("identity")
    templates = make_templates(d.n_templates, d.template_len, model.config.vocab_size, ctx.cfg.seed)
    rep = collapse_scan(model, templates, pairs, d.delta_tol, arch)
    L = model.config.n_layers
    rows = []
    for i, (u, v) in enumerate(pairs):
        for l in range(L + 1):
            r = {"u": u, "v": v, "kind": kinds[i], "layer": l, "hidden_dist": float(rep.hidden_dist[i, l]), "collapsed": bool(rep.collapsed[i, l])}
            if l < L:
                bound = rep.lipschitz[l] * rep.ffn_input_dist[i, l]
                r.update(ffn_input_gap=float(rep.ffn_input_dist[i, l]), ffn_output_gap=float(rep.ffn_output_dist[i, l]), lipschitz=float(rep.lipschitz[l]), bound_holds=bool(rep.ffn_output_dist[i, l] <= bound + LIPSCHITZ_SLACK))
            else:
                r.update(ffn_input_gap="", ffn_output_gap="", lipschitz="", bound_holds="")
            rows.append(r)
    write_csv(ctx.out / "collapse_layers.csv", rows)
    viol = [r for r in rows if r["bound_holds"] is False]
    ctx.check(not viol, f"{len(viol)} FFN gaps exceed the Lipschitz bound")
    ctx.check(bool(np.all(rep.hidden_dist[kinds.index("identity")] == 0)), "identity pair has nonzero distance")
    if model.n_blocks:
        mrows = [
            {"u": u, "v": v, "kind": kinds[i], "block": k, "dist": float(rep.memory_dist[i, k])}
            for i, (u, v) in enumerate(pairs)
            for k in range(model.n_blocks)
        ]
        write_csv(ctx.out / "collapse_memory.csv", mrows)
        u, v = pairs[0]
        gain = memory_blocks(model)[0].gain.data
        C = 0.5 * max_separation(gain)
        sep = memory_separation_check(model, (u, v), C=C, n_contexts=100, seed=ctx.cfg.seed)
        write_csv(ctx.out / "collapse_separation.csv", [{"u": u, "v": v, "requested": C, "achieved": sep.achieved, "error": abs(sep.achieved - C), "context_invariant": sep.context_invariant}])
        ctx.check(abs(sep.achieved - C) <= 1e-9, f"constructed separation off by {abs(sep.achieved - C):.3e}")
        ctx.check(sep.context_invariant, "memory difference changed across contexts")
    print(f"collapse: {len(pairs)} pairs over {len(templates)} templates")


def cmd_ablate(ctx: Context, args) -> None:
    model = ctx.model(args.checkpoint)
    if not model.n_blocks:
        raise ConfigError("ablate needs a model with memory blocks")
    _, val, _ = ctx.split()
    seq = ctx.cfg.diagnostics.eval_seq_len
    base, rows = layer_drop_ablation(model, val, seq, ctx.jobs)
    write_csv(ctx.out / "ablate_layers.csv", [r.__dict__ for r in rows], ["layer", "ppl", "delta_ppl", "pct"])
    dropped = all_layers_dropped_ppl(model, val, seq)
    suppressed, s = null_suppressed_ppl(model, val, seq, ctx.cfg.diagnostics.suppression_eps)
    write_csv(
        ctx.out / "ablate_summary.csv",
        [{"intact_ppl": base, "all_dropped_ppl": dropped, "suppressed_ppl": suppressed, "null_logit": s, "eps": ctx.cfg.diagnostics.suppression_eps, "rel_gap": abs(dropped - suppressed) / dropped}],
    )
    ctx.check(len(rows) == model.config.n_layers, "ablation table does not have one row per layer")
    ctx.check(all(math.isfinite(r.ppl) for r in rows), "non-finite perplexity")
    print(f"ablate: intact ppl {base:.4f}, all dropped {dropped:.4f}, suppressed {suppressed:.4f}")


def cmd_router_stats(ctx: Context, args) -> None:
    model = ctx.model(args.checkpoint)
    if not model.n_blocks:
        raise ConfigError("router-stats needs a model with memory blocks")
    _, val, bins = ctx.split()
    st = router_stats(model, val, bins, ctx.cfg.diagnostics.eval_seq_len)
    K = model.n_blocks
    rows = []
    for l in range(model.config.n_layers):
        for b in range(bins.bin_count):
            for k in range(K + 1):
                a = st.mean_alpha[l, b, k]
                rows.append({"layer": l, "bin": b, "tier": _tier(b, bins.bin_count), "count": int(st.counts[b]), "slot": "null" if k == K else str(k), "mean_alpha": float(a) if st.counts[b] else ""})
    write_csv(ctx.out / "router_bins.csv", rows)
    seen = st.counts > 0
    sums = st.mean_alpha[:, seen, :].sum(axis=-1)
    ctx.check(bool(np.all(np.abs(sums - 1.0) <= 1e-9)), "per-bin mean routing weights do not sum to 1")
    print(f"router-stats: {model.config.n_layers} layers x {bins.bin_count} bins")


def cmd_knn(ctx: Context, args) -> None:
    d = ctx.cfg.diagnostics
    model = ctx.model(args.checkpoint)
    _, _, bins = ctx.split()
    rng = np.random.default_rng([ctx.cfg.seed, 3])
    nb = bins.bin_count
    half = d.knn_queries // 2
    rare = _pick_by_bins(bins, range(0, min(3, nb)), half, rng)
    common = _pick_by_bins(bins, range(max(0, nb - 3), nb), d.knn_queries - half, rng)
    queries = np.concatenate([rare, common])
    tables = model_tables(model)
    rep = knn_jaccard(tables, queries, d.knn_k)
    tier = lambda q: _tier(int(bins.bins[q]), nb)
    write_csv(
        ctx.out / "knn_neighbors.csv",
        [
            {"query": int(q), "tier": tier(q), "table": name, "rank": j, "neighbor": int(n[i, j])}
            for name, n in rep.neighbors.items()
            for i, q in enumerate(queries)
            for j in range(d.knn_k)
        ],
    )
    write_csv(
        ctx.out / "knn_jaccard.csv",
        [{"query": int(q), "tier": tier(q), "table": name, "jaccard": float(j[i])} for name, j in rep.jaccard.items() for i, q in enumerate(queries)],
        ["query", "tier", "table", "jaccard"],
    )
    names = list(tables)
    dist, skipped = embedding_cosine_matrix([tables[n] for n in names])
    write_csv(
        ctx.out / "knn_cosine.csv",
        [{"table_a": a, "table_b": b, "distance": float(dist[i, j]), "skipped": int(skipped[i, j])} for i, a in enumerate(names) for j, b in enumerate(names)],
    )
    expect = random_jaccard_expectation(model.config.vocab_size, d.knn_k)
    write_csv(
        ctx.out / "knn_summary.csv",
        [{"table": name, "mean_jaccard": float(j.mean()), "random_expectation": expect} for name, j in rep.jaccard.items()],
        ["table", "mean_jaccard", "random_expectation"],
    )
    ctx.check(all(np.all((j >= 0) & (j <= 1)) for j in rep.jaccard.values()), "Jaccard outside [0, 1]")
    print(f"knn: {len(queries)} queries over {len(names)} tables")


def cmd_compress(ctx: Context, args) -> None:
    d = ctx.cfg.diagnostics
    model = ctx.model(args.checkpoint)
    if not model.n_blocks:
        raise ConfigError("compress needs a model with memory blocks")
    _, val, _ = ctx.split()
    specs = []
    if args.mode in ("lowrank", "both"):
        if args.rank:
            specs += [CompressionSpec("lowrank", rank=r) for r in args.rank]
        else:
            specs += [CompressionSpec("lowrank", percent=p) for p in (args.percent or d.percents())]
    if args.mode in ("quantize", "both"):
        specs += [CompressionSpec("quantize", bits=b) for b in (args.bits or d.bits())]
    sweep = compressed_eval(model, specs, val, d.eval_seq_len, ctx.jobs)
    V, d_b = model.p("mem.k.0.table").shape
    dense = model.n_blocks * V * d_b
    rows = []
    for spec, r, recs in zip(specs, sweep.rows, sweep.records):
        rows.append({"label": r.label, "mode": spec.mode, "rank": r.rank if r.rank is not None else "", "bits": r.bits or "", "ppl": r.ppl, "delta_ppl": r.delta_ppl, "rel_delta": r.rel_delta, "stored_params": r.stored_params, "dense_params": dense})
        write_checkpoint(ctx.out / f"compressed_{r.label.replace('%', 'pct')}.ckpt", checkpoint_with_records(model, spec, recs))
    write_csv(ctx.out / "compress_sweep.csv", rows)
    for spec, r in zip(specs, sweep.rows):
        if (spec.mode == "lowrank" and spec.rank_for(V, d_b) == min(V, d_b)) or spec.bits == 16:
            ctx.check(abs(r.rel_delta) <= 1e-6, f"{r.label}: lossless setting changed perplexity by {r.rel_delta:.3e}")
    print(f"compress: base ppl {sweep.base_ppl:.4f}, {len(rows)} settings, max saving rank {max_saving_rank(V, d_b)}")


def cmd_footprint(ctx: Context, args) -> None:
    m = ctx.cfg.model
    overrides = {k: v for k, v in {"vocab_size": args.vocab, "d": args.d, "n_layers": args.layers, "d_ff": args.d_ff, "n_heads": args.heads}.items() if v is not None}
    if overrides:
        m = ModelConfig(**{**m.__dict__, **overrides})
    tide = TideConfig(args.k if args.k is not None else ctx.cfg.tide.n_blocks)
    tide.validate(m)
    rep = footprint_report(m, tide)
    rep["max_saving_rank"] = max_saving_rank(m.vocab_size, m.d)
    write_csv(ctx.out / "footprint.csv", [{"quantity": k, "value": v} for k, v in rep.items()])
    print(f"memory tables at 16 bit: {rep['memory_table_bytes_16bit'] / 1e9:.3f} GB; router params {rep['router_params']}")


COMMANDS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "audit": cmd_audit,
    "collapse": cmd_collapse,
    "ablate": cmd_ablate,
    "router-stats": cmd_router_stats,
    "knn": cmd_knn,
    "compress": cmd_compress,
    "footprint": cmd_footprint,
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=dflt(None), help="INI experiment config")
    p.add_argument("--seed", type=int, default=dflt(None), help="override run.seed")
    p.add_argument("--out", default=dflt("runs"), help="output directory (default: runs)")
    p.add_argument("--jobs", type=int, default=dflt(1), help="threads for independent evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tide-lab", description="Token-identity memory experiments at desk scale.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        subs[name] = sp
    subs["train"].add_argument("--arch", choices=["base", "tide"])
    subs["train"].add_argument("--k", type=int, help="number of memory blocks")
    subs["train"].add_argument("--steps", type=int)
    subs["train"].add_argument("--resume", help="trainer checkpoint to continue from")
    for name in ("audit", "collapse", "ablate", "router-stats", "knn", "compress"):
        subs[name].add_argument("--checkpoint", help=f"model checkpoint (default: OUT/{MODEL_FILE}, else a fresh model)")
    subs["audit"].add_argument("--steps", type=int)
    subs["audit"].add_argument("--kpath", action="store_true", help="also run the K-pathway co-firing audit")
    subs["compress"].add_argument("--mode", choices=["lowrank", "quantize", "both"], default="both")
    subs["compress"].add_argument("--percent", type=float, action="append", help="rank reduction percent (repeatable)")
    subs["compress"].add_argument("--rank", type=int, action="append", help="explicit rank (repeatable)")
    subs["compress"].add_argument("--bits", type=int, action="append", choices=[4, 8, 16])
    fp = subs["footprint"]
    for flag in ("--vocab", "--d", "--k", "--layers", "--d-ff", "--heads"):
        fp.add_argument(flag, type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        if args.command != "train":
            ctx.setup()
        COMMANDS[args.command](ctx, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TideError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for msg in ctx.failures:
        print(f"check failed: {msg}", file=sys.stderr)
    return 1 if ctx.failures else 0


if __name__ == "__main__":
    sys.exit(main())
