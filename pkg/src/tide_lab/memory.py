"""Token-identity memory: K MemoryBlocks, per-layer router with a null bank.

Each block is a |V| x d table followed by RMSNorm. The K outputs are stacked
once per forward pass into M (B, T, K, d). At every layer the router maps the
post-attention normalised state n~ to K+1 logits; slot K is the null bank,
whose output is identically zero, and the routed mix is added to the
residual alongside the FFN output.
"""

from __future__ import annotations

import math
from collections.abc import Collection
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError
from .model import (
    ForwardTrace,
    ModelConfig,
    TideConfig,
    TideModel,
    as_batch,
    attn_block,
    check_tokens,
    ffn,
    layer_names,
    lm_head,
)


@dataclass
class MemoryBlockParams:
    table: Tensor
    gain: Tensor
    static: bool = False  # table rows already are M_k(v)


@dataclass
class RouterOutput:
    alpha: Tensor  # (B, T, K+1); last slot is the null bank


def memory_blocks(model: TideModel) -> list[MemoryBlockParams]:
    return [
        MemoryBlockParams(model.p(f"mem.k.{k}.table"), model.p(f"mem.k.{k}.gain"), model.tide.static_memory)
        for k in range(model.n_blocks)
    ]


def memory_block_lookup(block: MemoryBlockParams, ids, eps: float = 1e-6) -> Tensor:
    """M_k(v) = RMSNorm(E_k[v]): one gather and a normalisation, no matmul."""
    if block.static:
        return ad.embedding_lookup(block.table, ids)
    return ad.rmsnorm(ad.embedding_lookup(block.table, ids), block.gain, eps)


def build_memory_tensor(blocks: list[MemoryBlockParams], ids, eps: float = 1e-6) -> Tensor:
    if not blocks:
        raise ParameterError("build_memory_tensor needs at least one block")
    return ad.stack([memory_block_lookup(b, ids, eps) for b in blocks], axis=-2)


def route(
    normed: Tensor,
    router_w: Tensor,
    memory: Tensor,
    forced_null_logit: float | None = None,
) -> tuple[RouterOutput, Tensor]:
    """alpha = softmax(W_r n~) over K+1 slots; m = sum_{k<K} alpha_k M_k.

    ``forced_null_logit`` replaces the router logits by zeros on the K active
    slots and the given value on the null slot.
    """
    K = memory.shape[-2]
    if router_w.shape != (K + 1, normed.shape[-1]):
        raise DimensionError(f"router weight {router_w.shape} vs K={K}, d={normed.shape[-1]}")
    if memory.shape[:-2] != normed.shape[:-1] or memory.shape[-1] != normed.shape[-1]:
        raise DimensionError(f"memory {memory.shape} vs hidden {normed.shape}")
    if forced_null_logit is None:
        logits = normed @ ad.transpose(router_w, (1, 0))
    else:
        z = np.zeros(normed.shape[:-1] + (K + 1,))
        z[..., K] = forced_null_logit
        logits = Tensor(z)
    alpha = ad.softmax_lastdim(logits)
    return RouterOutput(alpha), ad.route_mix(alpha, memory)


def fuse(h_tilde: Tensor, ffn_out: Tensor, m: Tensor | None) -> Tensor:
    """h = h~ + FFN(n~) + m; neither branch reads the other."""
    h = h_tilde + ffn_out
    return h if m is None else h + m


def forward_tide(
    model: TideModel,
    tokens,
    trace: bool = False,
    drop_layers: Collection[int] = (),
    forced_null_logit: float | None = None,
) -> ForwardTrace:
    """Full forward pass with the memory pathway.

    ``drop_layers`` zeroes the routed memory at the listed layers (the
    per-layer ablation). With ``n_blocks == 0`` this is the baseline forward.
    """
    tokens = as_batch(tokens)
    cfg = model.config
    check_tokens(tokens, cfg)
    K = model.n_blocks
    h = ad.embedding_lookup(model.p("embed"), tokens)
    memory = None
    if K > 0:
        memory = build_memory_tensor(memory_blocks(model), tokens, cfg.norm_eps)
        model.memory_builds += 1
    out = ForwardTrace(logits=None)  # type: ignore[arg-type]
    if trace:
        out.hidden.append(h.data)
    for l in range(cfg.n_layers):
        h_tilde = attn_block(h, model, l)
        normed = ad.rmsnorm(h_tilde, model.p(layer_names(l)["ffn_norm"]), cfg.norm_eps)
        m = None
        if memory is not None:
            r, m = route(normed, model.p(f"router.{l}.W"), memory, forced_null_logit)
            if trace:
                out.alphas.append(r.alpha.data)
            if l in drop_layers:
                m = None
            if trace:
                out.memory_out.append(np.zeros_like(h_tilde.data) if m is None else m.data)
        h = fuse(h_tilde, ffn(normed, model, l), m)
        if trace:
            out.post_attn.append(h_tilde.data)
            out.normed.append(normed.data)
            out.hidden.append(h.data)
    out.logits = lm_head(h, model)
    return out


def forward(model: TideModel, tokens, **kwargs) -> ForwardTrace:
    return forward_tide(model, tokens, **kwargs)


# -- null-bank suppression ---------------------------------------------------


def static_memory_model(model: TideModel) -> TideModel:
    """Copy whose tables hold M_k(v) for the whole vocabulary, so a lookup
    needs no normalisation. Outputs match ``model`` to rounding."""
    out = model.copy()
    if model.tide.static_memory:
        return out
    ids = np.arange(model.config.vocab_size)
    with ad.no_grad():
        for k, b in enumerate(memory_blocks(model)):
            out.p(f"mem.k.{k}.table").data[...] = memory_block_lookup(b, ids, model.config.norm_eps).data
    out.tide = replace(model.tide, static_memory=True)
    return out


def memory_norm_max(model: TideModel) -> float:
    """C = max over v, k of ||M_k(v)||, by exhaustive vocabulary scan."""
    ids = np.arange(model.config.vocab_size)
    best = 0.0
    with ad.no_grad():
        for b in memory_blocks(model):
            M = memory_block_lookup(b, ids, model.config.norm_eps).data
            best = max(best, float(np.max(np.linalg.norm(M, axis=-1))))
    return best


S_STAR_FLOOR = -745.0  # log of the smallest positive double


def null_suppression_logit(K: int, C: float, eps: float) -> float:
    """s* = log(K (C - eps) / eps): a null logit at or above s* (active logits
    zero) keeps ||m(v)|| <= eps for every token.

    As eps -> C the argument tends to 0; the result is clamped at
    ``S_STAR_FLOOR`` instead of returning -inf.
    """
    if K < 1:
        raise ParameterError("K must be >= 1")
    if not 0 < eps < C:
        raise ParameterError(f"need 0 < eps < C, got eps={eps}, C={C}")
    arg = K * (C - eps) / eps
    return max(math.log(arg), S_STAR_FLOOR) if arg > 0 else S_STAR_FLOOR


SUPPRESSION_MARGIN = 1e-12


def suppression_logit(model: TideModel, eps: float) -> float:
    """s* for this model's measured C, raised by ``SUPPRESSION_MARGIN``.

    At exactly s* the max-norm token meets the bound with equality, so
    rounding alone can overshoot eps by an ulp; the margin absorbs that.
    """
    return null_suppression_logit(model.n_blocks, memory_norm_max(model), eps) + SUPPRESSION_MARGIN


def active_mass(K: int, null_logit: float) -> float:
    """Total weight on the K active slots when they have logit 0: K / (K + e^s)."""
    return K / (K + math.exp(null_logit))


def memory_norms_under_suppression(model: TideModel, null_logit: float) -> np.ndarray:
    """||m(v)|| for every vocabulary id under a forced null logit."""
    ids = np.arange(model.config.vocab_size)[None, :]
    with ad.no_grad():
        M = build_memory_tensor(memory_blocks(model), ids, model.config.norm_eps)
        z = Tensor(np.zeros((1, ids.shape[1], model.config.d)))
        _, m = route(z, Tensor(np.zeros((model.n_blocks + 1, model.config.d))), M, null_logit)
    return np.linalg.norm(m.data[0], axis=-1)


# -- footprint ---------------------------------------------------------------


def base_param_count(config: ModelConfig) -> int:
    d, V, L, f = config.d, config.vocab_size, config.n_layers, config.d_ff
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    head = 0 if config.tie_embeddings else V * d
    return V * d + L * per_layer + d + head


def footprint_report(config: ModelConfig, tide: TideConfig, bits: tuple[int, ...] = (16, 8, 4)) -> dict:
    """Parameter counts and storage bytes of the base model and memory path."""
    K = tide.n_blocks
    d_b = tide.d_block or config.d
    base = base_param_count(config)
    memory_tables = config.vocab_size * K * d_b
    memory_gains = K * d_b
    router = config.n_layers * (K + 1) * config.d if K > 0 else 0
    report = {
        "base_params": base,
        "memory_table_params": memory_tables,
        "memory_gain_params": memory_gains,
        "memory_params": memory_tables + memory_gains,
        "router_params": router,
        "total_params": base + memory_tables + memory_gains + router,
    }
    for b in bits:
        report[f"base_bytes_{b}bit"] = base * b // 8
        report[f"memory_table_bytes_{b}bit"] = memory_tables * b // 8
        report[f"memory_bytes_{b}bit"] = (memory_tables + memory_gains) * b // 8
        report[f"router_bytes_{b}bit"] = router * b // 8
    return report
