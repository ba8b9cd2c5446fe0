"""LLaMA-style decoder: pre-norm RoPE attention, SiLU-gated FFN, LM head.

Parameters live in a flat name -> Tensor dict on :class:`TideModel`; the
memory pathway (``mem.k.*``, ``router.*``) is present only when the model is
built with ``n_blocks > 0`` and is driven by :mod:`tide_lab.memory`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

SILU_DERIV_MAX = 1.0998393194  # sup_x |d/dx x*sigmoid(x)|, attained near x = 2.3994


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    rope_theta: float = 10000.0
    tie_embeddings: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("vocab_size", "d", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if (self.d // self.n_heads) % 2:
            raise ConfigError("head dim must be even for rotary embeddings")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


@dataclass(frozen=True)
class TideConfig:
    """Memory pathway shape. ``d_block`` must equal the model width."""

    n_blocks: int = 0
    d_block: int | None = None
    per_layer_router: bool = True
    # tables hold the normalized outputs M_k directly (set by compression)
    static_memory: bool = False

    def validate(self, model: ModelConfig) -> None:
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        if self.d_block is not None and self.d_block != model.d:
            raise ConfigError(f"d_block={self.d_block} must equal d={model.d}; the memory output is added to the residual")
        if not self.per_layer_router:
            raise ConfigError("only per-layer routers are supported")


def layer_names(layer: int) -> dict[str, str]:
    p = f"layers.{layer}."
    keys = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")
    return {k: p + k for k in keys}


def init_params(config: ModelConfig, tide: TideConfig, seed: int = 0) -> dict[str, Tensor]:
    """Depth-scaled normal init; gains start at one."""
    rng = np.random.default_rng(seed)
    d, V, L = config.d, config.vocab_size, config.n_layers
    proj_std = 0.02 / math.sqrt(2 * max(L, 1))
    params: dict[str, np.ndarray] = {"embed": rng.normal(0.0, 0.02, (V, d))}
    for l in range(L):
        n = layer_names(l)
        params[n["attn_norm"]] = np.ones(d)
        for k in ("wq", "wk", "wv", "wo"):
            params[n[k]] = rng.normal(0.0, proj_std, (d, d))
        params[n["ffn_norm"]] = np.ones(d)
        params[n["w_gate"]] = rng.normal(0.0, proj_std, (d, config.d_ff))
        params[n["w_up"]] = rng.normal(0.0, proj_std, (d, config.d_ff))
        params[n["w_down"]] = rng.normal(0.0, proj_std, (config.d_ff, d))
    params["final_norm"] = np.ones(d)
    if not config.tie_embeddings:
        params["head"] = rng.normal(0.0, 0.02, (V, d))
    K = tide.n_blocks
    if K > 0:
        for k in range(K):
            params[f"mem.k.{k}.table"] = rng.normal(0.0, 0.02, (V, d))
            params[f"mem.k.{k}.gain"] = np.ones(d)
        for l in range(L):
            params[f"router.{l}.W"] = rng.normal(0.0, proj_std, (K + 1, d))
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in params.items()}


class TideModel:
    """Baseline transformer plus an optional K-block token-identity memory."""

    def __init__(
        self,
        config: ModelConfig,
        tide: TideConfig | None = None,
        params: dict[str, Tensor] | None = None,
        seed: int = 0,
    ):
        self.config = config
        self.tide = tide or TideConfig()
        self.tide.validate(config)
        self.params = params if params is not None else init_params(config, self.tide, seed)
        self.memory_builds = 0

    @property
    def n_blocks(self) -> int:
        return self.tide.n_blocks

    @property
    def head(self) -> Tensor:
        return self.params["embed"] if self.config.tie_embeddings else self.params["head"]

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "TideModel":
        params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        return TideModel(self.config, self.tide, params)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def config_dict(self) -> dict:
        return {"model": asdict(self.config), "tide": asdict(self.tide)}


@dataclass
class ForwardTrace:
    """Logits plus, when tracing, per-layer activations as plain arrays.

    ``hidden`` holds h^0..h^L; ``post_attn`` and ``normed`` hold h~ and n~ for
    layers 1..L. ``alphas``/``memory_out`` are filled on the memory path.
    """

    logits: Tensor
    hidden: list[np.ndarray] = field(default_factory=list)
    post_attn: list[np.ndarray] = field(default_factory=list)
    normed: list[np.ndarray] = field(default_factory=list)
    alphas: list[np.ndarray] = field(default_factory=list)
    memory_out: list[np.ndarray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.post_attn)


def as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ConfigError(f"tokens must be (T,) or (B, T), got shape {arr.shape}")
    return arr


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(T: int) -> np.ndarray:
    m = _MASKS.get(T)
    if m is None:
        m = np.triu(np.ones((T, T), dtype=bool), k=1)
        _MASKS[T] = m
    return m


def attn_block(h: Tensor, model: TideModel, layer: int, return_weights: bool = False):
    """h~ = h + Attn(RMSNorm(h)) with causal multi-head RoPE attention."""
    cfg = model.config
    B, T, d = h.shape
    if T > cfg.max_seq_len:
        raise ConfigError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    n = layer_names(layer)
    H, dh = cfg.n_heads, cfg.head_dim
    x = ad.rmsnorm(h, model.p(n["attn_norm"]), cfg.norm_eps)
    pos = np.arange(T)

    def heads(w):
        t = ad.transpose(ad.reshape(x @ model.p(w), (B, T, H, dh)), (0, 2, 1, 3))
        return t

    q = ad.rope_apply(heads(n["wq"]), pos, cfg.rope_theta)
    k = ad.rope_apply(heads(n["wk"]), pos, cfg.rope_theta)
    v = heads(n["wv"])
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = ad.softmax_lastdim(ad.masked_fill(scores, causal_mask(T), -np.inf))
    ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (B, T, d))
    out = h + ctx @ model.p(n["wo"])
    if return_weights:
        return out, weights.data
    return out


def ffn(x: Tensor, model: TideModel, layer: int) -> Tensor:
    """down(silu(x @ gate) * (x @ up)), no residual."""
    n = layer_names(layer)
    gate = ad.silu(x @ model.p(n["w_gate"]))
    return (gate * (x @ model.p(n["w_up"]))) @ model.p(n["w_down"])


def ffn_block(h_tilde: Tensor, model: TideModel, layer: int) -> Tensor:
    """h = h~ + FFN(RMSNorm(h~))."""
    n = layer_names(layer)
    normed = ad.rmsnorm(h_tilde, model.p(n["ffn_norm"]), model.config.norm_eps)
    return h_tilde + ffn(normed, model, layer)


def lm_head(h: Tensor, model: TideModel) -> Tensor:
    x = ad.rmsnorm(h, model.p("final_norm"), model.config.norm_eps)
    head = model.head
    return x @ ad.transpose(head, (1, 0))


def check_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise IndexError(f"token id outside [0, {config.vocab_size})")
    if tokens.shape[1] > config.max_seq_len:
        raise ConfigError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")


def forward_base(model: TideModel, tokens, trace: bool = False) -> ForwardTrace:
    """Standard transformer forward; ignores any memory parameters."""
    tokens = as_batch(tokens)
    check_tokens(tokens, model.config)
    h = ad.embedding_lookup(model.p("embed"), tokens)
    out = ForwardTrace(logits=None)  # type: ignore[arg-type]
    if trace:
        out.hidden.append(h.data)
    for l in range(model.config.n_layers):
        h_tilde = attn_block(h, model, l)
        n = layer_names(l)
        normed = ad.rmsnorm(h_tilde, model.p(n["ffn_norm"]), model.config.norm_eps)
        h = h_tilde + ffn(normed, model, l)
        if trace:
            out.post_attn.append(h_tilde.data)
            out.normed.append(normed.data)
            out.hidden.append(h.data)
    out.logits = lm_head(h, model)
    return out


# -- Lipschitz bound ---------------------------------------------------------


def spectral_norm(A: np.ndarray, iters: int = 100, tol: float = 1e-8) -> float:
    """Largest singular value by power iteration on A^T A.

    Falls back to an exact SVD when the iteration has not met ``tol``.
    """
    A = np.asarray(A, dtype=np.float64)
    if not A.size or not np.any(A):
        return 0.0
    x = np.ones(A.shape[1]) / math.sqrt(A.shape[1])
    est = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector in the null space; retry from a deterministic generic vector
            x = np.cos(np.arange(A.shape[1]) + 1.0)
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        new = math.sqrt(ny)
        if abs(new - est) <= tol * new:
            return float(np.linalg.norm(A @ x))
        est = new
    return float(np.linalg.svd(A, compute_uv=False)[0])


def rmsnorm_output_radius(model: TideModel, layer: int) -> float:
    """Max Euclidean norm of an RMSNorm output feeding this layer's FFN."""
    gain = model.p(layer_names(layer)["ffn_norm"]).data
    return float(np.max(np.abs(gain)) * math.sqrt(model.config.d))


def ffn_lipschitz_upper(model: TideModel, layer: int, radius: float | None = None) -> float:
    """Certified Lipschitz bound of x -> FFN(x) on the ball ||x|| <= radius.

    The gated FFN grows quadratically, so no global constant exists; its
    inputs are RMSNorm outputs, whose norm is at most max|gain| * sqrt(d)
    (the default radius). On that ball the Jacobian
    diag(silu'(Gx) * Ux) G + diag(silu(Gx)) U is bounded by
    (SILU_DERIV_MAX + 1) * R * ||G|| * ||U||, using |silu(y)| <= |y|.
    This is an upper bound, not a tight estimate.
    """
    n = layer_names(layer)
    G = model.p(n["w_gate"]).data
    U = model.p(n["w_up"]).data
    D = model.p(n["w_down"]).data
    R = rmsnorm_output_radius(model, layer) if radius is None else float(radius)
    sG, sU, sD = spectral_norm(G), spectral_norm(U), spectral_norm(D)
    return sD * (SILU_DERIV_MAX + 1.0) * R * sG * sU
