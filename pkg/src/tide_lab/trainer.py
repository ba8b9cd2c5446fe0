"""Training loop: warmup + cosine schedule, Adam with decoupled weight decay,
cross-entropy with z-loss, global-norm clipping, and per-bin evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, model_from_checkpoint, model_checkpoint, read_checkpoint, write_checkpoint
from .corpus import FrequencyBinTable, TIERS, bin_tier
from .errors import ConfigError, OptimizerStateError, TrainingDivergence
from .memory import forward_tide
from .model import ForwardTrace, TideModel, forward_base


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the schedule shape and Adam betas follow the
    reference recipe, the magnitudes are scaled for tiny models."""

    batch_size: int = 8
    seq_len: int = 32
    steps: int = 2000
    warmup_init_lr: float = 1e-6
    warmup_iters: int = 100
    max_lr: float = 3e-3
    min_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    z_coeff: float = 1e-6
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1 or self.steps < 0:
            raise ConfigError("batch_size and seq_len must be >= 1, steps >= 0")
        if self.warmup_iters < 0 or self.warmup_iters > self.steps:
            raise ConfigError(f"warmup_iters={self.warmup_iters} must lie in [0, steps={self.steps}]")
        if self.min_lr > self.max_lr:
            raise ConfigError("min_lr must not exceed max_lr")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_init_lr`` to ``max_lr`` over
    ``warmup_iters`` steps, then cosine decay reaching ``min_lr`` at the last
    step (``steps - 1``)."""
    if step < cfg.warmup_iters:
        return cfg.warmup_init_lr + (cfg.max_lr - cfg.warmup_init_lr) * step / cfg.warmup_iters
    span = cfg.steps - 1 - cfg.warmup_iters
    if span <= 0:
        return cfg.max_lr if step == cfg.warmup_iters else cfg.min_lr
    progress = min(1.0, (step - cfg.warmup_iters) / span)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, ad.Tensor]) -> "AdamState":
        return cls(
            {n: np.zeros_like(p.data) for n, p in params.items()},
            {n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adam_update(
    params: dict[str, ad.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected Adam step with decoupled weight decay.

    Decay multiplies matrices (ndim >= 2) by (1 - lr * wd) before the step;
    norm gains are not decayed.
    """
    if set(state.m) != set(params) or set(state.v) != set(params):
        raise OptimizerStateError("optimizer state names differ from parameter names")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or v.shape != p.shape or g.shape != p.shape:
            raise OptimizerStateError(f"{name}: state {m.shape}/{v.shape}, grad {g.shape}, param {p.shape}")
        if cfg.weight_decay and p.data.ndim >= 2:
            p.data *= 1.0 - lr * cfg.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# -- steps -------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    grad_norm: float


def model_forward(model: TideModel, arch: str) -> Callable[..., ForwardTrace]:
    if arch == "base":
        return lambda tokens, **kw: forward_base(model, tokens, **kw)
    if arch == "tide":
        return lambda tokens, **kw: forward_tide(model, tokens, **kw)
    raise ConfigError(f"unknown arch {arch!r}; expected 'base' or 'tide'")


def collect_grads(model: TideModel) -> dict[str, np.ndarray]:
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in model.params.items()}


def train_step(
    model: TideModel,
    batch: np.ndarray,
    state: AdamState,
    cfg: TrainConfig,
    step: int,
    arch: str = "tide",
    grad_hook: Callable[[TideModel, np.ndarray, dict], None] | None = None,
) -> StepMetrics:
    """Forward, loss, backward, clip, update on a (B, T+1) window batch."""
    inputs, targets = batch[:, :-1], batch[:, 1:]
    model.zero_grad()
    logits = model_forward(model, arch)(inputs).logits
    loss = ad.cross_entropy_with_zloss(logits, targets, cfg.z_coeff)
    value = float(loss.data)
    lr = lr_schedule(step, cfg)
    if not math.isfinite(value):
        raise TrainingDivergence(
            f"non-finite loss {value} at step {step}",
            dump={
                "step": step,
                "lr": lr,
                "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in model.params.items()},
                "batch": batch.tolist(),
            },
        )
    ad.backward(loss)
    grads = collect_grads(model)
    if grad_hook is not None:
        grad_hook(model, batch, grads)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if cfg.grad_clip and norm > cfg.grad_clip:
        factor = cfg.grad_clip / norm
        grads = {n: g * factor for n, g in grads.items()}
    adam_update(model.params, grads, state, lr, cfg)
    return StepMetrics(step, value, lr, norm)


class Trainer:
    """Owns a model, its optimizer state, and the batch RNG."""

    def __init__(self, model: TideModel, train_tokens: np.ndarray, cfg: TrainConfig, arch: str = "tide"):
        model_forward(model, arch)
        self.model = model
        self.tokens = np.asarray(train_tokens, dtype=np.int64)
        if self.tokens.size < cfg.seq_len + 1:
            raise ConfigError(f"training stream of {self.tokens.size} tokens is shorter than seq_len + 1")
        self.cfg = cfg
        self.arch = arch
        self.state = AdamState.zeros(model.params)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.history: list[StepMetrics] = []

    def sample_batch(self) -> np.ndarray:
        T = self.cfg.seq_len
        starts = self.rng.integers(0, self.tokens.size - T, size=self.cfg.batch_size)
        return self.tokens[starts[:, None] + np.arange(T + 1)[None, :]]

    def train_step(self, grad_hook=None) -> StepMetrics:
        metrics = train_step(self.model, self.sample_batch(), self.state, self.cfg, self.step, self.arch, grad_hook)
        self.step += 1
        self.history.append(metrics)
        return metrics

    def run(self, steps: int | None = None, grad_hook=None, on_checkpoint=None) -> list[StepMetrics]:
        end = self.cfg.steps if steps is None else self.step + steps
        out = []
        while self.step < end:
            out.append(self.train_step(grad_hook))
            every = self.cfg.checkpoint_every
            if on_checkpoint and every and self.step % every == 0:
                on_checkpoint(self)
        return out

    # -- persistence -----------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        extra = {}
        for n in self.model.params:
            extra[f"optim.m.{n}"] = self.state.m[n]
            extra[f"optim.v.{n}"] = self.state.v[n]
        meta = {
            "arch": self.arch,
            "step": self.step,
            "adam_t": self.state.t,
            "rng": self.rng.bit_generator.state,
            "train": asdict(self.cfg),
        }
        return model_checkpoint(self.model, meta=meta, extra=extra)

    def save(self, path) -> None:
        write_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str, train_tokens: np.ndarray) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = read_checkpoint(ckpt)
        meta = ckpt.config["meta"]
        model = model_from_checkpoint(ckpt)
        tr = cls(model, train_tokens, TrainConfig(**meta["train"]), meta["arch"])
        tr.step = meta["step"]
        tr.state.t = meta["adam_t"]
        for n in model.params:
            tr.state.m[n] = ckpt.records[f"optim.m.{n}"].copy()
            tr.state.v[n] = ckpt.records[f"optim.v.{n}"].copy()
        tr.rng.bit_generator.state = meta["rng"]
        return tr


# -- evaluation --------------------------------------------------------------


def split_train_val(tokens: np.ndarray, val_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """The last ``val_fraction`` of the stream is held out."""
    n_val = max(1, int(round(len(tokens) * val_fraction)))
    return tokens[:-n_val], tokens[-n_val:]


def per_token_losses(
    model: TideModel, tokens: np.ndarray, seq_len: int, arch: str = "tide", batch_windows: int = 16, **forward_kw
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy of every next-token prediction over non-overlapping
    windows. Returns (targets, losses)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    fwd = model_forward(model, arch)
    n_full = (len(tokens) - 1) // seq_len
    targets_out, losses_out = [], []
    idx = np.arange(seq_len + 1)
    with ad.no_grad():
        for start in range(0, n_full, batch_windows):
            rows = np.arange(start, min(n_full, start + batch_windows)) * seq_len
            win = tokens[rows[:, None] + idx[None, :]]
            logits = fwd(win[:, :-1], **forward_kw).logits.data
            targets_out.append(win[:, 1:].ravel())
            losses_out.append(ad.per_token_cross_entropy(logits, win[:, 1:]).ravel())
        tail = n_full * seq_len
        if len(tokens) - 1 - tail > 0:
            win = tokens[tail:]
            logits = fwd(win[None, :-1], **forward_kw).logits.data
            targets_out.append(win[1:])
            losses_out.append(ad.per_token_cross_entropy(logits, win[None, 1:]).ravel())
    if not targets_out:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(targets_out), np.concatenate(losses_out)


def evaluate_perplexity(model: TideModel, tokens: np.ndarray, seq_len: int, arch: str = "tide", **forward_kw) -> float:
    _, losses = per_token_losses(model, tokens, seq_len, arch, **forward_kw)
    return float(np.exp(np.mean(losses)))


@dataclass
class BinLossReport:
    bin_mean: np.ndarray
    bin_count: np.ndarray
    tier_mean: dict[str, float]
    tier_count: dict[str, int]
    unbinned_mean: float
    unbinned_count: int
    global_mean: float
    n_tokens: int
    bin_tiers: list[str] = field(default_factory=list)

    def recombined_mean(self) -> float:
        total = float(np.sum(np.where(self.bin_count > 0, self.bin_mean, 0.0) * self.bin_count))
        if self.unbinned_count:
            total += self.unbinned_mean * self.unbinned_count
        return total / self.n_tokens

    def rows(self) -> list[dict]:
        return [
            {"bin": b, "tier": self.bin_tiers[b], "count": int(self.bin_count[b]), "mean_ce": float(self.bin_mean[b])}
            for b in range(len(self.bin_count))
        ]


def bin_loss_report(targets: np.ndarray, losses: np.ndarray, bins: FrequencyBinTable) -> BinLossReport:
    B = bins.bin_count
    tb = bins.bins[targets]
    binned = tb >= 0
    count = np.bincount(tb[binned], minlength=B)
    sums = np.bincount(tb[binned], weights=losses[binned], minlength=B)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, sums / np.maximum(count, 1), np.nan)
    tiers = [bin_tier(b) if B == 10 else "all" for b in range(B)]
    tier_mean, tier_count = {}, {}
    for tier in (TIERS if B == 10 else ("all",)):
        sel = np.array([t == tier for t in tiers])
        c = int(count[sel].sum())
        tier_count[tier] = c
        tier_mean[tier] = float(sums[sel].sum() / c) if c else float("nan")
    un = ~binned
    n = len(losses)
    return BinLossReport(
        bin_mean=mean,
        bin_count=count,
        tier_mean=tier_mean,
        tier_count=tier_count,
        unbinned_mean=float(losses[un].mean()) if un.any() else float("nan"),
        unbinned_count=int(un.sum()),
        global_mean=float(losses.mean()) if n else float("nan"),
        n_tokens=n,
        bin_tiers=tiers,
    )


def eval_per_bin(
    model: TideModel, eval_tokens: np.ndarray, bins: FrequencyBinTable, seq_len: int, arch: str = "tide"
) -> BinLossReport:
    """Per-target loss bucketed by the target token's frequency bin."""
    targets, losses = per_token_losses(model, eval_tokens, seq_len, arch)
    return bin_loss_report(targets, losses, bins)
