"""Conditional point-cloud super-resolution with a DDPM.

The known sparse points (the condition) stay fixed; only the points to be
generated are noised and denoised. The denoiser predicts the added noise for
every slot of ``(condition, generated)`` and the loss masks out condition slots.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, Adam, Module, Tensor
from .geometry import (CloudPair, DegeneratePairError, PointCloud, denormalize, make_training_pair,
                       normalize, sample_retentions)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. Arrays are indexed by step ``t`` in ``0..T``;
    entry 0 is the clean-data sentinel (beta 0, alpha_bar 1)."""

    T: int
    beta0: float
    betaT: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step must lie in [1, {self.T}], got {t}")

    def descriptor(self) -> dict:
        return {"T": self.T, "beta0": self.beta0, "betaT": self.betaT}


def linear_schedule(T: int, beta0: float, betaT: float) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta0 < betaT < 1.0:
        raise ValueError(f"need 0 < beta0 < betaT < 1, got beta0={beta0}, betaT={betaT}")
    betas = np.concatenate([[0.0], beta0 + (np.arange(T) / (T - 1)) * (betaT - beta0)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta0, betaT, betas, alphas, alpha_bars)


def scaled_schedule(T: int, beta0: float = 1e-4, betaT: float = 0.01, reference_T: int = 1000) -> NoiseSchedule:
    """Shorter chain with betas scaled by ``reference_T / T`` so the total
    noise (and hence alpha_bar at the last step) stays comparable."""
    k = reference_T / T
    return linear_schedule(T, beta0 * k, betaT * k)


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    c = values[np.asarray(t)]
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int or one int per leading batch entry of ``x0``.
    """
    schedule.check_t(t)
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match points {x0.shape}")
    ab = _coef(schedule.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """One forward transition ``x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)``."""
    schedule.check_t(t)
    b = schedule.betas[t]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DiffusionState:
    condition: np.ndarray  # (m, 3) or (B, m, 3); never modified
    noisy: np.ndarray  # (n, 3) or (B, n, 3)
    t: int


class Denoiser(Module):
    """Noise predictor over ``(condition, generated)`` point sets.

    Shared per-point MLPs embed the noisy and the condition points; each set
    is max-pooled into a global code. Every point then gets
    ``[xyz, noisy code, condition code, time embedding]`` through a 4-layer
    head, with ``xyz`` optionally frequency-encoded. Outputs are equivariant
    to permutations of either set and the generated-point outputs are
    invariant to permuting the condition.
    """

    def __init__(self, rng: np.random.Generator, hidden: int = 128, code_dim: int = 128,
                 point_hidden: int = 64, time_dim: int = 64, coord_freqs: int = 0, dtype=np.float32):
        self.arch = {"hidden": hidden, "code_dim": code_dim, "point_hidden": point_hidden, "time_dim": time_dim,
                     "coord_freqs": coord_freqs}
        self.time_dim = time_dim
        self.coord_freqs = coord_freqs
        self.dtype = np.dtype(dtype)
        self.noisy_encoder = MLP([3, point_hidden, code_dim], rng, dtype=dtype)
        self.cond_encoder = MLP([3, point_hidden, code_dim], rng, dtype=dtype)
        xyz_dim = dc.encoding_dim(3, coord_freqs) if coord_freqs else 3
        self.head = MLP([xyz_dim + 2 * code_dim + time_dim, hidden, hidden, hidden, 3], rng, dtype=dtype)

    def forward_full(self, condition, noisy, t) -> Tensor:
        """Predicted noise for every slot, condition slots first: (B, m + n, 3)."""
        cond = np.asarray(condition, dtype=self.dtype)
        noisy_t = noisy if isinstance(noisy, Tensor) else Tensor(np.asarray(noisy, dtype=self.dtype))
        batched = cond.ndim == 3
        if not batched:
            cond, noisy_t = cond[None], dc.reshape(noisy_t, (1,) + noisy_t.shape)
        B, m, _ = cond.shape
        n = noisy_t.shape[1]
        t = np.broadcast_to(np.asarray(t), (B,))
        noisy_code = dc.tmax(dc.silu(self.noisy_encoder(noisy_t)), axis=1)  # (B, C)
        cond_code = dc.tmax(dc.silu(self.cond_encoder(cond)), axis=1)
        temb = dc.sinusoidal_embedding(t, self.time_dim).astype(self.dtype)
        context = dc.concat([noisy_code, cond_code, Tensor(temb)], axis=-1)  # (B, 2C + E)
        context = dc.broadcast_to(dc.reshape(context, (B, 1, context.shape[-1])), (B, m + n, context.shape[-1]))
        if self.coord_freqs:
            # point coordinates are data, never parameters, so the encoding stays outside the graph
            xyz_np = np.concatenate([cond, noisy_t.data], axis=1)
            xyz = Tensor(dc.positional_encoding(xyz_np, self.coord_freqs).astype(self.dtype))
        else:
            xyz = dc.concat([Tensor(cond), noisy_t], axis=1)
        out = self.head(dc.concat([xyz, context], axis=-1))
        return out if batched else dc.reshape(out, out.shape[1:])

    def __call__(self, state: DiffusionState) -> np.ndarray:
        return denoiser_forward(self, state)


def denoiser_forward(model: Denoiser, state: DiffusionState) -> np.ndarray:
    """Predicted noise for the generated points only."""
    with dc.no_grad():
        full = model.forward_full(state.condition, state.noisy, state.t).data
    m = np.asarray(state.condition).shape[-2]
    return full[..., m:, :].astype(np.float64)


def diffusion_loss(model, condition, x0_extra, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Masked noise-prediction MSE over the generated points.

    Arrays may be single clouds or batches with a leading batch axis; ``t``
    is an int or one int per batch entry.
    """
    x0_extra = np.asarray(x0_extra)
    if x0_extra.shape[-2] == 0:
        raise ValueError("diffusion loss needs at least one point to generate")
    xt = q_sample(x0_extra, t, eps, schedule)
    dtype = getattr(model, "dtype", np.float64)
    pred = model.forward_full(condition, xt.astype(dtype), t)
    m = np.asarray(condition).shape[-2]
    lead = x0_extra.shape[:-2]
    target = np.concatenate([np.zeros(lead + (m, 3)), eps], axis=-2).astype(pred.dtype)
    mask = np.concatenate([np.zeros(lead + (m, 1)), np.ones(lead + (x0_extra.shape[-2], 1))], axis=-2).astype(pred.dtype)
    resid = dc.sub(target, pred) * mask
    return dc.tsum(dc.square(resid)) * (1.0 / eps.size)


def pair_loss(model, pair: CloudPair, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    return diffusion_loss(model, pair.condition.points, pair.target_extra.points, t, eps, schedule)


def posterior_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``(x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)``."""
    b, a, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
    return (x_t - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)


def reverse_step(model, state: DiffusionState, schedule: NoiseSchedule, noise: np.ndarray | None,
                 eps_hat: np.ndarray | None = None) -> DiffusionState:
    """One ancestral step ``t -> t-1`` with variance ``beta_t``; noiseless at ``t = 1``.

    ``eps_hat`` overrides the network prediction. The condition array is
    passed through untouched.
    """
    schedule.check_t(state.t)
    if eps_hat is None:
        eps_hat = denoiser_forward(model, state)
    mu = posterior_mean(np.asarray(state.noisy, dtype=np.float64), state.t, eps_hat, schedule)
    if state.t > 1:
        mu = mu + math.sqrt(schedule.betas[state.t]) * noise
    return DiffusionState(state.condition, mu, state.t - 1)


def _chunk_sizes(n: int, chunk: int) -> list[int]:
    k = math.ceil(n / chunk)
    base, rem = divmod(n, k)
    return [base + 1] * rem + [base] * (k - rem)


def sample_superresolution(model, condition: PointCloud, n_generate: int, schedule: NoiseSchedule,
                           seed: int, chunk_size: int | None = None,
                           callback: Callable[[DiffusionState], None] | None = None) -> PointCloud:
    """Generate ``n_generate`` points around a (normalized) condition cloud.

    Generation runs in chunks of at most ``chunk_size`` points (default:
    ``len(condition)``), each an independent reverse trajectory sharing the
    condition. Returns the condition followed by the generated points.
    """
    if n_generate < 1:
        raise ValueError("n_generate must be >= 1")
    rng = np.random.default_rng(seed)
    cond = condition.points
    sizes = _chunk_sizes(n_generate, chunk_size or max(len(cond), 1))
    out = []
    for size in sorted(set(sizes), reverse=True):
        count = sizes.count(size)
        cond_b = np.broadcast_to(cond, (count,) + cond.shape)
        state = DiffusionState(cond_b, rng.standard_normal((count, size, 3)), schedule.T)
        while state.t >= 1:
            noise = rng.standard_normal(state.noisy.shape) if state.t > 1 else None
            state = reverse_step(model, state, schedule, noise)
            if callback is not None:
                callback(state)
        out.append(state.noisy.reshape(-1, 3))
    return PointCloud(np.concatenate([cond] + out, axis=0))


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionConfig:
    T: int = 1000  # reference schedule length
    beta0: float = 1e-4
    betaT: float = 0.01
    reference_T: int = 0  # > 0: scale betas by reference_T / T (short desk chains)
    lr: float = 2e-4
    lr_schedule: str = "constant"  # or "cosine": anneal to zero over the run
    ema: float = 0.0  # > 0: sample from an exponential moving average of the weights
    steps: int = 5000
    batch_size: int = 8
    retention_low: float = 0.2
    retention_high: float = 1.0
    hidden: int = 128
    code_dim: int = 128
    point_hidden: int = 64
    time_dim: int = 64
    coord_freqs: int = 0  # > 0: frequency-encode point coordinates at the head input
    upsample_factor: int = 4
    chunk_size: int = 0  # 0: as many points per trajectory as the condition has
    seed: int = 0
    log_every: int = 250

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError(f"ema decay must be in [0, 1), got {self.ema}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))
        return self.lr

    def schedule(self) -> NoiseSchedule:
        if self.reference_T:
            return scaled_schedule(self.T, self.beta0, self.betaT, self.reference_T)
        return linear_schedule(self.T, self.beta0, self.betaT)

    def build_model(self, rng: np.random.Generator) -> Denoiser:
        return Denoiser(rng, self.hidden, self.code_dim, self.point_hidden, self.time_dim, self.coord_freqs)


@dataclass
class TrainResult:
    model: Denoiser
    schedule: NoiseSchedule
    losses: list[float]


def draw_batch(source: PointCloud, cfg: DiffusionConfig, rng: np.random.Generator):
    """B pairs sharing one retention draw, so condition/target sizes agree."""
    while True:
        r1, r2 = sample_retentions(rng, cfg.retention_low, cfg.retention_high)
        try:
            pairs = [make_training_pair(source, r1, r2, rng) for _ in range(cfg.batch_size)]
        except DegeneratePairError:
            continue
        cond = np.stack([p.condition.points for p in pairs])
        extra = np.stack([p.target_extra.points for p in pairs])
        return cond, extra


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train_diffusion(source: PointCloud, cfg: DiffusionConfig, checkpoint: str | Path | None = None,
                    model: Denoiser | None = None) -> TrainResult:
    """Fit the denoiser on nested-downsample pairs of a normalized ``source`` cloud."""
    rng = np.random.default_rng(cfg.seed)
    schedule = cfg.schedule()
    model = model or cfg.build_model(rng)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    losses: list[float] = []
    last_good = _snapshot(params)
    ema = _snapshot(params) if cfg.ema else None
    for step in range(cfg.steps):
        cond, extra = draw_batch(source, cfg, rng)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal(extra.shape)
        opt.zero_grad()
        loss = diffusion_loss(model, cond, extra, t, eps, schedule)
        value = loss.item()
        if not math.isfinite(value):
            if checkpoint is not None:
                save_denoiser(checkpoint, model, schedule, cfg, state=last_good)
            raise TrainingDiverged(f"non-finite diffusion loss at step {step}")
        loss.backward()
        opt.state.lr = cfg.lr_at(step)
        opt.step()
        last_good = _snapshot(params)
        if ema is not None:
            for k, p in params.items():
                ema[k] += (1.0 - cfg.ema) * (p.data - ema[k])
        losses.append(value)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("diffusion step %d/%d loss %.4f", step + 1, cfg.steps, float(np.mean(losses[-cfg.log_every:])))
    if ema is not None:
        for k, p in params.items():
            p.data[...] = ema[k]
    if checkpoint is not None:
        save_denoiser(checkpoint, model, schedule, cfg)
    return TrainResult(model, schedule, losses)


def save_denoiser(path, model: Denoiser, schedule: NoiseSchedule, cfg: DiffusionConfig | None = None,
                  state: dict[str, np.ndarray] | None = None) -> None:
    meta = {"kind": "denoiser", "schedule": schedule.descriptor(), "arch": model.arch}
    if cfg is not None:
        meta["config"] = asdict(cfg)
    dc.save_checkpoint(path, state or model.state_dict(), meta)


def load_denoiser(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    tensors, meta = dc.load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise dc.CheckpointError(f"{path}: not a denoiser checkpoint (kind={meta.get('kind')!r})")
    model = Denoiser(np.random.default_rng(0), **meta["arch"])
    model.load_state_dict(tensors)
    s = meta["schedule"]
    return model, linear_schedule(s["T"], s["beta0"], s["betaT"]), meta


def upsample_cloud(model: Denoiser, schedule: NoiseSchedule, cloud: PointCloud, factor: int = 4,
                   seed: int = 0, chunk_size: int | None = None) -> PointCloud:
    """Densify ``cloud`` by ``factor`` in its own normalized frame."""
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    norm_cloud, tf = normalize(cloud)
    dense = sample_superresolution(model, norm_cloud, (factor - 1) * len(cloud), schedule, seed, chunk_size)
    out = denormalize(dense, tf)
    # keep the given points bit-exact rather than round-tripped through the transform
    out.points[: len(cloud)] = cloud.points
    return out
