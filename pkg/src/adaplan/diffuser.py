"""DDPM over fixed-horizon windows of normalized states.

The denoiser is an MLP on the flattened window concatenated with a sinusoidal
embedding of the diffusion step. Plans are conditioned on the current
observation by inpainting: the first slot is overwritten with the (normalized)
observation after every reverse step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datagen import Dataset, NormStats, denormalize, normalize, sample_windows, window_starts
from .numerics import NetParams, NetSpec, NonFiniteError, OptimState, Rng, ShapeError

COSINE_S = 0.008
ALPHA_FLOOR = 1e-3
EMB_DIM = 64
HIDDEN = (512, 512, 512)
OBS_RANGE = (-1.0, 1.0)  # observation features are clipped to this box


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Arrays indexed by diffusion step k = 0..K (entry 0 is the clean data)."""

    alphas: np.ndarray
    alpha_bars: np.ndarray
    variances: np.ndarray
    kind: str = "cosine"

    @property
    def K(self) -> int:
        return self.alphas.size - 1

    @classmethod
    def from_alphas(cls, alphas, kind: str = "custom") -> "NoiseSchedule":
        """Schedule from per-step retention factors alpha_1..alpha_K."""
        a = np.asarray(alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1 or np.any(a <= 0) or np.any(a >= 1):
            raise ValueError("alphas must lie strictly inside (0, 1)")
        alphas = np.r_[1.0, a]
        bars = np.cumprod(alphas)
        var = np.zeros_like(alphas)
        var[1:] = (1 - bars[:-1]) / (1 - bars[1:]) * (1 - alphas[1:])
        return cls(alphas, bars, var, kind)


def build_schedule(K: int = 100, s: float = COSINE_S) -> NoiseSchedule:
    """Cosine schedule with per-step alphas floored at 1e-3."""
    if K < 2:
        raise ValueError("a schedule needs K >= 2 steps")
    k = np.arange(K + 1)
    f = np.cos((k / K + s) / (1 + s) * math.pi / 2) ** 2
    bars = f / f[0]
    alphas = np.maximum(bars[1:] / bars[:-1], ALPHA_FLOOR)
    return NoiseSchedule.from_alphas(alphas, kind="cosine")


def q_sample(x0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noised sample at step ``k`` (scalar or one step per leading row)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {x0.shape}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise ValueError(f"diffusion step outside [1, {sched.K}]")
    ab = sched.alpha_bars[k]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps


def step_embedding(k, dim: int = EMB_DIM) -> np.ndarray:
    """Sinusoidal embedding, (B, dim) for a vector of steps."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserModel:
    spec: NetSpec
    params: NetParams
    horizon: int
    state_dim: int
    stats: NormStats
    emb_dim: int = EMB_DIM
    x0_range: tuple[float, float] | None = OBS_RANGE
    skip: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        flat = self.horizon * self.state_dim
        if self.spec.n_in != flat + self.emb_dim or self.spec.n_out != flat:
            raise ShapeError("denoiser net does not match horizon x state_dim")
        if self.stats.dim != self.state_dim:
            raise ShapeError("normalization stats do not match state_dim")

    @property
    def window_size(self) -> int:
        return self.horizon * self.state_dim

    def net_input(self, x: np.ndarray, k) -> np.ndarray:
        x = x.reshape(x.shape[0], -1)
        return np.concatenate([x, step_embedding(k, self.emb_dim)], axis=1)

    def skip_term(self, x: np.ndarray, k) -> np.ndarray | float:
        """Fixed part of the noise estimate, sqrt(1 - alpha_bar_k) * x_k, or 0 without skip."""
        if self.skip is None:
            return 0.0
        c = self.skip[np.broadcast_to(k, (x.shape[0],))]
        return c.reshape((-1,) + (1,) * (x.ndim - 1)) * x

    def predict_noise(self, x: np.ndarray, k) -> np.ndarray:
        """Noise estimate for a (B, H, D) batch at steps ``k``."""
        out = nx.forward(self.spec, self.params, self.net_input(x, np.broadcast_to(k, (x.shape[0],))))
        return out.reshape(x.shape) + self.skip_term(x, k)


def skip_coefficients(sched: NoiseSchedule) -> np.ndarray:
    return np.sqrt(1.0 - sched.alpha_bars)


def make_denoiser(horizon: int, state_dim: int, stats: NormStats, rng: Rng, hidden=HIDDEN,
                  activation: str = "gelu", emb_dim: int = EMB_DIM,
                  x0_range: tuple[float, float] | None = OBS_RANGE,
                  skip: NoiseSchedule | None = None) -> DenoiserModel:
    """Fresh denoiser whose network output starts at zero.

    ``x0_range`` bounds (in raw observation units) the clean-window estimate
    used during sampling; None samples with the unclipped reverse mean.

    With ``skip`` (a schedule) the noise estimate is sqrt(1 - alpha_bar_k) x_k
    plus the network output. That fixed term is the exact noise posterior mean
    for standard-normal data, so the network only learns the departure from it;
    a plain MLP narrower than the window cannot even represent the identity
    map that is optimal near k = K.
    """
    flat = horizon * state_dim
    spec = NetSpec.mlp(flat + emb_dim, hidden, flat, activation)
    coef = skip_coefficients(skip) if skip is not None else None
    return DenoiserModel(spec, nx.init_params(spec, rng, zero_last=True), horizon, state_dim, stats, emb_dim,
                         x0_range, coef)


def train_step(model: DenoiserModel, opt: OptimState, sched: NoiseSchedule, windows: np.ndarray,
               rng: Rng) -> tuple[DenoiserModel, OptimState, float]:
    """One epsilon-prediction step on a (B, H, D) batch of normalized windows.

    The first slot is held at its clean value in the noised input and left out
    of the loss.
    """
    x0 = np.asarray(windows, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0 or x0.shape[1:] != (model.horizon, model.state_dim):
        raise ShapeError(f"expected a non-empty (B, {model.horizon}, {model.state_dim}) batch, got {x0.shape}")
    B = x0.shape[0]
    k = rng.integers(1, sched.K + 1, size=B)
    eps = rng.normal(x0.shape)
    xk = q_sample(x0, k, eps, sched)
    xk[:, 0] = x0[:, 0]
    mask = np.ones_like(x0)
    mask[:, 0] = 0.0
    target = (eps * mask).reshape(B, -1)
    flat_mask = mask.reshape(B, -1)
    fixed = np.broadcast_to(model.skip_term(xk, k), xk.shape).reshape(B, -1)
    denom = B * (model.horizon - 1) * model.state_dim

    def loss_grad(out):
        diff = (out + fixed - target) * flat_mask
        return float(np.sum(diff * diff) / denom), 2.0 * diff / denom

    params, opt, loss = nx.train_step(model.spec, model.params, opt, model.net_input(xk, k), loss_grad)
    return replace(model, params=params), opt, loss


def train_diffuser(ds: Dataset, stats: NormStats, horizon: int = 16, steps: int = 20_000, batch: int = 64,
                   seed: int = 0, lr: float = 1e-3, hidden=HIDDEN, K: int = 100, log_every: int = 0,
                   callback=None, x0_range: tuple[float, float] | None = OBS_RANGE, skip: bool = True,
                   ema: float | None = 0.999) -> tuple[DenoiserModel, NoiseSchedule, list[float]]:
    """Train a denoiser from scratch; returns the model, schedule and loss curve.

    With ``ema`` set, the returned model carries an exponential moving average
    of the parameters (decay ``ema`` per step) instead of the last iterate; the
    loss curve always tracks the iterate being optimized.
    """
    if ema is not None and not 0.0 <= ema < 1.0:
        raise ValueError(f"ema decay must lie in [0, 1), got {ema}")
    rng = Rng(seed)
    sched = build_schedule(K)
    model = make_denoiser(horizon, ds.obs_dim, stats, rng.split("init"), hidden=hidden, x0_range=x0_range,
                          skip=sched if skip else None)
    opt = OptimState.for_params(model.params, lr=lr)
    data_rng, noise_rng = rng.split("windows"), rng.split("noise")
    starts = window_starts(ds, horizon)
    avg = model.params.flat.copy() if ema is not None else None
    losses = []
    for i in range(steps):
        wb = sample_windows(ds, stats, horizon, batch, data_rng, starts)
        model, opt, loss = train_step(model, opt, sched, wb.windows, noise_rng)
        losses.append(loss)
        if avg is not None:
            avg *= ema
            avg += (1.0 - ema) * model.params.flat
        if callback is not None and log_every and (i + 1) % log_every == 0:
            callback(i + 1, float(np.mean(losses[-log_every:])))
    if avg is not None:
        model = replace(model, params=NetParams(model.spec, avg))
    return model, sched, losses


# ---------------------------------------------------------------------------
# sampling


@dataclass
class PlanBuffer:
    """Planned states (denormalized), a cursor into them and the creation step."""

    states: np.ndarray
    cursor: int = 0
    created_at: int = 0

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def __post_init__(self):
        if not 0 <= self.cursor <= self.horizon - 1:
            raise ValueError(f"cursor {self.cursor} outside [0, {self.horizon - 1}]")


@dataclass
class NfeCounter:
    """Running total of denoiser evaluations."""

    count: int = 0


def _reverse(model: DenoiserModel, sched: NoiseSchedule, cond: np.ndarray, rng: Rng) -> np.ndarray:
    B = cond.shape[0]
    x = rng.normal((B, model.horizon, model.state_dim))
    x[:, 0] = cond
    if model.x0_range is not None:
        lo = normalize(np.full(model.state_dim, model.x0_range[0]), model.stats)
        hi = normalize(np.full(model.state_dim, model.x0_range[1]), model.stats)
    for k in range(sched.K, 0, -1):
        eps = model.predict_noise(x, k)
        a, ab, ab_prev = sched.alphas[k], sched.alpha_bars[k], sched.alpha_bars[k - 1]
        if model.x0_range is None:
            mean = (x - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        else:
            # same mean written through the clean-window estimate, which is
            # clipped to the data box; near k = K the 1/sqrt(alpha) factor
            # otherwise amplifies any error in the noise estimate
            x0 = np.clip((x - math.sqrt(1 - ab) * eps) / math.sqrt(ab), lo, hi)
            mean = (math.sqrt(ab_prev) * (1 - a) * x0 + math.sqrt(a) * (1 - ab_prev) * x) / (1 - ab)
        if k > 1:
            x = mean + math.sqrt(sched.variances[k]) * rng.normal(x.shape)
        else:
            x = mean
        x[:, 0] = cond
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("sampled plan contains non-finite values")
    return x


def _check_model(model: DenoiserModel) -> None:
    if not np.all(np.isfinite(model.params.flat)):
        raise NonFiniteError("denoiser parameters contain NaN/inf")


def sample_plan(model: DenoiserModel, sched: NoiseSchedule, obs, rng: Rng, counter: NfeCounter | None = None,
                t: int = 0) -> PlanBuffer:
    """Reverse-diffuse one window conditioned on ``obs`` in the first slot."""
    _check_model(model)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (model.state_dim,):
        raise ShapeError(f"observation shape {obs.shape} != ({model.state_dim},)")
    x = _reverse(model, sched, normalize(obs, model.stats)[None, :], rng)[0]
    states = denormalize(x, model.stats)
    states[0] = obs
    if counter is not None:
        counter.count += sched.K
    return PlanBuffer(states, 0, t)


def sample_plans(model: DenoiserModel, sched: NoiseSchedule, obs_batch, rng: Rng,
                 counter: NfeCounter | None = None) -> np.ndarray:
    """Batched variant of :func:`sample_plan` returning a (B, H, D) array."""
    _check_model(model)
    obs_batch = np.asarray(obs_batch, dtype=np.float64)
    x = _reverse(model, sched, normalize(obs_batch, model.stats), rng)
    states = denormalize(x, model.stats)
    states[:, 0] = obs_batch
    if counter is not None:
        counter.count += sched.K * obs_batch.shape[0]
    return states


@dataclass
class DiffusionPlanner:
    """Model + schedule bound together; the planner talks to this object."""

    model: DenoiserModel
    schedule: NoiseSchedule
    counter: NfeCounter = field(default_factory=NfeCounter)

    @property
    def horizon(self) -> int:
        return self.model.horizon

    @property
    def state_dim(self) -> int:
        return self.model.state_dim

    @property
    def nfe_per_plan(self) -> int:
        return self.schedule.K

    def plan(self, obs, rng: Rng, t: int = 0, counter: NfeCounter | None = None) -> PlanBuffer:
        return sample_plan(self.model, self.schedule, obs, rng, counter or self.counter, t)


# ---------------------------------------------------------------------------
# persistence


def save_denoiser(path, model: DenoiserModel, sched: NoiseSchedule, seed: int | None = None,
                  meta: dict | None = None) -> None:
    """Checkpoint at ``path`` plus a ``<path>.json`` sidecar."""
    path = Path(path)
    nx.save_checkpoint(path, model.params, seed=seed, meta=meta)
    side = {
        "horizon": model.horizon,
        "state_dim": model.state_dim,
        "K": sched.K,
        "schedule": sched.kind,
        "emb_dim": model.emb_dim,
        "x0_range": list(model.x0_range) if model.x0_range is not None else None,
        "skip": model.skip is not None,
        "norm_stats_sha256": model.stats.digest(),
        "norm_stats": model.stats.to_dict(),
    }
    Path(str(path) + ".json").write_text(json.dumps(side, sort_keys=True) + "\n")


def load_denoiser(path) -> tuple[DenoiserModel, NoiseSchedule]:
    params, _ = nx.load_checkpoint(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    stats = NormStats.from_dict(side["norm_stats"])
    if stats.digest() != side["norm_stats_sha256"]:
        raise ValueError(f"{path}: normalization stats hash mismatch")
    if side["schedule"] != "cosine":
        raise ValueError(f"unsupported schedule {side['schedule']!r}")
    box = side.get("x0_range")
    sched = build_schedule(side["K"])
    model = DenoiserModel(params.spec, params, side["horizon"], side["state_dim"], stats, side["emb_dim"],
                          tuple(box) if box is not None else None,
                          skip_coefficients(sched) if side.get("skip") else None)
    return model, sched
