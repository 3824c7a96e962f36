"""Offline dataset collection, normalization and training-window sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import dynalanes as dl
from .dynalanes import EnvConfig, EnvState
from .numerics import Rng

# expert thresholds (m/s^2)
FASTER_ACCEL = 0.5
SLOWER_ACCEL = -1.0
MOBIL_GAIN = 0.2
SAFE_IMPOSED_DECEL = 4.0
STD_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# behaviour policy


def lane_neighbors(state: EnvState, lane: int):
    """Nearest traffic ahead of and behind the ego in ``lane``.

    Returns ``(front_gap, front_speed, rear_gap, rear_speed)`` where gaps are
    bumper-to-bumper; missing vehicles give ``inf`` gap and ``None`` speed.
    Vehicles mid-lane-change count in both lanes they touch.
    """
    cfg, tr = state.config, state.traffic
    if len(tr) == 0:
        return math.inf, None, math.inf, None
    in_lane = (tr.lane == lane) | ((tr.lc_ticks >= 0) & (tr.target_lane == lane))
    if not in_lane.any():
        return math.inf, None, math.inf, None
    dx = dl.wrap_dx(tr.x[in_lane] - state.ego.x, cfg.road_length)
    sp = tr.speed[in_lane]
    front_gap, front_speed, rear_gap, rear_speed = math.inf, None, math.inf, None
    ahead = dx >= 0
    if ahead.any():
        j = np.argmin(np.where(ahead, dx, np.inf))
        front_gap, front_speed = float(dx[j]) - cfg.vehicle_length, float(sp[j])
    if (~ahead).any():
        j = np.argmax(np.where(~ahead, dx, -np.inf))
        rear_gap, rear_speed = float(-dx[j]) - cfg.vehicle_length, float(sp[j])
    return front_gap, front_speed, rear_gap, rear_speed


def _ego_accel(state: EnvState, lane: int) -> float:
    cfg = state.config
    gap, lead, _, _ = lane_neighbors(state, lane)
    if gap > cfg.obs_range:
        lead = None
    return dl.idm_accel(state.ego.speed, gap, lead, cfg, desired_speed=cfg.v_max)


def expert_action(state: EnvState) -> int:
    """IDM speed keeping plus a MOBIL-style lane-change test."""
    cfg, ego = state.config, state.ego
    if ego.changing:
        acc = min(_ego_accel(state, ego.lane), _ego_accel(state, ego.target_lane))
    else:
        acc = _ego_accel(state, ego.lane)
    # a lane change keeps the ego in its lane for two more steps, so an
    # emergency is handled by braking
    if not ego.changing and acc >= -cfg.idm_comfort_decel:
        best, best_gain = None, MOBIL_GAIN
        for action, d in ((dl.LANE_RIGHT, 1), (dl.LANE_LEFT, -1)):
            lane = ego.lane + d
            if not 0 <= lane < cfg.lanes:
                continue
            front_gap, _, rear_gap, rear_speed = lane_neighbors(state, lane)
            if front_gap < cfg.idm_min_gap or rear_gap < cfg.idm_min_gap:
                continue
            if rear_speed is not None:
                imposed = dl.idm_accel(rear_speed, rear_gap, ego.speed, cfg)
                if imposed < -SAFE_IMPOSED_DECEL:
                    continue
            gain = _ego_accel(state, lane) - acc
            if gain > best_gain:
                best, best_gain = action, gain
        if best is not None:
            return best
    if acc > FASTER_ACCEL and ego.speed < cfg.v_max:
        return dl.FASTER
    if acc < SLOWER_ACCEL:
        return dl.SLOWER
    return dl.IDLE


def behavior_action(state: EnvState, rng: Rng, noise: float = 0.1) -> int:
    """Expert action, replaced by a uniform random one with probability ``noise``."""
    if noise > 0 and rng.uniform() < noise:
        return int(rng.integers(dl.N_ACTIONS))
    return expert_action(state)


@dataclass(frozen=True)
class BehaviorPolicy:
    noise: float = 0.1

    def __call__(self, state: EnvState, rng: Rng) -> int:
        return behavior_action(state, rng, self.noise)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    """Transitions stored column-wise; episodes are contiguous blocks."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    header: dict

    def __post_init__(self):
        n = self.obs.shape[0]
        for name in ("actions", "rewards", "next_obs", "dones", "episode", "step"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column {name} has the wrong length")

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        """Start index of every episode plus a final end sentinel."""
        starts = np.flatnonzero(np.r_[True, self.episode[1:] != self.episode[:-1]])
        return np.r_[starts, len(self)]

    @property
    def episode_lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def n_episodes(self) -> int:
        return self.offsets.size - 1

    def collision_rate(self) -> float:
        ends = self.offsets[1:] - 1
        causes = self.header.get("causes")
        if causes is not None:
            return float(np.mean([c == "collision" for c in causes]))
        return float(np.mean(self.step[ends] + 1 < self.header.get("max_steps", 100)))

    def split_episodes(self, fraction: float) -> tuple["Dataset", "Dataset"]:
        """First ``fraction`` of episodes and the rest."""
        off = self.offsets
        k = max(1, min(self.n_episodes - 1, int(round(fraction * self.n_episodes))))
        return self._slice(0, off[k]), self._slice(off[k], len(self))

    def _slice(self, a: int, b: int) -> "Dataset":
        return Dataset(self.obs[a:b], self.actions[a:b], self.rewards[a:b], self.next_obs[a:b],
                       self.dones[a:b], self.episode[a:b], self.step[a:b], dict(self.header))


def collect(config: EnvConfig, policy: Callable[[EnvState, Rng], int] | None = None,
            total_steps: int = 100_000, seed: int = 0, min_steps: int | None = None) -> Dataset:
    """Roll episodes until at least ``total_steps`` transitions are stored.

    Episodes ending in collision are kept. Episodes with fewer than two
    transitions are dropped (they give no usable window or pair).
    """
    if min_steps is not None and total_steps < min_steps:
        raise ValueError(f"step budget {total_steps} below minimum {min_steps}")
    policy = policy or BehaviorPolicy()
    root = Rng(seed)
    cols = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "dones", "episode", "step")}
    causes = []
    n, ep, kept = 0, 0, 0
    while n < total_steps:
        env_seed = int(root.split("env").split(ep).integers(2**31))
        prng = root.split("policy").split(ep)
        state, obs = dl.reset(config, env_seed)
        rows = []
        while not state.done:
            a = int(policy(state, prng))
            state, nobs, r, done, _ = dl.step(state, a)
            rows.append((obs, a, r, nobs, done))
            obs = nobs
        ep += 1
        if len(rows) < 2:
            continue
        for t, (o, a, r, no, d) in enumerate(rows):
            cols["obs"].append(o)
            cols["actions"].append(a)
            cols["rewards"].append(r)
            cols["next_obs"].append(no)
            cols["dones"].append(d)
            cols["episode"].append(kept)
            cols["step"].append(t)
        causes.append(state.cause)
        kept += 1
        n += len(rows)
    header = {
        "format": "adaplan-dataset-1",
        "config": config.to_dict(),
        "seed": int(seed),
        "policy": repr(policy),
        "n_transitions": n,
        "n_episodes": kept,
        "obs_dim": config.obs_dim,
        "max_steps": config.max_steps,
        "causes": causes,
    }
    return Dataset(
        np.array(cols["obs"]).reshape(n, config.obs_dim),
        np.array(cols["actions"], dtype=np.int64),
        np.array(cols["rewards"], dtype=np.float64),
        np.array(cols["next_obs"]).reshape(n, config.obs_dim),
        np.array(cols["dones"], dtype=bool),
        np.array(cols["episode"], dtype=np.int64),
        np.array(cols["step"], dtype=np.int64),
        header,
    )


def write_dataset(path, ds: Dataset) -> None:
    """JSON-lines: header line, then one transition per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps(ds.header, sort_keys=True) + "\n")
        for i in range(len(ds)):
            rec = {
                "obs": ds.obs[i].tolist(),
                "action": int(ds.actions[i]),
                "reward": float(ds.rewards[i]),
                "next_obs": ds.next_obs[i].tolist(),
                "done": bool(ds.dones[i]),
                "episode": int(ds.episode[i]),
                "step": int(ds.step[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    d = header["obs_dim"]
    n = len(recs)
    return Dataset(
        np.array([r["obs"] for r in recs], dtype=np.float64).reshape(n, d),
        np.array([r["action"] for r in recs], dtype=np.int64),
        np.array([r["reward"] for r in recs], dtype=np.float64),
        np.array([r["next_obs"] for r in recs], dtype=np.float64).reshape(n, d),
        np.array([r["done"] for r in recs], dtype=bool),
        np.array([r["episode"] for r in recs], dtype=np.int64),
        np.array([r["step"] for r in recs], dtype=np.int64),
        header,
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be 1-D arrays of equal length")

    @property
    def dim(self) -> int:
        return self.mean.size

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.std, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "sha256": self.digest()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def norm_stats(ds: Dataset | np.ndarray) -> NormStats:
    obs = ds.obs if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    if obs.shape[0] == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    return NormStats(obs.mean(axis=0), np.maximum(obs.std(axis=0), STD_FLOOR))


def normalize(obs, stats: NormStats) -> np.ndarray:
    return (np.asarray(obs, dtype=np.float64) - stats.mean) / stats.std


def denormalize(z, stats: NormStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# windows


class WindowBatch(NamedTuple):
    windows: np.ndarray  # (B, H, D) normalized states
    actions: np.ndarray  # (B, H-1) action taken between consecutive slots
    starts: np.ndarray  # (B,) dataset row of the first slot


def window_starts(ds: Dataset, horizon: int) -> np.ndarray:
    """All dataset rows where an ``horizon``-state window fits inside one episode."""
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    off = ds.offsets
    parts = [np.arange(a, b - horizon + 1) for a, b in zip(off[:-1], off[1:]) if b - a >= horizon]
    if not parts:
        raise ValueError(f"no episode has at least {horizon} states")
    return np.concatenate(parts)


def sample_windows(ds: Dataset, stats: NormStats, horizon: int, batch: int, rng: Rng,
                   starts: np.ndarray | None = None) -> WindowBatch:
    """Uniformly sampled within-episode windows of normalized observations."""
    if starts is None:
        starts = window_starts(ds, horizon)
    pick = starts[rng.integers(starts.size, size=batch)]
    idx = pick[:, None] + np.arange(horizon)[None, :]
    return WindowBatch(normalize(ds.obs[idx], stats), ds.actions[idx[:, :-1]], pick)


def transition_pairs(ds: Dataset, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """(normalized s_t ++ normalized s_{t+1}, a_t) for every transition."""
    x = np.concatenate([normalize(ds.obs, stats), normalize(ds.next_obs, stats)], axis=1)
    return x, ds.actions.copy()
