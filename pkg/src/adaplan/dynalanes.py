"""Looped multi-lane highway with IDM traffic and a meta-action ego vehicle.

Lanes are numbered from the left (lane 0) to the right (lane ``lanes - 1``);
lateral position grows to the right. The ego has five discrete actions and no
autopilot: its speed only changes through FASTER/SLOWER. Traffic follows the
Intelligent Driver Model and occasionally changes lane at random.

Every step draws its randomness from ``(episode seed, step index)``, so
:func:`step` is a pure function of ``(state, action)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

LANE_LEFT, IDLE, LANE_RIGHT, FASTER, SLOWER = range(5)
ACTION_NAMES = ("LANE_LEFT", "IDLE", "LANE_RIGHT", "FASTER", "SLOWER")
N_ACTIONS = 5
FEATURES = 5  # presence, x, y, vx, vy


class Action(IntEnum):
    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4


class CapacityError(ValueError):
    """Too much traffic to place on the road without overlap."""


class TerminalStateError(RuntimeError):
    """Attempt to step an episode that already ended."""


@dataclass(frozen=True)
class EnvConfig:
    lanes: int = 4
    lane_width: float = 4.0
    road_length: float = 1000.0
    traffic_count: int = 20
    max_steps: int = 100
    v_min: float = 10.0
    v_max: float = 30.0
    speed_step: float = 2.5
    dt: float = 0.5
    substeps: int = 5
    n_neighbors: int = 6
    obs_range: float = 100.0
    w_speed: float = 0.8
    w_right: float = 0.2
    lane_change_prob: float = 0.01
    lane_change_steps: int = 2
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    spawn_gap: float = 10.0
    traffic_speed_range: tuple[float, float] = (20.0, 25.0)
    # IDM
    idm_desired_speed: float = 25.0
    idm_time_headway: float = 1.5
    idm_min_gap: float = 2.0
    idm_max_accel: float = 3.0
    idm_comfort_decel: float = 5.0
    idm_delta: float = 4.0
    idm_emergency_decel: float = 9.0

    def __post_init__(self):
        object.__setattr__(self, "traffic_speed_range", tuple(self.traffic_speed_range))
        if self.lanes < 2:
            raise ValueError("need at least 2 lanes")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        for name in ("lane_width", "road_length", "vehicle_length", "vehicle_width", "dt", "speed_step", "obs_range"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.traffic_count < 0 or self.max_steps < 1 or self.substeps < 1 or self.lane_change_steps < 1:
            raise ValueError("counts must be positive")

    @property
    def obs_dim(self) -> int:
        return (self.n_neighbors + 1) * FEATURES

    @property
    def road_width(self) -> float:
        return self.lanes * self.lane_width

    @property
    def lc_ticks(self) -> int:
        """Substeps needed to complete a lane change."""
        return self.lane_change_steps * self.substeps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["traffic_speed_range"] = list(self.traffic_speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "EnvConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class VehicleState:
    x: float
    lane: int
    speed: float
    target_lane: int = -1
    lc_ticks: int = -1  # substeps elapsed in the current lane change; -1 when inactive

    @property
    def changing(self) -> bool:
        return self.lc_ticks >= 0

    def progress(self, cfg: EnvConfig) -> float | None:
        return self.lc_ticks / cfg.lc_ticks if self.changing else None

    def lateral_offset(self, cfg: EnvConfig) -> float:
        if not self.changing:
            return 0.0
        return (self.target_lane - self.lane) * cfg.lane_width * self.lc_ticks / cfg.lc_ticks

    def y(self, cfg: EnvConfig) -> float:
        return self.lane * cfg.lane_width + self.lateral_offset(cfg)


@dataclass(frozen=True, eq=False)
class Traffic:
    """Struct-of-arrays for the traffic vehicles."""

    x: np.ndarray
    lane: np.ndarray
    speed: np.ndarray
    target_lane: np.ndarray
    lc_ticks: np.ndarray

    @classmethod
    def empty(cls) -> "Traffic":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(z, zi, z.copy(), zi.copy(), zi.copy())

    def __len__(self) -> int:
        return self.x.size

    def vehicle(self, i: int) -> VehicleState:
        return VehicleState(float(self.x[i]), int(self.lane[i]), float(self.speed[i]),
                            int(self.target_lane[i]), int(self.lc_ticks[i]))

    def vehicles(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in range(len(self))]

    def y(self, cfg: EnvConfig) -> np.ndarray:
        frac = np.where(self.lc_ticks >= 0, self.lc_ticks / cfg.lc_ticks, 0.0)
        return (self.lane + (self.target_lane - self.lane) * frac) * cfg.lane_width

    def __eq__(self, other) -> bool:
        if not isinstance(other, Traffic):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass(frozen=True)
class EnvState:
    config: EnvConfig
    seed: int
    ego: VehicleState
    traffic: Traffic
    t: int = 0
    done: bool = False
    cause: str = "running"  # running | collision | timeout


# ---------------------------------------------------------------------------
# IDM


def idm_accel(speed: float, gap: float, lead_speed: float | None, cfg: EnvConfig | None = None,
              desired_speed: float | None = None) -> float:
    """Intelligent Driver Model acceleration.

    ``lead_speed=None`` means no leader (free road). A non-positive gap returns
    the emergency deceleration.
    """
    cfg = cfg or EnvConfig()
    v0 = cfg.idm_desired_speed if desired_speed is None else desired_speed
    a, b = cfg.idm_max_accel, cfg.idm_comfort_decel
    free = a * (1.0 - (max(speed, 0.0) / v0) ** cfg.idm_delta)
    if lead_speed is None:
        return max(free, -cfg.idm_emergency_decel)
    if gap <= 0:
        return -cfg.idm_emergency_decel
    s_star = cfg.idm_min_gap + max(0.0, speed * cfg.idm_time_headway + speed * (speed - lead_speed) / (2 * math.sqrt(a * b)))
    acc = free - a * (s_star / gap) ** 2
    return max(acc, -cfg.idm_emergency_decel)


def _idm_vec(speed, gap, lead_speed, has_lead, cfg: EnvConfig) -> np.ndarray:
    a, b = cfg.idm_max_accel, cfg.idm_comfort_decel
    free = a * (1.0 - (np.maximum(speed, 0.0) / cfg.idm_desired_speed) ** cfg.idm_delta)
    s_star = cfg.idm_min_gap + np.maximum(
        0.0, speed * cfg.idm_time_headway + speed * (speed - lead_speed) / (2 * math.sqrt(a * b))
    )
    safe_gap = np.where(gap > 0, gap, 1.0)
    interact = np.where(has_lead, a * (s_star / safe_gap) ** 2, 0.0)
    acc = np.where(has_lead & (gap <= 0), -cfg.idm_emergency_decel, free - interact)
    return np.maximum(acc, -cfg.idm_emergency_decel)


# ---------------------------------------------------------------------------
# geometry helpers


def wrap_dx(dx, length: float):
    """Signed longitudinal offset folded into [-length/2, length/2)."""
    return (np.asarray(dx) + length / 2) % length - length / 2


def road_capacity(cfg: EnvConfig) -> int:
    """Vehicles that fit with ``spawn_gap`` between bumpers."""
    return cfg.lanes * int(cfg.road_length // (cfg.vehicle_length + cfg.spawn_gap))


def _all_vehicles(state: EnvState):
    """Arrays over [ego, traffic...]."""
    cfg, e, tr = state.config, state.ego, state.traffic
    x = np.concatenate([[e.x], tr.x])
    lane = np.concatenate([[e.lane], tr.lane]).astype(np.int64)
    target = np.concatenate([[e.target_lane], tr.target_lane]).astype(np.int64)
    ticks = np.concatenate([[e.lc_ticks], tr.lc_ticks]).astype(np.int64)
    speed = np.concatenate([[e.speed], tr.speed])
    return x, lane, target, ticks, speed


def _occupancy(lane, target, ticks, lanes: int) -> np.ndarray:
    """(n, lanes) bool: lanes each vehicle currently blocks."""
    occ = np.zeros((lane.size, lanes), dtype=bool)
    idx = np.arange(lane.size)
    occ[idx, lane] = True
    changing = ticks >= 0
    occ[idx[changing], target[changing]] = True
    return occ


def _leaders(x, occ, length: float):
    """Index of and distance to the nearest vehicle ahead sharing a lane (-1 if none)."""
    n = x.size
    if n < 2:
        return np.full(n, -1), np.full(n, np.inf)
    ahead = (x[None, :] - x[:, None]) % length  # ahead[i, j]: distance from i forward to j
    share = (occ.astype(np.int8) @ occ.T.astype(np.int8)) > 0
    np.fill_diagonal(share, False)
    dist = np.where(share, ahead, np.inf)
    j = np.argmin(dist, axis=1)
    d = dist[np.arange(n), j]
    j = np.where(np.isfinite(d), j, -1)
    return j, d


def check_collision(state: EnvState) -> bool:
    """True iff the ego's rectangle touches or overlaps any traffic rectangle."""
    cfg, tr = state.config, state.traffic
    if len(tr) == 0:
        return False
    dx = np.abs(wrap_dx(tr.x - state.ego.x, cfg.road_length))
    dy = np.abs(tr.y(cfg) - state.ego.y(cfg))
    return bool(np.any((dx <= cfg.vehicle_length) & (dy <= cfg.vehicle_width)))


# ---------------------------------------------------------------------------
# observation


def observe(state: EnvState) -> np.ndarray:
    """Normalized kinematic features of the ego and its nearest neighbours."""
    cfg, e, tr = state.config, state.ego, state.traffic
    obs = np.zeros((cfg.n_neighbors + 1, FEATURES))
    ego_y = e.y(cfg)
    ego_vy = _lateral_speed(e.target_lane - e.lane if e.changing else 0, cfg)
    obs[0] = (1.0, (e.x % cfg.road_length) / cfg.road_length, ego_y / cfg.road_width,
              e.speed / cfg.v_max, ego_vy / 30.0)
    if len(tr):
        dx = wrap_dx(tr.x - e.x, cfg.road_length)
        dy = tr.y(cfg) - ego_y
        near = np.flatnonzero(np.abs(dx) <= cfg.obs_range)
        if near.size:
            order = near[np.lexsort((near, np.hypot(dx[near], dy[near])))][: cfg.n_neighbors]
            vy = np.where(tr.lc_ticks[order] >= 0,
                          _lateral_speed(tr.target_lane[order] - tr.lane[order], cfg), 0.0)
            rows = np.column_stack([
                np.ones(order.size),
                dx[order] / cfg.obs_range,
                dy[order] / cfg.road_width,
                (tr.speed[order] - e.speed) / 30.0,
                (vy - ego_vy) / 30.0,
            ])
            obs[1 : 1 + order.size] = rows
    return np.clip(obs, -1.0, 1.0).ravel()


def _lateral_speed(direction, cfg: EnvConfig):
    return np.sign(direction) * cfg.lane_width / (cfg.lane_change_steps * cfg.dt)


# ---------------------------------------------------------------------------
# reset / step


def _step_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5EED, int(t) + 1])))


def reset(config: EnvConfig | None = None, seed: int = 0) -> tuple[EnvState, np.ndarray]:
    """Start an episode: ego mid-speed in a random lane, traffic on free slots."""
    cfg = config or EnvConfig()
    rng = _step_rng(seed, -1)
    slot_len = cfg.vehicle_length + cfg.spawn_gap
    per_lane = int(cfg.road_length // slot_len)
    if cfg.traffic_count + 1 > cfg.lanes * per_lane:
        raise CapacityError(
            f"{cfg.traffic_count} traffic vehicles plus ego exceed road capacity {cfg.lanes * per_lane}"
        )
    spacing = cfg.road_length / per_lane
    ego_lane = int(rng.integers(cfg.lanes))
    ego = VehicleState(0.0, ego_lane, 0.5 * (cfg.v_min + cfg.v_max))
    slots = np.arange(cfg.lanes * per_lane)
    slot_lane, slot_idx = slots // per_lane, slots % per_lane
    # keep the ego's own slot and the one just ahead of it clear
    blocked = (slot_lane == ego_lane) & ((slot_idx == 0) | (slot_idx == 1) | (slot_idx == per_lane - 1))
    free = slots[~blocked]
    if cfg.traffic_count > free.size:
        raise CapacityError(f"only {free.size} spawn slots available for {cfg.traffic_count} vehicles")
    chosen = np.sort(rng.choice(free, size=cfg.traffic_count, replace=False))
    jitter = rng.uniform(0.0, spacing - slot_len, size=chosen.size)
    lo, hi = cfg.traffic_speed_range
    traffic = Traffic(
        x=(chosen % per_lane) * spacing + jitter,
        lane=(chosen // per_lane).astype(np.int64),
        speed=rng.uniform(lo, hi, size=chosen.size),
        target_lane=np.full(chosen.size, -1, dtype=np.int64),
        lc_ticks=np.full(chosen.size, -1, dtype=np.int64),
    )
    state = EnvState(cfg, int(seed), ego, traffic)
    return state, observe(state)


def apply_action(ego: VehicleState, action: int, cfg: EnvConfig) -> tuple[VehicleState, float]:
    """Ego after receiving ``action``: possibly a started lane change, and its target speed."""
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"action {action} outside [0, {N_ACTIONS - 1}]")
    target = ego.speed
    if action == FASTER:
        target = min(ego.speed + cfg.speed_step, cfg.v_max)
    elif action == SLOWER:
        target = max(ego.speed - cfg.speed_step, cfg.v_min)
    elif action in (LANE_LEFT, LANE_RIGHT) and not ego.changing:
        new_lane = ego.lane + (-1 if action == LANE_LEFT else 1)
        if 0 <= new_lane < cfg.lanes:
            ego = replace(ego, target_lane=new_lane, lc_ticks=0)
    return ego, target


def _traffic_lane_changes(state: EnvState, rng: np.random.Generator) -> Traffic:
    cfg, tr = state.config, state.traffic
    n = len(tr)
    trigger = rng.uniform(size=n)
    go_left = rng.uniform(size=n) < 0.5
    if n == 0:
        return tr
    target = tr.target_lane.copy()
    ticks = tr.lc_ticks.copy()
    x, lane, tgt, tk, speed = _all_vehicles(state)
    occ = _occupancy(lane, tgt, tk, cfg.lanes)
    need = cfg.vehicle_length + cfg.idm_min_gap
    for i in np.flatnonzero((trigger < cfg.lane_change_prob) & (tr.lc_ticks < 0)):
        new_lane = tr.lane[i] + (-1 if go_left[i] else 1)
        if not 0 <= new_lane < cfg.lanes:
            continue
        others = occ[:, new_lane].copy()
        others[i + 1] = False
        dx = wrap_dx(x[others] - tr.x[i], cfg.road_length)
        if dx.size and np.abs(dx).min() < need:
            continue
        behind = dx < 0
        if behind.any():
            # the new follower must not be forced to brake harder than comfortable
            j = np.argmax(np.where(behind, dx, -np.inf))
            imposed = idm_accel(speed[others][j], -dx[j] - cfg.vehicle_length, tr.speed[i], cfg)
            if imposed < -cfg.idm_comfort_decel:
                continue
        target[i] = new_lane
        ticks[i] = 0
        occ[i + 1, new_lane] = True
    return replace(tr, target_lane=target, lc_ticks=ticks)


def step(state: EnvState, action: int):
    """Advance one policy step.

    Returns ``(state, observation, reward, done, cause)``.
    """
    if state.done:
        raise TerminalStateError(f"episode already ended ({state.cause}) at t={state.t}")
    cfg = state.config
    rng = _step_rng(state.seed, state.t)
    ego, v_target = apply_action(state.ego, int(action), cfg)
    state = replace(state, ego=ego, traffic=_traffic_lane_changes(state, rng))

    n = cfg.substeps
    h = cfg.dt / n
    v_start = ego.speed
    collided = False
    x, lane, target, ticks, speed = _all_vehicles(state)
    for j in range(1, n + 1):
        occ = _occupancy(lane, target, ticks, cfg.lanes)
        lead, dist = _leaders(x, occ, cfg.road_length)
        has = lead >= 0
        lead_speed = np.where(has, speed[np.maximum(lead, 0)], 0.0)
        acc = _idm_vec(speed, dist - cfg.vehicle_length, lead_speed, has, cfg)
        speed = speed.copy()
        speed[1:] = np.maximum(speed[1:] + acc[1:] * h, 0.0)
        speed[0] = v_start + (v_target - v_start) * j / n
        x = (x + speed * h) % cfg.road_length
        active = ticks >= 0
        ticks = np.where(active, ticks + 1, ticks)
        finished = active & (ticks >= cfg.lc_ticks)
        lane = np.where(finished, target, lane)
        target = np.where(finished, -1, target)
        ticks = np.where(finished, -1, ticks)
        sub = _pack(state, x, lane, target, ticks, speed)
        if check_collision(sub):
            state, collided = sub, True
            break
    else:
        state = sub

    t = state.t + 1
    if collided:
        state = replace(state, t=t, done=True, cause="collision")
        reward = 0.0
    else:
        timeout = t >= cfg.max_steps
        state = replace(state, t=t, done=timeout, cause="timeout" if timeout else "running")
        reward = reward_of(state)
    return state, observe(state), reward, state.done, state.cause


def _pack(state: EnvState, x, lane, target, ticks, speed) -> EnvState:
    ego = VehicleState(float(x[0]), int(lane[0]), float(speed[0]), int(target[0]), int(ticks[0]))
    traffic = Traffic(x[1:].copy(), lane[1:].copy(), speed[1:].copy(), target[1:].copy(), ticks[1:].copy())
    return replace(state, ego=ego, traffic=traffic)


def speed_fraction(speed: float, cfg: EnvConfig) -> float:
    return (speed - cfg.v_min) / (cfg.v_max - cfg.v_min)


def reward_of(state: EnvState) -> float:
    """Speed term plus right-lane term for a non-colliding state."""
    cfg = state.config
    s = min(max(speed_fraction(state.ego.speed, cfg), 0.0), 1.0)
    return cfg.w_speed * s + cfg.w_right * state.ego.lane / (cfg.lanes - 1)


# ---------------------------------------------------------------------------
# traces


def trace_record(state: EnvState, action: int | None, reward: float | None) -> dict:
    cfg = state.config
    tr = state.traffic
    return {
        "step": state.t,
        "ego": {"x": state.ego.x, "y": state.ego.y(cfg), "speed": state.ego.speed, "lane": state.ego.lane},
        "traffic": [[float(a), float(b), float(c)] for a, b, c in zip(tr.x, tr.y(cfg), tr.speed)],
        "action": None if action is None else int(action),
        "reward": reward,
        "cause": state.cause,
    }


def dump_trace(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
