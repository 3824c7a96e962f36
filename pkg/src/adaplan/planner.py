"""Uncertainty-gated replanning loop.

A plan is sampled at the observed state and its first action executed
unconditionally. Afterwards, at plan age ``i``, slot ``i`` of the plan is
overwritten with the observed state and the ensemble predicts the action that
moves the observed state to planned slot ``i + 1``. If the ensemble's entropy is
below the threshold the action is executed, otherwise (or when the plan runs
out) a new plan is sampled from the current observation.

The two baselines are threshold extremes: ``continuous`` never trusts a plan
past its first action, ``no_replan`` always does until the plan is exhausted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol

import numpy as np

from . import dynalanes as dl
from .diffuser import NfeCounter, PlanBuffer
from .dynalanes import EnvConfig
from .invdyn import EnsemblePrediction
from .numerics import Rng, ShapeError

MODES = ("adaptive", "continuous", "no_replan")


class PlanSource(Protocol):
    horizon: int
    state_dim: int
    nfe_per_plan: int

    def plan(self, obs, rng: Rng, t: int = 0, counter: NfeCounter | None = None) -> PlanBuffer: ...


class ActionPredictor(Protocol):
    state_dim: int

    def predict(self, s, s_next) -> EnsemblePrediction: ...


@dataclass(frozen=True)
class PlannerConfig:
    epsilon: float = 0.1
    mode: str = "adaptive"
    max_steps: int | None = None

    def __post_init__(self):
        mode = self.mode.replace("-", "_")
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ValueError(f"unknown planner mode {self.mode!r}")
        if mode == "adaptive" and not self.epsilon >= 0:
            raise ValueError("adaptive threshold must be >= 0")

    @property
    def threshold(self) -> float:
        if self.mode == "continuous":
            return -math.inf
        if self.mode == "no_replan":
            return math.inf
        return self.epsilon

    @property
    def label(self) -> str:
        return f"adaptive(eps={self.epsilon:g})" if self.mode == "adaptive" else self.mode


@dataclass(frozen=True)
class StepRecord:
    t: int
    action: int
    reward: float
    entropy: float
    plan_age: int
    replanned: bool
    speed_frac: float


@dataclass
class EpisodeLog:
    seed: int
    mode: str
    epsilon: float
    horizon: int
    nfe_per_plan: int
    records: list[StepRecord] = field(default_factory=list)
    plan_count: int = 0
    nfe: int = 0
    cause: str = "running"

    @property
    def length(self) -> int:
        return len(self.records)

    @property
    def episode_return(self) -> float:
        return float(sum(r.reward for r in self.records))

    @property
    def collided(self) -> bool:
        return self.cause == "collision"

    def high_speed_reward(self, cfg: EnvConfig | None = None, cutoff: float = 0.75) -> float:
        """Mean over steps of the speed reward term, counted only on fast steps."""
        cfg = cfg or EnvConfig()
        if not self.records:
            return 0.0
        vals = [cfg.w_speed * r.speed_frac if (r.speed_frac >= cutoff and r.reward > 0) else 0.0
                for r in self.records]
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon"] = _json_float(self.epsilon)
        d["length"] = self.length
        d["return"] = self.episode_return
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeLog":
        recs = [StepRecord(**r) for r in d["records"]]
        eps = d["epsilon"]
        eps = float(eps) if not isinstance(eps, str) else float(eps.replace("Infinity", "inf"))
        return cls(d["seed"], d["mode"], eps, d["horizon"], d["nfe_per_plan"], recs,
                   d["plan_count"], d["nfe"], d["cause"])


def _json_float(x: float):
    return x if math.isfinite(x) else ("Infinity" if x > 0 else "-Infinity")


def dump_logs(path, logs: list[EpisodeLog]) -> None:
    with open(path, "w") as fh:
        for log in logs:
            fh.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")


def load_logs(path) -> list[EpisodeLog]:
    with open(path) as fh:
        return [EpisodeLog.from_dict(json.loads(line)) for line in fh if line.strip()]


def act_from_plan(ensemble: ActionPredictor, s, plan: PlanBuffer, i: int) -> EnsemblePrediction:
    """Ground plan slot ``i`` to the observed state and predict toward slot ``i + 1``."""
    if not 1 <= i <= plan.horizon - 2:
        raise IndexError(f"plan age {i} outside [1, {plan.horizon - 2}]")
    plan.states[i] = s
    plan.cursor = i
    return ensemble.predict(s, plan.states[i + 1])


def run_episode(env_config: EnvConfig, planner: PlanSource, ensemble: ActionPredictor,
                config: PlannerConfig, seed: int, trace: list | None = None) -> EpisodeLog:
    """Roll one episode under the gated replanning rule.

    If ``trace`` is a list, per-step simulator records are appended to it.
    """
    if config.max_steps is not None:
        env_config = replace(env_config, max_steps=config.max_steps)
    if planner.state_dim != env_config.obs_dim or ensemble.state_dim != env_config.obs_dim:
        raise ShapeError(
            f"state dimensions differ: env {env_config.obs_dim}, planner {planner.state_dim}, "
            f"ensemble {ensemble.state_dim}"
        )
    H = planner.horizon
    if H < 2:
        raise ValueError("plan horizon must be at least 2")
    threshold = config.threshold
    log = EpisodeLog(seed, config.mode, config.epsilon, H, planner.nfe_per_plan)
    counter = NfeCounter()
    rng = Rng(seed).split("plan")
    state, obs = dl.reset(env_config, seed)
    if trace is not None:
        trace.append(dl.trace_record(state, None, None))

    def execute(pred: EnsemblePrediction, age: int, replanned: bool):
        nonlocal state, obs
        t = state.t
        state, obs, reward, _, _ = dl.step(state, pred.action)
        sf = dl.speed_fraction(state.ego.speed, env_config)
        log.records.append(StepRecord(t, pred.action, float(reward), float(pred.entropy), age, replanned, sf))
        if trace is not None:
            trace.append(dl.trace_record(state, pred.action, reward))

    while not state.done:
        plan = planner.plan(obs, rng, t=state.t, counter=counter)
        log.plan_count += 1
        execute(ensemble.predict(obs, plan.states[1]), 0, True)
        i = 1
        while not state.done and i <= H - 2 and config.mode != "continuous":
            pred = act_from_plan(ensemble, obs, plan, i)
            if not pred.entropy < threshold:
                break
            execute(pred, i, False)
            i += 1
    log.nfe = counter.count
    log.cause = state.cause
    return log


def saved_nfe(log: EpisodeLog) -> float:
    """Percent of per-step replans avoided on this rollout."""
    if log.length < 1:
        raise ValueError("episode has no steps")
    return 100.0 * (1.0 - log.plan_count / log.length)
