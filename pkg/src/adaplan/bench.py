"""Evaluation harness: seeded episode batches, metric rows, threshold sweeps and reports."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .dynalanes import EnvConfig
from .planner import ActionPredictor, EpisodeLog, PlannerConfig, PlanSource, run_episode, saved_nfe

CSV_COLUMNS = ("mode", "mean_len", "std_len", "collisions", "mean_reward", "std_reward", "hs_reward",
               "saved_nfe_pct", "episodes", "epsilon", "collision_rate")
SWEEP_METRICS = ("mean_len", "mean_reward", "collision_rate", "saved_nfe_pct")


@dataclass(frozen=True)
class MetricsRow:
    mode: str
    epsilon: float
    mean_len: float
    std_len: float
    collisions: int
    collision_rate: float
    mean_reward: float
    std_reward: float
    hs_reward: float
    saved_nfe_pct: float
    episodes: int
    seeds: tuple[int, ...] = ()

    def csv_values(self) -> list[str]:
        out = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            out.append(format(v, ".17g") if isinstance(v, float) else str(v))
        return out


def aggregate(logs: Sequence[EpisodeLog], env_config: EnvConfig | None = None, label: str | None = None) -> MetricsRow:
    """Fold episode logs (in the given order) into one row; std is the population std."""
    if not logs:
        raise ValueError("no episodes to aggregate")
    lens = np.array([log.length for log in logs], dtype=np.float64)
    rets = np.array([log.episode_return for log in logs], dtype=np.float64)
    coll = sum(log.collided for log in logs)
    return MetricsRow(
        mode=label or logs[0].mode,
        epsilon=float(logs[0].epsilon),
        mean_len=float(lens.mean()),
        std_len=float(lens.std()),
        collisions=int(coll),
        collision_rate=coll / len(logs),
        mean_reward=float(rets.mean()),
        std_reward=float(rets.std()),
        hs_reward=float(np.mean([log.high_speed_reward(env_config) for log in logs])),
        saved_nfe_pct=float(np.mean([saved_nfe(log) for log in logs])),
        episodes=len(logs),
        seeds=tuple(log.seed for log in logs),
    )


def _episode_task(args):
    env_config, planner, ensemble, config, seed = args
    return run_episode(env_config, planner, ensemble, config, seed)


def run_episodes(env_config: EnvConfig, planner: PlanSource, ensemble: ActionPredictor, config: PlannerConfig,
                 seeds: Sequence[int], workers: int = 1) -> list[EpisodeLog]:
    """One log per seed, returned in seed order whatever the worker count."""
    tasks = [(env_config, planner, ensemble, config, int(s)) for s in seeds]
    if workers <= 1 or len(tasks) <= 1:
        return [_episode_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_episode_task, tasks))


def evaluate(env_config: EnvConfig, planner: PlanSource, ensemble: ActionPredictor, config: PlannerConfig,
             n: int = 50, base_seed: int = 0, workers: int = 1) -> tuple[MetricsRow, list[EpisodeLog]]:
    """Run seeds ``base_seed .. base_seed + n - 1`` and aggregate."""
    if n < 1:
        raise ValueError("need at least one episode")
    logs = run_episodes(env_config, planner, ensemble, config, range(base_seed, base_seed + n), workers)
    return aggregate(logs, env_config, config.label), logs


def calibrate_epsilon(env_config: EnvConfig, planner: PlanSource, ensemble: ActionPredictor,
                      seeds: Sequence[int], percentile: float = 70.0, workers: int = 1) -> float:
    """Percentile of the entropies seen while following plans to exhaustion.

    Only steps at plan age >= 1 count, since those are the ones the threshold gates.
    """
    logs = run_episodes(env_config, planner, ensemble, PlannerConfig(mode="no_replan"), seeds, workers)
    u = [r.entropy for log in logs for r in log.records if r.plan_age >= 1]
    if not u:
        raise ValueError("calibration rollouts produced no gated steps")
    return float(np.percentile(u, percentile))


def spearman(x, y) -> float:
    """Spearman rank correlation; 0 when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(sps.spearmanr(x, y).statistic)


@dataclass
class SweepReport:
    epsilons: list[float]
    rows: list[MetricsRow]
    plan_counts: np.ndarray  # (n_eps, n_seeds)
    correlations: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("sweep thresholds must be strictly increasing")

    def plan_count_monotone(self) -> bool:
        """True if every seed's plan count is non-increasing in the threshold."""
        return bool(np.all(np.diff(self.plan_counts, axis=0) <= 0))


def sweep(env_config: EnvConfig, planner: PlanSource, ensemble: ActionPredictor, epsilons: Sequence[float],
          n: int = 50, base_seed: int = 0, workers: int = 1) -> tuple[SweepReport, list[list[EpisodeLog]]]:
    """Adaptive runs at each threshold on one shared seed set."""
    eps = [float(e) for e in epsilons]
    if len(eps) < 3:
        raise ValueError("a sweep needs at least three thresholds")
    if len(set(eps)) != len(eps):
        raise ValueError("duplicate thresholds in sweep")
    eps.sort()
    rows, all_logs = [], []
    for e in eps:
        row, logs = evaluate(env_config, planner, ensemble, PlannerConfig(e, "adaptive"), n, base_seed, workers)
        rows.append(row)
        all_logs.append(logs)
    counts = np.array([[log.plan_count for log in logs] for logs in all_logs])
    corr = {m: spearman(eps, [getattr(r, m) for r in rows]) for m in SWEEP_METRICS}
    return SweepReport(eps, rows, counts, corr), all_logs


# ---------------------------------------------------------------------------
# reporting


def render_table(rows: Sequence[MetricsRow]) -> str:
    """Aligned text table with one line per row."""
    if not rows:
        raise ValueError("nothing to report")
    head = ["Mode", "Mean Traj. Len", "Num. Coll.", "Mean Reward", "Mean HS Reward", "Saved NFE (%)", "N"]
    body = [[r.mode, f"{r.mean_len:.1f} ± {r.std_len:.1f}", f"{r.collisions}",
             f"{r.mean_reward:.2f} ± {r.std_reward:.2f}", f"{r.hs_reward:.3f}", f"{r.saved_nfe_pct:.1f}",
             f"{r.episodes}"] for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    return "\n".join(lines)


def to_csv(rows: Sequence[MetricsRow]) -> str:
    if not rows:
        raise ValueError("nothing to report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_values())
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    """Parse a metrics CSV back into typed dicts."""
    ints = {"collisions", "episodes"}
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append({k: (v if k == "mode" else int(v) if k in ints else float(v)) for k, v in rec.items()})
    return out


def report(rows: Sequence[MetricsRow] | SweepReport, out_dir=None, name: str = "metrics") -> str:
    """Render rows (or a sweep) as text; with ``out_dir`` also write ``<name>.csv`` and ``<name>.txt``."""
    if isinstance(rows, SweepReport):
        sw = rows
        rows = [replace(r, mode=f"adaptive(eps={e:g})") for e, r in zip(sw.epsilons, sw.rows)]
        text = render_table(rows) + "\n\nSpearman vs epsilon: " + ", ".join(
            f"{k}={v:+.3f}" for k, v in sw.correlations.items())
        text += f"\nPlan count non-increasing on every seed: {sw.plan_count_monotone()}"
    else:
        text = render_table(rows)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}.csv").write_text(to_csv(rows))
        (d / f"{name}.txt").write_text(text + "\n")
    return text
