"""
When to replan: continuous, never, or when in doubt
===================================================

Run the three planners on shared seeds and print the comparison table.
Uses the full-size models cached by the acceptance suite when present
(``python tests/artifacts.py`` builds them, about an hour on one core);
otherwise trains small ones on the spot.
"""

import sys
from pathlib import Path

from adaplan import bench, datagen, diffuser, invdyn, dynalanes as dl
from adaplan.planner import PlannerConfig

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import artifacts  # noqa: E402

cfg = dl.EnvConfig()

if artifacts.models_ready():
    planner, ens = artifacts.planner(), artifacts.main_ensemble()
    episodes = 20
else:
    print("(no cached models; training small ones)")
    ds = datagen.collect(cfg, datagen.BehaviorPolicy(0.1), total_steps=8000, seed=0)
    stats = datagen.norm_stats(ds)
    model, sched, _ = diffuser.train_diffuser(ds, stats, horizon=8, steps=1500, hidden=(256, 256), K=50)
    planner = diffuser.DiffusionPlanner(model, sched)
    ens = invdyn.train_ensemble(ds, stats, members=3, hidden=(128, 128), steps=1500)
    episodes = 10

# pick the threshold from the entropies seen while following whole plans
eps = bench.calibrate_epsilon(cfg, planner, ens, seeds=range(10_000, 10_005))
print(f"calibrated threshold: {eps:.4f} nats")

rows = [bench.evaluate(cfg, planner, ens, PlannerConfig(eps, mode), n=episodes)[0]
        for mode in ("adaptive", "continuous", "no_replan")]
print(bench.report(rows))
