"""
Sampling plans and measuring ensemble doubt
===========================================

Train a small state-window diffusion model and an inverse-dynamics ensemble,
sample plans, and track the ensemble's entropy as each plan is followed
open-loop and drifts away from the states actually reached.
"""

import numpy as np

from adaplan import datagen, diffuser, invdyn, dynalanes as dl
from adaplan.numerics import Rng

cfg = dl.EnvConfig()
ds = datagen.collect(cfg, datagen.BehaviorPolicy(0.1), total_steps=8000, seed=0)
stats = datagen.norm_stats(ds)

# a deliberately small denoiser so this runs in a couple of minutes
model, sched, losses = diffuser.train_diffuser(ds, stats, horizon=8, steps=1500, batch=64, hidden=(256, 256), K=50)
print(f"denoiser loss {np.mean(losses[:100]):.3f} -> {np.mean(losses[-100:]):.3f}")

ens = invdyn.train_ensemble(ds, stats, members=3, hidden=(128, 128), steps=1500)
x, y = datagen.transition_pairs(ds, stats)
print("member training accuracy:", [round(invdyn.accuracy(m, x, y), 3) for m in ens.members])

# sample a plan from a fresh state: slot 0 is the observation itself
state, obs = dl.reset(cfg, seed=42)
plan = diffuser.sample_plan(model, sched, obs, Rng(0))
print("plan shape", plan.states.shape, "first slot is the observation:", np.array_equal(plan.states[0], obs))

# follow each plan open-loop and record the doubt at every plan age
ages = np.zeros((20, model.horizon - 1))
for ep in range(20):
    state, obs = dl.reset(cfg, seed=100 + ep)
    plan = diffuser.sample_plan(model, sched, obs, Rng(ep))
    for i in range(model.horizon - 1):
        pred = ens.predict(obs, plan.states[i + 1])
        ages[ep, i] = pred.entropy
        state, obs, *_ = dl.step(state, pred.action)
        if state.done:
            ages[ep, i + 1:] = np.nan
            break
print("mean entropy by plan age:", np.round(np.nanmean(ages, axis=0), 3))

# pairs far off the data are not a reliable doubt signal: members may agree confidently there
rng = Rng(1)
far = [ens.predict(obs, ds.obs[rng.integers(len(ds))]).entropy for _ in range(50)]
print(f"unrelated next states: mean entropy {np.mean(far):.3f} nats")
