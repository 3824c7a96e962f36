"""
Driving the lane simulator with the scripted expert
===================================================

Roll a few episodes of the four-lane loop road, first with the expert and
then with a noisy behaviour policy, and look at what ends up in a dataset.
"""

import numpy as np

from adaplan import datagen, dynalanes as dl
from adaplan.numerics import Rng

# a default road: 4 lanes, 1 km loop, 20 traffic cars, 100 steps of 0.5 s
cfg = dl.EnvConfig()
state, obs = dl.reset(cfg, seed=0)
print("observation rows (presence, x, y, vx, vy):")
print(np.round(obs.reshape(cfg.n_neighbors + 1, dl.FEATURES), 3))

# one expert episode, counting the chosen actions
counts = np.zeros(dl.N_ACTIONS, int)
total = 0.0
while not state.done:
    a = datagen.expert_action(state)
    counts[a] += 1
    state, obs, r, done, cause = dl.step(state, a)
    total += r
print("expert:", dict(zip(dl.ACTION_NAMES, counts.tolist())), f"return {total:.1f}, ended by {state.cause}")

# datasets mix the expert with uniform random actions
for noise in (0.0, 0.1, 0.5):
    ds = datagen.collect(cfg, datagen.BehaviorPolicy(noise), total_steps=3000, seed=1)
    print(f"noise {noise}: {ds.n_episodes} episodes, collision rate {ds.collision_rate():.2f}, "
          f"mean reward {ds.rewards.mean():.3f}")

# normalisation statistics and a batch of training windows
stats = datagen.norm_stats(ds)
batch = datagen.sample_windows(ds, stats, horizon=16, batch=4, rng=Rng(0))
print("window batch", batch.windows.shape, "starting at rows", batch.starts)
