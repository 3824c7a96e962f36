"""Deep ensemble of inverse-dynamics classifiers and its entropy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datagen import Dataset, NormStats, normalize, transition_pairs
from .dynalanes import N_ACTIONS
from .numerics import NetParams, NetSpec, OptimState, Rng, ShapeError

HIDDEN = (256, 256)


@dataclass
class ActionModel:
    spec: NetSpec
    params: NetParams

    def __post_init__(self):
        if self.spec.n_out != N_ACTIONS:
            raise ShapeError(f"action model must emit {N_ACTIONS} logits")

    def logits(self, x: np.ndarray) -> np.ndarray:
        return nx.forward(self.spec, self.params, x)

    def probs(self, x: np.ndarray) -> np.ndarray:
        return nx.softmax(self.logits(x))


@dataclass
class Ensemble:
    members: list[ActionModel]
    stats: NormStats
    seeds: list[int]

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if any(m.spec != self.members[0].spec for m in self.members):
            raise ValueError("ensemble members must share one NetSpec")
        if self.members[0].spec.n_in != 2 * self.stats.dim:
            raise ShapeError("member input width must be twice the state dimension")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def state_dim(self) -> int:
        return self.stats.dim

    def features(self, s, s_next) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        if s.shape[-1] != self.state_dim or s_next.shape != s.shape:
            raise ShapeError(f"state pair shapes {s.shape}, {s_next.shape} do not match dimension {self.state_dim}")
        return np.concatenate([normalize(s, self.stats), normalize(s_next, self.stats)], axis=-1)

    def member_probs(self, s, s_next) -> np.ndarray:
        """(M, ..., K) per-member action probabilities."""
        x = self.features(s, s_next)
        return np.stack([m.probs(x) for m in self.members])

    def predict(self, s, s_next) -> "EnsemblePrediction":
        return predict(self, s, s_next)


@dataclass(frozen=True)
class EnsemblePrediction:
    probs: np.ndarray
    entropy: float
    action: int


def entropy(p) -> float:
    """Shannon entropy in nats; zero entries contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def mean_probs(member_probs: np.ndarray) -> np.ndarray:
    """Exactly rounded arithmetic mean over members (axis 0).

    Using exact rational sums makes the result independent of member order and
    equal to the member output when all members agree.
    """
    m = member_probs.shape[0]
    if m == 1:
        return member_probs[0].copy()
    flat = member_probs.reshape(m, -1)
    out = np.array([float(sum(map(Fraction, col)) / m) for col in flat.T])
    return out.reshape(member_probs.shape[1:])


def predict(ens: Ensemble, s, s_next) -> EnsemblePrediction:
    """Mean member probabilities, their entropy and the argmax action (ties to the lowest id)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError("predict takes single state vectors; use predict_batch for batches")
    p = mean_probs(ens.member_probs(s, s_next))
    return EnsemblePrediction(p, entropy(p), int(np.argmax(p)))


def predict_batch(ens: Ensemble, s, s_next) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (probs, entropy, action) for many pairs; mean uses plain float sums."""
    p = ens.member_probs(s, s_next).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)
    return p, h, np.argmax(p, axis=-1)


# ---------------------------------------------------------------------------
# training


def train_member(x: np.ndarray, y: np.ndarray, seed: int, hidden: Sequence[int] = HIDDEN, steps: int = 4000,
                 batch: int = 256, lr: float = 1e-3) -> tuple[ActionModel, list[float]]:
    """Cross-entropy training of one classifier on pre-built feature rows."""
    if x.shape[0] == 0:
        raise ValueError("no training pairs")
    rng = Rng(seed)
    spec = NetSpec.mlp(x.shape[1], hidden, N_ACTIONS, "relu")
    params = nx.init_params(spec, rng.split("init"))
    opt = OptimState.for_params(params, lr=lr)
    shuffle = rng.split("shuffle")
    n = x.shape[0]
    order, pos = shuffle.permutation(n), 0
    losses = []
    for _ in range(steps):
        if pos + batch > n:
            order, pos = shuffle.permutation(n), 0
        idx = order[pos : pos + batch]
        pos += batch
        target = y[idx]
        params, opt, loss = nx.train_step(spec, params, opt, x[idx], lambda out: nx.softmax_xent(out, target))
        losses.append(loss)
    return ActionModel(spec, params), losses


def train_ensemble(ds: Dataset, stats: NormStats, members: int = 5, base_seed: int = 0,
                   seeds: Sequence[int] | None = None, **kw) -> Ensemble:
    """Members share the data and differ only in their seeds (``base_seed + m`` by default)."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    seeds = list(seeds) if seeds is not None else [base_seed + m for m in range(members)]
    x, y = transition_pairs(ds, stats)
    models = [train_member(x, y, s, **kw)[0] for s in seeds]
    return Ensemble(models, stats, seeds)


def accuracy(model: ActionModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(model.logits(x), axis=1) == y))


# ---------------------------------------------------------------------------
# persistence


def save_ensemble(directory, ens: Ensemble) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (m, s) in enumerate(zip(ens.members, ens.seeds)):
        name = f"member_{i:02d}.adpn"
        nx.save_checkpoint(d / name, m.params, seed=s)
        files.append(name)
    manifest = {
        "members": ens.size,
        "seeds": list(ens.seeds),
        "spec": ens.members[0].spec.to_dict(),
        "files": files,
        "norm_stats_sha256": ens.stats.digest(),
        "norm_stats": ens.stats.to_dict(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_ensemble(directory) -> Ensemble:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    stats = NormStats.from_dict(manifest["norm_stats"])
    if stats.digest() != manifest["norm_stats_sha256"]:
        raise ValueError(f"{d}: normalization stats hash mismatch")
    members = []
    for name in manifest["files"]:
        params, _ = nx.load_checkpoint(d / name)
        members.append(ActionModel(params.spec, params))
    return Ensemble(members, stats, manifest["seeds"])
