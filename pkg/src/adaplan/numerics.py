"""Small feed-forward networks with a hand-written backward pass.

Everything here runs in float64 on numpy. The networks are plain MLPs, so the
backward pass is written out per layer instead of going through a general
autodiff graph.
"""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "gelu")
HEADS = ("linear", "none")
PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"ADPN1\n"

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Input or parameter array has the wrong dimensions."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Seedable random stream that can be split into labelled children.

    Streams are PCG64 seeded through ``numpy.random.SeedSequence``, so the
    same seed gives the same numbers on every platform numpy supports.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._path = tuple(_path)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self._path])))

    def split(self, label: str | int) -> "Rng":
        """Child stream derived from this stream's seed and ``label``.

        Splitting does not consume numbers from the parent.
        """
        key = label if isinstance(label, int) else zlib.crc32(str(label).encode())
        return Rng(self.seed, self._path + (int(key) & 0xFFFFFFFF,))

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"


# ---------------------------------------------------------------------------
# network definition


@dataclass(frozen=True)
class NetSpec:
    """Layer widths of an MLP, input first and output last.

    ``activations`` has one entry per hidden layer. With ``head="linear"`` the
    last layer is affine; with ``head="none"`` the last hidden activation is
    applied to the output as well.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("a network needs at least 2 layer widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"layer widths must be >= 1, got {self.widths}")
        if len(self.activations) != len(self.widths) - 2:
            raise ValueError(
                f"expected {len(self.widths) - 2} hidden activations, got {len(self.activations)}"
            )
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"unknown activation in {self.activations}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "none" and not self.activations:
            raise ValueError("head='none' needs at least one hidden activation")

    @classmethod
    def mlp(cls, n_in: int, hidden: Sequence[int], n_out: int, activation: str = "relu", head: str = "linear"):
        return cls((n_in, *hidden, n_out), (activation,) * len(hidden), head)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [((a, b), (b,)) for a, b in zip(self.widths[:-1], self.widths[1:])]

    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layer_activation(self, layer: int) -> str | None:
        if layer < self.n_layers - 1:
            return self.activations[layer]
        return None if self.head == "linear" else self.activations[-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations), "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(tuple(d["widths"]), tuple(d["activations"]), d.get("head", "linear"))


@dataclass
class NetParams:
    """Flat float64 parameter vector for a :class:`NetSpec`.

    Per layer the flat layout is the weight matrix (row-major, fan_in x
    fan_out) followed by the bias.
    """

    spec: NetSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.ndim != 1 or self.flat.size != self.spec.n_params():
            raise ShapeError(f"flat params have size {self.flat.size}, spec needs {self.spec.n_params()}")

    @property
    def offsets(self) -> list[int]:
        out, pos = [], 0
        for (a, b), _ in self.spec.shapes():
            out.append(pos)
            pos += a * b + b
        return out

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``flat``, one pair per layer."""
        return _split(self.spec, self.flat)

    def copy(self) -> "NetParams":
        return NetParams(self.spec, self.flat.copy())


def _split(spec: NetSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    views, pos = [], 0
    for (a, b), _ in spec.shapes():
        w = flat[pos : pos + a * b].reshape(a, b)
        pos += a * b
        views.append((w, flat[pos : pos + b]))
        pos += b
    return views


def init_params(spec: NetSpec, rng: Rng, zero_last: bool = False) -> NetParams:
    """Glorot-uniform weights, zero biases."""
    flat = np.zeros(spec.n_params())
    for i, (w, _) in enumerate(_split(spec, flat)):
        if zero_last and i == spec.n_layers - 1:
            continue
        fan_in, fan_out = w.shape
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-lim, lim, size=w.shape)
    return NetParams(spec, flat)


# ---------------------------------------------------------------------------
# forward / backward


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    inner = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


def _check_input(spec: NetSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.n_in:
        raise ShapeError(f"input shape {x.shape} does not match first layer width {spec.n_in}")
    return x


def forward(spec: NetSpec, params: NetParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = _check_input(spec, x)
    if params.spec != spec:
        raise ShapeError("params were built for a different NetSpec")
    h = x
    for i, (w, b) in enumerate(params.layers()):
        h = h @ w + b
        act = spec.layer_activation(i)
        if act is not None:
            h = _act(act, h)
    return h


def forward_cached(spec: NetSpec, params: NetParams, x: np.ndarray):
    """Forward pass that also returns what :func:`backward` needs."""
    x = _check_input(spec, x)
    if x.ndim == 1:
        x = x[None, :]
    inputs, pre = [], []
    h = x
    for i, (w, b) in enumerate(params.layers()):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        act = spec.layer_activation(i)
        h = _act(act, z) if act is not None else z
    return h, (inputs, pre)


def backward(spec: NetSpec, params: NetParams, cache, grad_out: np.ndarray, check_finite: bool = False) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat params, given dL/d(output).

    ``grad_out`` must already contain any batch averaging.
    """
    inputs, pre = cache
    grad = np.empty_like(params.flat)
    gviews = _split(spec, grad)
    layers = params.layers()
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    for i in range(spec.n_layers - 1, -1, -1):
        act = spec.layer_activation(i)
        if act is not None:
            g = g * _act_grad(act, pre[i])
        gw, gb = gviews[i]
        np.matmul(inputs[i].T, g, out=gw)
        gb[...] = g.sum(axis=0)
        if check_finite and not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NonFiniteError(f"non-finite gradient in layer {i} ({spec.widths[i]}->{spec.widths[i + 1]})")
        if i > 0:
            g = g @ layers[i][0].T
    return grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Adam moments and hyper-parameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetParams | np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        flat = params.flat if isinstance(params, NetParams) else np.asarray(params)
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if not eps > 0:
            raise ValueError("eps must be positive")
        return cls(np.zeros_like(flat, dtype=np.float64), np.zeros_like(flat, dtype=np.float64), 0, lr, beta1, beta2, eps)


def adam_update(flat: np.ndarray, grad: np.ndarray, opt: OptimState) -> tuple[np.ndarray, OptimState]:
    """One Adam step. Returns new arrays; inputs are left untouched."""
    if grad.shape != flat.shape or opt.m.shape != flat.shape:
        raise ShapeError("gradient / moment shapes do not match params")
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1 - opt.beta2) * grad * grad
    mhat = m / (1 - opt.beta1**step)
    vhat = v / (1 - opt.beta2**step)
    new = flat - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    return new, replace(opt, m=m, v=v, step=step)


LossGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


def train_step(spec: NetSpec, params: NetParams, opt: OptimState, inputs: np.ndarray,
               loss_grad: LossGrad) -> tuple[NetParams, OptimState, float]:
    """Forward the batch, ask ``loss_grad`` for (mean loss, dL/doutput), apply Adam.

    ``loss_grad`` receives the (B, n_out) outputs and must return the batch
    mean loss together with the gradient of that mean.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ShapeError("train_step needs a non-empty (B, n_in) batch")
    out, cache = forward_cached(spec, params, inputs)
    loss, gout = loss_grad(out)
    loss = float(loss)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss} at output layer {spec.n_layers - 1}")
    if not np.all(np.isfinite(gout)):
        raise NonFiniteError(f"non-finite output gradient at layer {spec.n_layers - 1}")
    grad = backward(spec, params, cache, gout, check_finite=True)
    flat, opt = adam_update(params.flat, grad, opt)
    return NetParams(spec, flat), opt, loss


# ---------------------------------------------------------------------------
# probabilities


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax needs finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, target: int) -> float:
    """-log p[target], with p floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < p.shape[-1]:
        raise IndexError(f"action index {target} out of range for {p.shape[-1]} classes")
    return float(-math.log(max(p[target], PROB_FLOOR)))


def softmax_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a logit batch and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(np.mean(-np.log(np.maximum(p[idx, targets], PROB_FLOOR))))
    g = p.copy()
    g[idx, targets] -= 1.0
    return loss, g / n


# ---------------------------------------------------------------------------
# gradient check


def grad_check(spec: NetSpec, params: NetParams, x, loss: LossGrad, n_coords: int | None = 200,
               step: float = 1e-5, seed: int = 0, grad_override: np.ndarray | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_coords`` randomly chosen parameters (all of them if None).
    ``grad_override`` replaces the analytic gradient, which lets tests feed a
    corrupted gradient through the same comparison.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    out, cache = forward_cached(spec, params, x)
    _, gout = loss(out)
    analytic = backward(spec, params, cache, gout) if grad_override is None else grad_override
    n = spec.n_params()
    if n_coords is None or n_coords >= n:
        coords = np.arange(n)
    else:
        coords = np.random.default_rng(seed).choice(n, size=n_coords, replace=False)
    flat = params.flat.copy()
    probe = NetParams(spec, flat)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        lp = loss(forward(spec, probe, x))[0]
        flat[c] = orig - step
        lm = loss(forward(spec, probe, x))[0]
        flat[c] = orig
        numeric = (lp - lm) / (2 * step)
        a = analytic[c]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: NetParams, seed: int | None = None, meta: dict | None = None) -> None:
    """Write magic line, JSON header line, then little-endian float64 params."""
    header = {
        "spec": params.spec.to_dict(),
        "shapes": [[list(ws), list(bs)] for ws, bs in params.spec.shapes()],
        "n_params": params.spec.n_params(),
        "seed": seed,
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(params.flat.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[NetParams, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an ADPN1 checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    spec = NetSpec.from_dict(header["spec"])
    flat = np.frombuffer(rest[nl + 1:], dtype="<f8").astype(np.float64)
    if flat.size != spec.n_params():
        raise ShapeError(f"{path}: expected {spec.n_params()} params, found {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError(f"{path}: checkpoint contains non-finite params")
    return NetParams(spec, flat), header
