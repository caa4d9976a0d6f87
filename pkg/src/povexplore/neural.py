"""Small hand-written conv/dense Q-networks with backprop, Adam and grad checks.

Everything is float64 numpy. Inputs are channel-first windows, ``(C, W, W)``
for one sample or ``(B, C, W, W)`` for a batch; networks return ``(4,)`` or
``(B, 4)`` Q-values, one per action in canonical order.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from .errors import ShapeError, StateError

NUM_ACTIONS = 4
CHECKPOINT_MAGIC = "povexplore-qnet"
CHECKPOINT_VERSION = 1


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@functools.lru_cache(maxsize=None)
def _patch_index(h: int, w: int, k: int) -> np.ndarray:
    """Flat pixel index of every k x k patch: shape (Ho, Wo, k, k)."""
    rows = np.arange(h - k + 1)[:, None, None, None] + np.arange(k)[None, None, :, None]
    cols = np.arange(w - k + 1)[None, :, None, None] + np.arange(k)[None, None, None, :]
    return rows * w + cols


class Conv2D:
    """Valid-padding, stride-1 square convolution."""

    def __init__(self, params: Dict[str, np.ndarray], name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, kernel: int = 3):
        self.w_key, self.b_key = f"{name}.w", f"{name}.b"
        params[self.w_key] = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        params[self.b_key] = np.zeros(c_out)
        self.params = params
        self.kernel = kernel
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        w, b = self.params[self.w_key], self.params[self.b_key]
        k = self.kernel
        bsz, c, h, wd = x.shape
        ho, wo = h - k + 1, wd - k + 1
        # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C*k*k)
        cols = x.reshape(bsz, c, h * wd)[:, :, _patch_index(h, wd, k)].transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(bsz, ho, wo, c * k * k)
        out = cols @ w.reshape(w.shape[0], -1).T + b
        self._cache = (x.shape, cols)
        return out.transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
        shape, cols = self._cache
        w = self.params[self.w_key]
        k = self.kernel
        f = w.shape[0]
        bsz, c, h, wd = shape
        ho, wo = h - k + 1, wd - k + 1
        d = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        grads[self.w_key] = (d.T @ cols.reshape(-1, c * k * k)).reshape(w.shape)
        grads[self.b_key] = d.sum(axis=0)
        dcols = (d @ w.reshape(f, -1)).reshape(bsz, ho, wo, c, k, k)
        dx = np.zeros(shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class Dense:
    def __init__(self, params: Dict[str, np.ndarray], name: str, n_in: int, n_out: int,
                 rng: np.random.Generator):
        self.w_key, self.b_key = f"{name}.w", f"{name}.b"
        params[self.w_key] = he_normal(rng, (n_in, n_out), n_in)
        params[self.b_key] = np.zeros(n_out)
        self.params = params
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.params[self.w_key] + self.params[self.b_key]

    def backward(self, dout: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
        grads[self.w_key] = self._x.T @ dout
        grads[self.b_key] = dout.sum(axis=0)
        return dout @ self.params[self.w_key].T


class ReLU:
    def __init__(self):
        self._on = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._on = x > 0
        return np.where(self._on, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._on, dout, 0.0)


class QNetwork:
    """Shared plumbing: parameter dict, shape checks, single/batch handling."""

    variant = ""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._forwarded = False
        self._batched = False

    def input_shapes(self) -> List[Tuple[int, ...]]:
        raise NotImplementedError

    def _check(self, inputs: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], bool]:
        shapes = self.input_shapes()
        if len(inputs) != len(shapes):
            raise ShapeError(f"{self.variant} network expects {len(shapes)} input(s), got {len(inputs)}")
        batched = None
        out = []
        for x, shp in zip(inputs, shapes):
            x = np.asarray(x, dtype=np.float64)
            if x.shape == shp:
                is_batch = False
                x = x[None]
            elif x.ndim == len(shp) + 1 and x.shape[1:] == shp:
                is_batch = True
            else:
                raise ShapeError(f"expected input of shape {shp} (optionally batched), got {x.shape}")
            if batched is not None and is_batch != batched:
                raise ShapeError("inputs mix batched and unbatched arrays")
            batched = is_batch
            out.append(x)
        if len({x.shape[0] for x in out}) != 1:
            raise ShapeError("inputs disagree on batch size")
        return out, batched

    def forward(self, inputs) -> np.ndarray:
        if isinstance(inputs, np.ndarray):
            inputs = (inputs,)
        xs, batched = self._check(inputs)
        q = self._forward(xs)
        self._forwarded = True
        self._batched = batched
        return q if batched else q[0]

    def backward(self, output_gradient: np.ndarray) -> Dict[str, np.ndarray]:
        if not self._forwarded:
            raise StateError("backward called before forward")
        g = np.asarray(output_gradient, dtype=np.float64)
        if not self._batched:
            g = g[None]
        self.grads = {}
        self._backward(g)
        return self.grads

    def _forward(self, xs: List[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def _backward(self, g: np.ndarray):
        raise NotImplementedError

    def get_params(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, values: Dict[str, np.ndarray]):
        if set(values) != set(self.params):
            raise ShapeError("parameter names do not match the network")
        for k, v in values.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected shape {self.params[k].shape}, got {v.shape}")
            self.params[k][...] = v

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def spec(self) -> dict:
        raise NotImplementedError


class QNetworkSingle(QNetwork):
    """3x3 conv over the local window -> 32 features -> 64 ReLU -> 4 Q-values."""

    variant = "single"

    def __init__(self, in_channels: int, rng: np.random.Generator, window: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.window = window
        self.conv = Conv2D(self.params, "conv", in_channels, 32, rng)
        self.act0 = ReLU()
        flat = 32 * (window - 2) ** 2
        self.fc1 = Dense(self.params, "fc1", flat, 64, rng)
        self.act1 = ReLU()
        self.fc2 = Dense(self.params, "fc2", 64, NUM_ACTIONS, rng)
        self._conv_shape = None

    def input_shapes(self):
        return [(self.in_channels, self.window, self.window)]

    def _forward(self, xs):
        h = self.act0.forward(self.conv.forward(xs[0]))
        self._conv_shape = h.shape
        h = self.act1.forward(self.fc1.forward(h.reshape(h.shape[0], -1)))
        return self.fc2.forward(h)

    def _backward(self, g):
        g = self.act1.backward(self.fc2.backward(g, self.grads))
        g = self.fc1.backward(g, self.grads).reshape(self._conv_shape)
        self.conv.backward(self.act0.backward(g), self.grads)

    def spec(self):
        return {"variant": self.variant, "in_channels": self.in_channels, "windows": [self.window]}


class QNetworkDouble(QNetwork):
    """Local 3x3 branch and a wide branch of two stacked 3x3 convs, concatenated."""

    variant = "double"

    def __init__(self, in_channels: int, rng: np.random.Generator, window: int = 3, wide_window: int = 5):
        super().__init__()
        if wide_window < 5:
            raise ShapeError("wide window must be at least 5 for two stacked 3x3 convolutions")
        self.in_channels = in_channels
        self.window = window
        self.wide_window = wide_window
        self.local = Conv2D(self.params, "local", in_channels, 32, rng)
        self.act_local = ReLU()
        self.wide1 = Conv2D(self.params, "wide1", in_channels, 16, rng)
        self.act_wide1 = ReLU()
        self.wide2 = Conv2D(self.params, "wide2", 16, 32, rng)
        self.act_wide2 = ReLU()
        self._n_local = 32 * (window - 2) ** 2
        self._n_wide = 32 * (wide_window - 4) ** 2
        self.fc1 = Dense(self.params, "fc1", self._n_local + self._n_wide, 64, rng)
        self.act1 = ReLU()
        self.fc2 = Dense(self.params, "fc2", 64, NUM_ACTIONS, rng)
        self._shapes = None

    def input_shapes(self):
        return [
            (self.in_channels, self.window, self.window),
            (self.in_channels, self.wide_window, self.wide_window),
        ]

    def _forward(self, xs):
        a = self.act_local.forward(self.local.forward(xs[0]))
        b = self.act_wide2.forward(self.wide2.forward(self.act_wide1.forward(self.wide1.forward(xs[1]))))
        self._shapes = (a.shape, b.shape)
        h = np.concatenate([a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)], axis=1)
        h = self.act1.forward(self.fc1.forward(h))
        return self.fc2.forward(h)

    def _backward(self, g):
        g = self.act1.backward(self.fc2.backward(g, self.grads))
        g = self.fc1.backward(g, self.grads)
        sa, sb = self._shapes
        ga = g[:, :self._n_local].reshape(sa)
        gb = g[:, self._n_local:].reshape(sb)
        self.local.backward(self.act_local.backward(ga), self.grads)
        gb = self.wide2.backward(self.act_wide2.backward(gb), self.grads)
        self.wide1.backward(self.act_wide1.backward(gb), self.grads)

    def spec(self):
        return {
            "variant": self.variant,
            "in_channels": self.in_channels,
            "windows": [self.window, self.wide_window],
        }


def build_network(variant: str, in_channels: int, rng: np.random.Generator, windows=None) -> QNetwork:
    if variant == "single":
        return QNetworkSingle(in_channels, rng, *(windows or [3]))
    if variant == "double":
        return QNetworkDouble(in_channels, rng, *(windows or [3, 5]))
    raise ValueError(f"unknown network variant {variant!r}; expected 'single' or 'double'")


def clone_network(net: QNetwork) -> QNetwork:
    spec = net.spec()
    twin = build_network(spec["variant"], spec["in_channels"], np.random.default_rng(0), spec["windows"])
    twin.set_params(net.params)
    return twin


def huber_loss(prediction, target, delta: float = 1.0):
    """Huber loss and its derivative with respect to ``prediction`` (elementwise)."""
    err = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    small = np.abs(err) <= delta
    loss = np.where(small, 0.5 * err**2, delta * (np.abs(err) - 0.5 * delta))
    grad = np.where(small, err, delta * np.sign(err))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ShapeError("gradient names do not match parameters")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k in sorted(params):
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(net: QNetwork, inputs, eps: float = 1e-5, rng: Optional[np.random.Generator] = None,
               floor: float = 1e-7) -> float:
    """Max relative error between backprop and central differences.

    The scalar checked is ``r . Q(inputs)`` for a random projection ``r``.
    Relative error per parameter is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    q = net.forward(inputs)
    r = rng.standard_normal(q.shape)
    analytic = {k: v.copy() for k, v in net.backward(r).items()}

    def loss():
        return float(np.sum(r * net.forward(inputs)))

    worst = 0.0
    for name in sorted(net.params):
        p = net.params[name]
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, net: QNetwork, meta: Optional[dict] = None):
    """Text checkpoint: magic/version line, JSON header, then one block per parameter.

    Each block is ``param <name> <dims...>`` followed by one line of
    space-separated float reprs in row-major order. Parameters appear in
    sorted name order so identical weights give identical bytes.
    """
    header = dict(net.spec())
    header["meta"] = meta or {}
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}", json.dumps(header, sort_keys=True)]
    for name in sorted(net.params):
        p = net.params[name]
        lines.append("param " + " ".join([name] + [str(d) for d in p.shape]))
        lines.append(" ".join(repr(float(v)) for v in p.reshape(-1)))
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Tuple[QNetwork, dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: not a v{CHECKPOINT_VERSION} checkpoint")
    header = json.loads(lines[1])
    net = build_network(header["variant"], header["in_channels"], np.random.default_rng(0), header["windows"])
    values = {}
    i = 2
    while lines[i] != "end":
        parts = lines[i].split()
        if parts[0] != "param":
            raise ValueError(f"{path}:{i + 1}: expected 'param' block")
        shape = tuple(int(d) for d in parts[2:])
        data = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        values[parts[1]] = data.reshape(shape)
        i += 2
    net.set_params(values)
    return net, header.get("meta", {})
