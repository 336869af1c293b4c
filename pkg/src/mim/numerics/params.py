"""Named parameter collections, seeded initialisation, MLP composition and optimizers."""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import primitives as P
from .tensor import Tape, Var

Params = dict[str, np.ndarray]


def uniform_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str) -> Params:
    """Weights ``{prefix}.{i}.W`` / ``.b`` for consecutive layer sizes."""
    params: Params = {}
    for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"] = uniform_linear(rng, m, n)
    return params


def mlp_layers(params: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def mlp(bound: Mapping[str, Var], prefix: str, x: Var) -> Var:
    """Affine layers with relu between them and none after the last."""
    n = mlp_layers(bound, prefix)
    for i in range(n):
        x = P.affine(x, bound[f"{prefix}.{i}.W"], bound[f"{prefix}.{i}.b"])
        if i < n - 1:
            x = P.relu(x)
    return x


def bind(tape: Tape, params: Mapping[str, np.ndarray], trainable: bool = True,
         names: Iterable[str] | None = None) -> dict[str, Var]:
    """Record parameters on ``tape`` in sorted-name order (fixes node ids)."""
    keys = sorted(params) if names is None else list(names)
    if trainable:
        return {k: tape.leaf(params[k], name=k) for k in keys}
    return {k: tape.constant(params[k]) for k in keys}


def collect_grads(tape: Tape, loss: Var, bound: Mapping[str, Var]) -> Params:
    names = sorted(bound)
    grads = tape.grad(loss, [bound[k] for k in names])
    return dict(zip(names, grads))


def add_grads(total: Params | None, g: Params) -> Params:
    if total is None:
        return {k: v.copy() for k, v in g.items()}
    for k, v in g.items():
        total[k] += v
    return total


class SGD:
    def __init__(self, lr: float) -> None:
        self.lr = lr

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        for k in sorted(grads):
            params[k] -= self.lr * grads[k]


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            if k not in self.m or self.m[k].shape != g.shape:
                self.m[k] = _grow(self.m.get(k), g.shape)
                self.v[k] = _grow(self.v.get(k), g.shape)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _grow(old: np.ndarray | None, shape) -> np.ndarray:
    new = np.zeros(shape)
    if old is not None:
        new[: old.shape[0]] = old[: shape[0]]
    return new


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
