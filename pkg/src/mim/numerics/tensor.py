"""Immutable float64 tensors and the recording tape used for reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Global switch for the NaN/Inf check applied when tensors and tape values are created.
CHECKED = True


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class NonFiniteError(ValueError):
    """Raised in checked mode when a NaN or Inf value appears."""


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def _check_finite(arr: np.ndarray, where: str) -> None:
    if CHECKED and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite value")


class Tensor:
    """Dense row-major float64 array that cannot be mutated after construction."""

    __slots__ = ("_data",)

    def __init__(self, data, *, check: bool = True) -> None:
        arr = _frozen(data)
        if check:
            _check_finite(arr, "Tensor")
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    def tolist(self):
        return self._data.tolist()

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self) -> int:
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._data!r})"


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


@dataclass(eq=False)
class Var:
    """Handle to one node on a tape.

    ``requires_grad`` is False for constants (detached values); their gradient
    slot is always exactly zero.
    """

    tape: "Tape"
    index: int
    value: np.ndarray
    requires_grad: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape}, grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    saved: dict
    requires_grad: bool


@dataclass(eq=False)
class Tape:
    """Linear record of primitive applications.

    Nodes are appended in execution order, so every input precedes its
    consumers and ``backward`` can walk the list in reverse.
    """

    nodes: list[Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    inputs: list[Var] = field(default_factory=list)
    output: Var | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: Sequence[Var], value: np.ndarray, saved: dict | None = None,
              requires_grad: bool | None = None) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op}: operand recorded on a different tape")
        if requires_grad is None:
            requires_grad = any(v.requires_grad for v in inputs)
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, op)
        value.flags.writeable = False
        self.nodes.append(Node(op, tuple(v.index for v in inputs), saved or {}, requires_grad))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value, requires_grad)

    def leaf(self, x, name: str | None = None) -> Var:
        """Record a differentiable input (parameter or data)."""
        return self._push("leaf", (), _frozen(as_array(x)), {"name": name}, requires_grad=True)

    def constant(self, x) -> Var:
        """Record a detached value; no gradient flows into it."""
        return self._push("const", (), _frozen(as_array(x)), requires_grad=False)

    def backward(self, output: Var, seed=None) -> list[np.ndarray | None]:
        """Accumulate d(output)/d(node) for every node, walking in reverse order.

        Returns a list indexed by node id; entries are None for nodes the
        output does not depend on through a differentiable path.
        """
        from .primitives import RULES

        if seed is None:
            if output.value.size != 1:
                raise ShapeError(f"backward: implicit seed needs a scalar output, got {output.shape}")
            seed = np.ones_like(output.value)
        seed = np.asarray(as_array(seed), dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = seed.copy()
        for idx in range(output.index, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or not node.inputs or not node.requires_grad:
                continue
            in_vals = [self.values[i] for i in node.inputs]
            in_grads = RULES[node.op](g, self.values[idx], in_vals, node.saved)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                if grads[i] is None:
                    grads[i] = np.array(gi, dtype=np.float64)
                else:
                    grads[i] += gi
        return grads

    def grad(self, output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` with respect to ``wrt``; zeros where unreachable or detached."""
        all_grads = self.backward(output, seed)
        out = []
        for v in wrt:
            g = all_grads[v.index] if v.requires_grad else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def forward(expr: Callable[..., Var], inputs: Sequence) -> tuple[Tensor, Tape]:
    """Evaluate ``expr`` on fresh leaves for ``inputs`` and keep the tape for ``backward``."""
    tape = Tape()
    tape.inputs = [tape.leaf(x) for x in inputs]
    out = expr(*tape.inputs)
    if not isinstance(out, Var) or out.tape is not tape:
        raise TypeError("forward: expression must return a Var recorded on its own tape")
    tape.output = out
    return Tensor(out.value), tape


def backward(tape: Tape, seed=None) -> list[np.ndarray]:
    """Gradients of the tape's output with respect to each of its inputs."""
    if tape.output is None:
        raise ValueError("backward: tape has no recorded output")
    return tape.grad(tape.output, tape.inputs, seed)


def finite_diff(expr: Callable[..., Var], inputs: Sequence, epsilon: float = 1e-6, seed=None) -> list[np.ndarray]:
    """Central-difference gradient of ``sum(seed * expr(inputs))`` per input coordinate.

    Independent of ``backward``: it only ever evaluates the forward pass.
    """
    if epsilon <= 0:
        raise ValueError("finite_diff: epsilon must be positive")
    base = [np.array(as_array(x), dtype=np.float64) for x in inputs]

    def evaluate(arrays) -> float:
        tape = Tape()
        out = expr(*[tape.leaf(a) for a in arrays])
        val = out.value
        if seed is None:
            if val.size != 1:
                raise ShapeError(f"finite_diff: implicit seed needs a scalar output, got {val.shape}")
            return float(val.reshape(()))
        return float(np.sum(as_array(seed) * val))

    grads = []
    for i, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = evaluate(base)
            flat[j] = orig - epsilon
            fm = evaluate(base)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * epsilon)
        grads.append(g)
    return grads
