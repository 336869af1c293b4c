"""Differentiable primitives.

Every function here takes :class:`Var` operands recorded on one tape, checks
shapes explicitly (there is no implicit broadcasting) and registers an
analytic backward rule in ``RULES``. A rule receives the output gradient, the
forward output, the input values and whatever the forward pass saved, and
returns one gradient (or None) per input.

Batched operands put the batch dimensions first; the reduced or mixed axis is
always the last one.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Var

RULES: dict[str, Callable] = {}


def _rule(name: str):
    def deco(fn):
        RULES[name] = fn
        return fn
    return deco


def _same_tape(op: str, *vs: Var):
    tape = vs[0].tape
    for v in vs[1:]:
        if v.tape is not tape:
            raise ValueError(f"{op}: operands live on different tapes")
    return tape


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# affine / activations


def affine(x: Var, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` for ``x`` of shape (..., m), ``w`` (n, m), ``b`` (n,)."""
    _require(w.value.ndim == 2 and b.value.ndim == 1, "affine", f"weight {w.shape} / bias {b.shape} must be 2-D / 1-D")
    n, m = w.shape
    _require(x.value.ndim >= 1 and x.shape[-1] == m and b.shape[0] == n, "affine",
             f"x {x.shape}, W {w.shape}, b {b.shape} incompatible")
    out = x.value @ w.value.T + b.value
    return _same_tape("affine", x, w, b)._push("affine", (x, w, b), out)


@_rule("affine")
def _affine_bw(g, out, ins, saved):
    x, w, _ = ins
    m = x.shape[-1]
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, m)
    return g @ w, g2.T @ x2, g2.sum(axis=0)


def relu(x: Var) -> Var:
    return x.tape._push("relu", (x,), np.maximum(x.value, 0.0))


@_rule("relu")
def _relu_bw(g, out, ins, saved):
    # subgradient at exactly 0 is 0
    return (g * (ins[0] > 0.0),)


def sigmoid(x: Var) -> Var:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return x.tape._push("sigmoid", (x,), out)


@_rule("sigmoid")
def _sigmoid_bw(g, out, ins, saved):
    return (g * out * (1.0 - out),)


# ---------------------------------------------------------------------------
# structural


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    _require(len(xs) >= 1, "concat", "needs at least one operand")
    tape = _same_tape("concat", *xs)
    nd = xs[0].value.ndim
    ax = axis % nd
    for v in xs:
        _require(v.value.ndim == nd, "concat", f"rank mismatch {[v.shape for v in xs]}")
        _require(all(v.shape[d] == xs[0].shape[d] for d in range(nd) if d != ax), "concat",
                 f"shapes {[v.shape for v in xs]} differ off axis {ax}")
    sizes = [v.shape[ax] for v in xs]
    out = np.concatenate([v.value for v in xs], axis=ax)
    return tape._push("concat", tuple(xs), out, {"axis": ax, "sizes": sizes})


@_rule("concat")
def _concat_bw(g, out, ins, saved):
    splits = np.cumsum(saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=saved["axis"]))


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    _require(int(np.prod(shape)) == x.value.size, "reshape", f"{x.shape} -> {shape}")
    return x.tape._push("reshape", (x,), x.value.reshape(shape))


@_rule("reshape")
def _reshape_bw(g, out, ins, saved):
    return (g.reshape(ins[0].shape),)


def expand(x: Var, n: int) -> Var:
    """Repeat ``x`` of shape (B, d) along a new axis 1: result (B, n, d)."""
    _require(x.value.ndim == 2 and n >= 0, "expand", f"needs (B, d) input, got {x.shape}")
    out = np.repeat(x.value[:, None, :], n, axis=1)
    return x.tape._push("expand", (x,), out)


@_rule("expand")
def _expand_bw(g, out, ins, saved):
    return (g.sum(axis=1),)


def gather(table: Var, idx: np.ndarray) -> Var:
    """Rows of ``table`` (V, d) at integer positions ``idx``; result idx.shape + (d,)."""
    idx = np.asarray(idx, dtype=np.int64)
    _require(table.value.ndim == 2, "gather", f"table must be 2-D, got {table.shape}")
    if idx.size:
        _require(idx.min() >= 0 and idx.max() < table.shape[0], "gather",
                 f"index out of range for table {table.shape}")
    return table.tape._push("gather", (table,), table.value[idx], {"idx": idx})


@_rule("gather")
def _gather_bw(g, out, ins, saved):
    table = ins[0]
    gt = np.zeros_like(table)
    np.add.at(gt, saved["idx"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def pick(x: Var, cols: np.ndarray) -> Var:
    """``x[r, cols[r]]`` for x of shape (N, M)."""
    cols = np.asarray(cols, dtype=np.int64)
    _require(x.value.ndim == 2 and cols.shape == (x.shape[0],), "pick", f"x {x.shape}, cols {cols.shape}")
    rows = np.arange(x.shape[0])
    return x.tape._push("pick", (x,), x.value[rows, cols], {"cols": cols})


@_rule("pick")
def _pick_bw(g, out, ins, saved):
    gx = np.zeros_like(ins[0])
    gx[np.arange(gx.shape[0]), saved["cols"]] = g
    return (gx,)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Var, b: Var) -> Var:
    _require(a.shape == b.shape, "add", f"{a.shape} vs {b.shape}")
    return _same_tape("add", a, b)._push("add", (a, b), a.value + b.value)


@_rule("add")
def _add_bw(g, out, ins, saved):
    return g, g


def sub(a: Var, b: Var) -> Var:
    _require(a.shape == b.shape, "sub", f"{a.shape} vs {b.shape}")
    return _same_tape("sub", a, b)._push("sub", (a, b), a.value - b.value)


@_rule("sub")
def _sub_bw(g, out, ins, saved):
    return g, -g


def mul(a: Var, b: Var) -> Var:
    _require(a.shape == b.shape, "mul", f"{a.shape} vs {b.shape}")
    return _same_tape("mul", a, b)._push("mul", (a, b), a.value * b.value)


@_rule("mul")
def _mul_bw(g, out, ins, saved):
    a, b = ins
    return g * b, g * a


def scale(x: Var, c: float) -> Var:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return x.tape._push("scale", (x,), x.value * c, {"c": c})


@_rule("scale")
def _scale_bw(g, out, ins, saved):
    return (g * saved["c"],)


def add_scalar(x: Var, c: float) -> Var:
    return x.tape._push("add_scalar", (x,), x.value + float(c))


@_rule("add_scalar")
def _add_scalar_bw(g, out, ins, saved):
    return (g,)


# ---------------------------------------------------------------------------
# reductions


def mean(x: Var) -> Var:
    """Mean over every element; scalar (shape ()) result."""
    _require(x.value.size > 0, "mean", "empty operand")
    return x.tape._push("mean", (x,), np.asarray(x.value.mean()))


@_rule("mean")
def _mean_bw(g, out, ins, saved):
    return (np.full_like(ins[0], float(g) / ins[0].size),)


def sum_(x: Var, axis: int | None = None) -> Var:
    out = x.value.sum() if axis is None else x.value.sum(axis=axis)
    return x.tape._push("sum", (x,), np.asarray(out), {"axis": axis})


@_rule("sum")
def _sum_bw(g, out, ins, saved):
    axis = saved["axis"]
    if axis is None:
        return (np.full_like(ins[0], float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), ins[0].shape).copy(),)


def dot(a: Var, b: Var) -> Var:
    """Inner product over the last axis of equally shaped operands."""
    _require(a.shape == b.shape and a.value.ndim >= 1, "dot", f"{a.shape} vs {b.shape}")
    return _same_tape("dot", a, b)._push("dot", (a, b), np.sum(a.value * b.value, axis=-1))


@_rule("dot")
def _dot_bw(g, out, ins, saved):
    a, b = ins
    ge = g[..., None]
    return ge * b, ge * a


def weighted_sum(w: Var, h: Var) -> Var:
    """``sum_i w[..., i] * h[..., i, :]`` for w (..., l) and h (..., l, d)."""
    _require(h.value.ndim == w.value.ndim + 1 and h.shape[:-1] == w.shape, "weighted_sum",
             f"weights {w.shape} vs values {h.shape}")
    out = np.einsum("...l,...ld->...d", w.value, h.value)
    return _same_tape("weighted_sum", w, h)._push("weighted_sum", (w, h), out)


@_rule("weighted_sum")
def _weighted_sum_bw(g, out, ins, saved):
    w, h = ins
    gw = np.einsum("...d,...ld->...l", g, h)
    gh = w[..., :, None] * g[..., None, :]
    return gw, gh


# ---------------------------------------------------------------------------
# similarity


def _norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def cosine(a: Var, b: Var, mask: np.ndarray | None = None) -> Var:
    """Cosine similarity over the last axis of equally shaped operands.

    Positions where ``mask`` is False yield 0 with zero gradient, so padded
    zero vectors there are allowed. Elsewhere a zero-norm operand is an error.
    """
    _require(a.shape == b.shape and a.value.ndim >= 1, "cosine", f"{a.shape} vs {b.shape}")
    na, nb = _norms(a.value), _norms(b.value)
    m = np.ones(na.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    _require(m.shape == na.shape, "cosine", f"mask {m.shape} vs {na.shape}")
    if np.any(m & (na == 0.0)):
        raise ValueError("cosine: zero-norm first operand")
    if np.any(m & (nb == 0.0)):
        raise ValueError("cosine: zero-norm second operand")
    na_s = np.where(m, na, 1.0)
    nb_s = np.where(m, nb, 1.0)
    out = np.where(m, np.sum(a.value * b.value, axis=-1) / (na_s * nb_s), 0.0)
    saved = {"mask": m, "na": na_s, "nb": nb_s}
    return _same_tape("cosine", a, b)._push("cosine", (a, b), out, saved)


@_rule("cosine")
def _cosine_bw(g, out, ins, saved):
    a, b = ins
    m, na, nb = saved["mask"], saved["na"], saved["nb"]
    ge = np.where(m, g, 0.0)[..., None]
    c = out[..., None]
    ga = ge * (b / (na * nb)[..., None] - c * a / (na * na)[..., None])
    gb = ge * (a / (na * nb)[..., None] - c * b / (nb * nb)[..., None])
    return ga, gb


def cosine_matrix(a: Var, b: Var) -> Var:
    """All-pairs cosine similarity: a (N, d), b (M, d) -> (N, M)."""
    _require(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[1], "cosine_matrix",
             f"{a.shape} vs {b.shape}")
    na, nb = _norms(a.value), _norms(b.value)
    if np.any(na == 0.0):
        raise ValueError("cosine_matrix: zero-norm row in first operand")
    if np.any(nb == 0.0):
        raise ValueError("cosine_matrix: zero-norm row in second operand")
    an = a.value / na[:, None]
    bn = b.value / nb[:, None]
    return _same_tape("cosine_matrix", a, b)._push("cosine_matrix", (a, b), an @ bn.T,
                                                   {"an": an, "bn": bn, "na": na, "nb": nb})


@_rule("cosine_matrix")
def _cosine_matrix_bw(g, out, ins, saved):
    an, bn, na, nb = saved["an"], saved["bn"], saved["na"], saved["nb"]
    gan = g @ bn
    gbn = g.T @ an
    ga = (gan - np.sum(gan * an, axis=1, keepdims=True) * an) / na[:, None]
    gb = (gbn - np.sum(gbn * bn, axis=1, keepdims=True) * bn) / nb[:, None]
    return ga, gb


def outer_product_augmented(a: Var, b: Var) -> Var:
    """Row-major flatten of ``[a; 1] (x) [b; 1]`` over the last axis.

    For a (..., d1) and b (..., d2) the result has (d1+1)(d2+1) trailing
    entries; flat index ``i * (d2 + 1) + j`` holds ``A[i] * B[j]`` where A, B
    are the 1-augmented vectors. Column d2 of rows 0..d1-1 therefore equals
    ``a``, row d1 columns 0..d2-1 equals ``b``, and the final entry is 1.
    """
    _require(a.value.ndim >= 1 and a.shape[:-1] == b.shape[:-1], "outer_product_augmented",
             f"{a.shape} vs {b.shape}")
    ones = np.ones(a.shape[:-1] + (1,))
    A = np.concatenate([a.value, ones], axis=-1)
    B = np.concatenate([b.value, ones], axis=-1)
    out = (A[..., :, None] * B[..., None, :]).reshape(a.shape[:-1] + (A.shape[-1] * B.shape[-1],))
    return _same_tape("outer_product_augmented", a, b)._push("outer_product_augmented", (a, b), out,
                                                             {"A": A, "B": B})


@_rule("outer_product_augmented")
def _outer_bw(g, out, ins, saved):
    A, B = saved["A"], saved["B"]
    G = g.reshape(g.shape[:-1] + (A.shape[-1], B.shape[-1]))
    gA = np.einsum("...ij,...j->...i", G, B)
    gB = np.einsum("...ij,...i->...j", G, A)
    return gA[..., :-1], gB[..., :-1]


# ---------------------------------------------------------------------------
# normalisers


def _mask_arg(mask, shape, op):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    _require(m.shape == shape, op, f"mask {m.shape} vs operand {shape}")
    return m


def softmax(x: Var, mask: np.ndarray | None = None) -> Var:
    """Softmax over the last axis; masked-out entries get weight 0.

    A row with every entry masked returns all zeros.
    """
    m = _mask_arg(mask, x.shape, "softmax")
    v = x.value if m is None else np.where(m, x.value, -np.inf)
    top = np.max(v, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(v - top)
    if m is not None:
        e = np.where(m, e, 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out = e / np.where(z > 0, z, 1.0)
    return x.tape._push("softmax", (x,), out)


@_rule("softmax")
def _softmax_bw(g, out, ins, saved):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def log_sum_exp(x: Var, mask: np.ndarray | None = None) -> Var:
    """``log(sum(exp(x)))`` over the last axis, restricted to unmasked entries."""
    m = _mask_arg(mask, x.shape, "log_sum_exp")
    if m is not None:
        _require(bool(np.all(m.any(axis=-1))), "log_sum_exp", "a row has every entry masked")
    v = x.value if m is None else np.where(m, x.value, -np.inf)
    top = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - top)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + top)[..., 0]
    return x.tape._push("log_sum_exp", (x,), out, {"p": e / s})


@_rule("log_sum_exp")
def _lse_bw(g, out, ins, saved):
    return (g[..., None] * saved["p"],)


def bce_with_logits(z: Var, y: np.ndarray) -> Var:
    """Elementwise binary cross-entropy of logits ``z`` against fixed labels ``y``."""
    y = np.asarray(y, dtype=np.float64)
    _require(y.shape == z.shape, "bce_with_logits", f"labels {y.shape} vs logits {z.shape}")
    v = z.value
    out = np.maximum(v, 0.0) - v * y + np.log1p(np.exp(-np.abs(v)))
    return z.tape._push("bce_with_logits", (z,), out, {"y": y})


@_rule("bce_with_logits")
def _bce_bw(g, out, ins, saved):
    v = ins[0]
    p = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return (g * (p - saved["y"]),)


PRIMITIVES = (
    "affine", "relu", "sigmoid", "concat", "reshape", "expand", "gather", "pick",
    "add", "sub", "mul", "scale", "add_scalar", "mean", "sum", "dot", "weighted_sum",
    "cosine", "cosine_matrix", "outer_product_augmented", "softmax", "log_sum_exp",
    "bce_with_logits",
)
