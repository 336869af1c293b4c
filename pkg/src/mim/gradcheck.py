"""Random finite-difference checks for every differentiable model component."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .ciubm import CtrModel, EncodedData, content_interest, forward_vars, fusion_interest, id_interest
from .csft import (BatchEmbeddings, CsftLossWeights, NegSamplingConfig, NegativePool, WorkerShard, csft_loss,
                   encode_detached, infonce)
from .encoders import EncoderHead, tfn_fuse

TOLERANCE = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, with an absolute floor for vanishing gradients."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6))


def _compare(expr: Callable, inputs: list, rng, eps: float = 1e-6) -> float:
    out, tape = nx.forward(expr, inputs)
    seed = None if out.data.size == 1 else rng.standard_normal(out.shape)
    analytic = nx.backward(tape, seed)
    numeric = nx.finite_diff(expr, inputs, epsilon=eps, seed=seed)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def _mask(rng, B: int, l: int) -> np.ndarray:
    m = rng.uniform(size=(B, l)) < 0.7
    m[:, 0] = True
    return m


def case_tfn(rng) -> float:
    a, b = rng.standard_normal(rng.integers(1, 5)), rng.standard_normal(rng.integers(1, 5))
    return _compare(tfn_fuse, [a, b], rng)


def case_mlp(rng) -> float:
    sizes = [int(s) for s in rng.integers(1, 5, size=rng.integers(2, 5))]
    params = nx.init_mlp(rng, sizes, "m")
    names = sorted(params)
    x = rng.standard_normal((3, sizes[0]))

    def expr(x, *ps):
        return nx.mlp(dict(zip(names, ps)), "m", x)
    return _compare(expr, [x] + [params[n] for n in names], rng)


def case_cosine(rng) -> float:
    n, d = rng.integers(1, 5), rng.integers(1, 6)
    mask = rng.uniform(size=n) < 0.8
    return _compare(lambda a, b: nx.cosine(a, b, mask=mask), [rng.standard_normal((n, d)), rng.standard_normal((n, d))], rng)


def case_infonce(rng) -> float:
    d, K = rng.integers(2, 6), rng.integers(1, 6)
    tau = float(rng.uniform(0.3, 2.0))
    inc = bool(rng.integers(2))
    return _compare(lambda a, p, n: infonce(a, p, n, tau, inc),
                    [rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal((K, d))], rng)


def case_csft_loss(rng) -> float:
    fusion = "tfn" if rng.integers(2) else "concat"
    head = EncoderHead.create(img_dim=3, txt_dim=2, align_dim=2, mm_dim=2, hidden=(3,), fusion=fusion,
                              seed=int(rng.integers(1 << 30)))
    cfg = NegSamplingConfig(N=2, k=int(rng.integers(0, 3)), P=2, tau=float(rng.uniform(0.5, 2.0)),
                            hard_negatives=bool(rng.integers(2)))
    weights = CsftLossWeights(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))

    def shard():
        keys = rng.integers(1, 1 << 40, size=2 * cfg.N).astype(np.uint64)
        return WorkerShard(rng.standard_normal((cfg.N, 3)), keys[:cfg.N], keys[cfg.N:],
                           rng.standard_normal((cfg.N, 3)), rng.standard_normal((cfg.N, 2)),
                           rng.standard_normal((cfg.N, 3)), rng.standard_normal((cfg.N, 2)))
    shards = [shard() for _ in range(cfg.P)]
    pool = NegativePool(cfg)
    rows = (2 if cfg.hard_negatives else 1) * cfg.N
    for _ in range(int(rng.integers(0, 3))):
        pool.push_step([BatchEmbeddings(np.arange(rows, dtype=np.uint64), rng.standard_normal((rows, 2)),
                                        rng.standard_normal((rows, 2)), rng.standard_normal((rows, 2)), cfg.N)
                        for _ in range(cfg.P)])
    worker = int(rng.integers(cfg.P))
    names = sorted(head.params)
    # other workers' rows are stop-gradient negatives: freeze them for both evaluations
    current = [encode_detached(head, sh, cfg.hard_negatives) for sh in shards]

    def expr(*ps):
        # csft_loss binds the head itself; the returned Var lives on its tape
        h = head.copy()
        h.params = {n: np.array(p.value) for n, p in zip(names, ps)}
        return csft_loss(h, shards, pool, worker, weights, cfg, current=current).loss

    wp = csft_loss(head, shards, pool, worker, weights, cfg, current=current)
    grads = nx.collect_grads(wp.tape, wp.loss, wp.bound)
    numeric = nx.finite_diff(expr, [head.params[n] for n in names])
    return max(rel_error(grads[n], g) for n, g in zip(names, numeric))


def case_id_interest(rng) -> float:
    B, l, d = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    mask = _mask(rng, B, l)
    return _compare(lambda t, b: id_interest(t, b, mask), [rng.standard_normal((B, d)), rng.standard_normal((B, l, d))], rng)


def case_content_interest(rng) -> float:
    B, l, d = rng.integers(1, 4), rng.integers(1, 5), rng.integers(2, 5)
    mask = _mask(rng, B, l)

    def expr(t, b):
        alpha, pooled = content_interest(t, b, mask)
        return nx.concat([alpha, pooled], axis=-1)
    return _compare(expr, [rng.standard_normal((B, d)), rng.standard_normal((B, l, d))], rng)


def case_fusion_interest(rng) -> float:
    B, l, d = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    mask = _mask(rng, B, l)
    return _compare(lambda a, h: fusion_interest(a, h, mask), [rng.uniform(-1, 1, (B, l)), rng.standard_normal((B, l, d))], rng)


def case_deepctr(rng) -> float:
    """End-to-end CTR logits w.r.t. every trainable table and dense parameter."""
    variant = ["base", "base+mim", "no_id", "no_content", "no_fusion"][rng.integers(5)]
    B, L, d_id, d_mm = 3, 3, 2, 3
    model = CtrModel.create(variant, id_dim=d_id, mm_dim=d_mm, hidden=(4,), max_len=L, seed=int(rng.integers(1 << 30)))
    model.items.rows(list(range(1, 7)))
    model.users.rows([1, 2])
    model.queries.rows([1, 2])
    mask = _mask(rng, B, L)
    n_mm = 6
    hit = rng.uniform(size=n_mm) < 0.8
    data = EncodedData(rng.integers(2, size=B), rng.integers(2, size=B), rng.integers(6, size=B),
                       rng.integers(6, size=(B, L)), mask, rng.integers(2, size=B).astype(float),
                       rng.standard_normal((n_mm, d_mm)), hit, rng.integers(n_mm, size=B),
                       rng.integers(n_mm, size=(B, L)))
    params = model.params
    names = sorted(params)

    def expr(*ps):
        return nx.mean(nx.bce_with_logits(forward_vars(model, dict(zip(names, ps)), data).logits, data.labels))
    return _compare(expr, [params[n] for n in names], rng)


CASES: dict[str, Callable] = {
    "tfn_fuse": case_tfn,
    "mlp": case_mlp,
    "cosine": case_cosine,
    "infonce": case_infonce,
    "csft_loss": case_csft_loss,
    "id_interest": case_id_interest,
    "content_interest": case_content_interest,
    "fusion_interest": case_fusion_interest,
    "deepctr": case_deepctr,
}


@dataclass
class GradCheckResult:
    name: str
    cases: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_grad_checks(cases: int = 100, seed: int = 0, names=None) -> list[GradCheckResult]:
    out = []
    order = list(CASES)
    for name in names or order:
        rng = np.random.default_rng([seed, order.index(name)])
        t0 = time.perf_counter()
        worst = max(CASES[name](rng) for _ in range(cases))
        out.append(GradCheckResult(name, cases, worst, time.perf_counter() - t0))
    return out
