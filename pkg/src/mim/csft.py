"""Contrastive fine-tuning of the encoder head on query -> purchased-item pairs.

Negatives for each anchor query are every positive and hard-negative item
embedding from the newest ``k + 1`` batches of all ``P`` simulated workers,
minus the anchor's own positive: ``2 * N * P * (k + 1) - 1`` once the pool is
full. Only the anchor worker's current batch carries gradient; everything
taken from the pool or from other workers is a detached copy.
"""
from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .encoders import EncoderHead, MMEmbeddingBundle, encode_vars, project_image
from .numerics.params import Params, add_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterestTriplet:
    query_key: int
    pos_item_key: int
    hard_neg_key: int


@dataclass(frozen=True)
class NegSamplingConfig:
    N: int = 8
    k: int = 3
    P: int = 2
    tau: float = 1.0
    hard_negatives: bool = True
    include_positive: bool = True

    def __post_init__(self):
        if self.N < 1 or self.k < 0 or self.P < 1:
            raise ValueError(f"invalid sampling config N={self.N} k={self.k} P={self.P}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class CsftLossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TripletBuild:
    triplets: list[InterestTriplet]
    skipped: int = 0
    rejected: list[tuple[tuple[int, int], str]] = field(default_factory=list)


def build_triplets(purchase_log: Iterable[tuple[int, int]], catalog: Mapping[int, int], seed: int = 0) -> TripletBuild:
    """Pair every purchase with a same-category hard negative drawn uniformly (seeded).

    ``catalog`` maps item key -> category. Purchases of unknown items are
    rejected with a reason; purchases whose category holds no other item are
    skipped and counted.
    """
    by_cat: dict[int, list[int]] = {}
    for key in sorted(catalog):
        by_cat.setdefault(catalog[key], []).append(key)
    rng = np.random.default_rng([seed, 0x791])
    out = TripletBuild([])
    for query_key, item_key in purchase_log:
        if item_key not in catalog:
            out.rejected.append(((query_key, item_key), f"unknown item key {item_key}"))
            continue
        pool = by_cat[catalog[item_key]]
        if len(pool) < 2:
            out.skipped += 1
            continue
        j = int(rng.integers(len(pool) - 1))
        pos = pool.index(item_key)
        neg = pool[j if j < pos else j + 1]
        out.triplets.append(InterestTriplet(int(query_key), int(item_key), int(neg)))
    return out


def write_triplets(path, triplets: Iterable[InterestTriplet]) -> None:
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(f"{t.query_key}\t{t.pos_item_key}\t{t.hard_neg_key}\n")


def read_triplets(path) -> list[InterestTriplet]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected 3 tab-separated ids")
            out.append(InterestTriplet(*(int(p) for p in parts)))
    return out


# ---------------------------------------------------------------------------
# negative pool


@dataclass
class BatchEmbeddings:
    """Item-side embeddings of one worker batch: positives then hard negatives.

    Each of ``h_mm``/``h_img``/``h_txt`` has shape (rows, d); ``keys`` lists the
    item key of every row in the same order.
    """

    keys: np.ndarray
    h_mm: np.ndarray
    h_img: np.ndarray
    h_txt: np.ndarray
    n_pos: int

    def detached(self) -> "BatchEmbeddings":
        def ro(a):
            a = np.array(a, dtype=np.float64)
            a.flags.writeable = False
            return a
        return BatchEmbeddings(np.array(self.keys), ro(self.h_mm), ro(self.h_img), ro(self.h_txt), self.n_pos)

    def bundles(self) -> list[MMEmbeddingBundle]:
        return [MMEmbeddingBundle(int(self.keys[r]), self.h_mm[r], self.h_img[r], self.h_txt[r])
                for r in range(len(self.keys))]


class NegativePool:
    """Per-worker ring buffers holding the newest ``k + 1`` batches of detached embeddings."""

    def __init__(self, cfg: NegSamplingConfig) -> None:
        self.cfg = cfg
        self.buffers = [deque(maxlen=cfg.k + 1) for _ in range(cfg.P)]
        self.batches_seen = 0

    def push(self, worker: int, batch: BatchEmbeddings) -> None:
        self.buffers[worker].appendleft(batch.detached())

    def push_step(self, batches: Sequence[BatchEmbeddings]) -> None:
        if len(batches) != self.cfg.P:
            raise ValueError(f"expected {self.cfg.P} worker batches, got {len(batches)}")
        for w, b in enumerate(batches):
            self.push(w, b)
        self.batches_seen += 1

    def held(self, worker: int) -> int:
        return len(self.buffers[worker])

    def layout(self) -> list[tuple[int, int, BatchEmbeddings]]:
        """(age, worker, batch) blocks in candidate order: newest age first, then worker index."""
        depth = max((len(b) for b in self.buffers), default=0)
        return [(age, w, self.buffers[w][age]) for age in range(depth) for w in range(self.cfg.P)
                if age < len(self.buffers[w])]


def _own_positive_column(pool: NegativePool, worker: int, row: int) -> int:
    col = 0
    for age, w, batch in pool.layout():
        if age == 0 and w == worker:
            return col + row
        col += len(batch.keys)
    raise IndexError("anchor worker has no current batch in the pool")


def pool_gather(pool: NegativePool, anchor: tuple[int, int]) -> list[MMEmbeddingBundle]:
    """Negatives for the anchor (worker, row) of the current step.

    The pool must already hold the current batch of every worker. Every
    positive and hard negative in the pool is returned except the anchor's own
    positive.
    """
    worker, row = anchor
    if not 0 <= worker < pool.cfg.P or pool.held(worker) == 0:
        raise IndexError(f"anchor worker {worker} out of range")
    if not 0 <= row < pool.buffers[worker][0].n_pos:
        raise IndexError(f"anchor row {row} out of range")
    skip = _own_positive_column(pool, worker, row)
    out = []
    col = 0
    for _, _, batch in pool.layout():
        for b in batch.bundles():
            if col != skip:
                out.append(b)
            col += 1
    return out


def expected_negatives(N: int, k: int, P: int, j: int, hard_negatives: bool = True) -> int:
    per_batch = (2 if hard_negatives else 1) * N * P
    return per_batch * (min(j, k) + 1) - 1


# ---------------------------------------------------------------------------
# losses


def _nonzero(v: np.ndarray, what: str) -> None:
    if np.any(np.linalg.norm(np.atleast_2d(v), axis=-1) == 0.0):
        raise ValueError(f"infonce: zero-norm {what}")


def infonce(anchor: nx.Var, positive: nx.Var, negatives: nx.Var | Sequence[nx.Var], tau: float = 1.0,
            include_positive: bool = True) -> nx.Var:
    """Single-anchor InfoNCE over cosine logits.

    ``negatives`` is a (K, d) Var or a list of (d,) Vars. With
    ``include_positive`` the positive term sits in the denominator
    (standard form, loss >= 0); without it the denominator sums negatives only.
    """
    if tau <= 0:
        raise ValueError("infonce: tau must be positive")
    if isinstance(negatives, nx.Var):
        neg = negatives
    else:
        neg = nx.concat([nx.reshape(n, (1, n.shape[0])) for n in negatives], axis=0)
    _nonzero(anchor.value, "anchor")
    _nonzero(positive.value, "positive")
    for j, row in enumerate(np.atleast_2d(neg.value)):
        if not np.any(row):
            raise ValueError(f"infonce: zero-norm negative {j}")
    d = anchor.shape[0]
    a = nx.reshape(anchor, (1, d))
    pos = nx.scale(nx.cosine(anchor, positive), 1.0 / tau)
    negs = nx.scale(nx.cosine_matrix(a, neg), 1.0 / tau)
    if include_positive:
        logits = nx.concat([nx.reshape(pos, (1, 1)), negs], axis=1)
    else:
        logits = negs
    return nx.sub(nx.reshape(nx.log_sum_exp(logits), ()), pos)


def infonce_batch(anchors: nx.Var, candidates: nx.Var, pos_cols: np.ndarray, tau: float,
                  include_positive: bool = True) -> nx.Var:
    """Mean InfoNCE where row r's positive is ``candidates[pos_cols[r]]`` and
    every other candidate row is a negative for it."""
    logits = nx.scale(nx.cosine_matrix(anchors, candidates), 1.0 / tau)
    pos = nx.pick(logits, pos_cols)
    if include_positive:
        lse = nx.log_sum_exp(logits)
    else:
        mask = np.ones(logits.shape, dtype=bool)
        mask[np.arange(len(pos_cols)), pos_cols] = False
        lse = nx.log_sum_exp(logits, mask=mask)
    return nx.mean(nx.sub(lse, pos))


@dataclass
class WorkerShard:
    """Raw features of one worker's slice of a step: queries and their item pairs."""

    query_img: np.ndarray
    pos_keys: np.ndarray
    neg_keys: np.ndarray
    pos_img: np.ndarray
    pos_txt: np.ndarray
    neg_img: np.ndarray
    neg_txt: np.ndarray


@dataclass
class WorkerPass:
    loss: nx.Var
    parts: tuple[float, float, float]
    tape: nx.Tape
    bound: dict
    batch: BatchEmbeddings


def encode_shard(head: EncoderHead, bound, tape: nx.Tape, shard: WorkerShard, hard_negatives: bool):
    """Live (gradient-carrying) query embeddings and item rows for one shard."""
    q = project_image(bound, tape.constant(shard.query_img))
    if hard_negatives:
        img = np.concatenate([shard.pos_img, shard.neg_img])
        txt = np.concatenate([shard.pos_txt, shard.neg_txt])
        keys = np.concatenate([shard.pos_keys, shard.neg_keys])
    else:
        img, txt, keys = shard.pos_img, shard.pos_txt, shard.pos_keys
    h_mm, h_img, h_txt = encode_vars(head, bound, tape.constant(img), tape.constant(txt))
    return q, (h_mm, h_img, h_txt), keys


def csft_loss(head: EncoderHead, shards: Sequence[WorkerShard], pool: NegativePool, worker: int,
              weights: CsftLossWeights, cfg: NegSamplingConfig, trainable: bool = True,
              current: Sequence[BatchEmbeddings] | None = None) -> WorkerPass:
    """Multi-level loss for one worker: q->item + alpha * q->text + beta * q->image.

    ``pool`` holds the previous batches only; the current step's batches of
    all workers are encoded here (other workers' rows detached) so the
    candidate set matches :func:`pool_gather` after the step is pushed.
    ``current`` may carry precomputed detached encodings of every shard.
    """
    tape = nx.Tape()
    bound = nx.bind(tape, head.params, trainable=trainable)
    live_q = None
    blocks: list[list[nx.Var]] = [[], [], []]
    own_batch = None
    pos_offset = 0
    col = 0
    # current step, worker order; the anchor worker's block stays live
    for w, shard in enumerate(shards):
        if w == worker:
            q, levels, keys = encode_shard(head, bound, tape, shard, cfg.hard_negatives)
            live_q = q
            pos_offset = col
            own_batch = BatchEmbeddings(keys, levels[0].value, levels[1].value, levels[2].value, len(shard.pos_keys))
            for lvl in range(3):
                blocks[lvl].append(levels[lvl])
        else:
            other = current[w] if current is not None else encode_detached(head, shard, cfg.hard_negatives)
            for lvl, arr in enumerate((other.h_mm, other.h_img, other.h_txt)):
                blocks[lvl].append(tape.constant(arr))
            keys = other.keys
        col += len(keys)
    for age in range(min(cfg.k, pool.batches_seen)):
        for w in range(cfg.P):
            if age < len(pool.buffers[w]):
                b = pool.buffers[w][age]
                for lvl, arr in enumerate((b.h_mm, b.h_img, b.h_txt)):
                    blocks[lvl].append(tape.constant(arr))
    pos_cols = pos_offset + np.arange(len(shards[worker].pos_keys))
    terms = []
    for lvl in range(3):
        cands = nx.concat(blocks[lvl], axis=0) if len(blocks[lvl]) > 1 else blocks[lvl][0]
        terms.append(infonce_batch(live_q, cands, pos_cols, cfg.tau, cfg.include_positive))
    # level order in the bundles is (mm, img, txt); the weights attach to txt (alpha) and img (beta)
    total = nx.add(terms[0], nx.add(nx.scale(terms[2], weights.alpha), nx.scale(terms[1], weights.beta)))
    parts = (float(terms[0].value), float(terms[2].value), float(terms[1].value))
    return WorkerPass(total, parts, tape, bound, own_batch)


def encode_detached(head: EncoderHead, shard: WorkerShard, hard_negatives: bool) -> BatchEmbeddings:
    tape = nx.Tape()
    bound = nx.bind(tape, head.params, trainable=False)
    _, levels, keys = encode_shard(head, bound, tape, shard, hard_negatives)
    return BatchEmbeddings(keys, levels[0].value, levels[1].value, levels[2].value, len(shard.pos_keys))


# ---------------------------------------------------------------------------
# training


class FeatureLookup:
    """Adapter exposing query image / item image / item text features by key."""

    def __init__(self, query_image, item_image, item_text) -> None:
        self.query_image, self.item_image, self.item_text = query_image, item_image, item_text

    @classmethod
    def from_world(cls, world) -> "FeatureLookup":
        return cls(world.queries.image_features, world.catalog.image_features, world.catalog.text_features)


def _shard(features: FeatureLookup, triplets: Sequence[InterestTriplet]) -> WorkerShard:
    q = [t.query_key for t in triplets]
    p = np.array([t.pos_item_key for t in triplets], dtype=np.uint64)
    n = np.array([t.hard_neg_key for t in triplets], dtype=np.uint64)
    return WorkerShard(features.query_image(q), p, n, features.item_image(p), features.item_text(p),
                       features.item_image(n), features.item_text(n))


@dataclass
class CsftResult:
    head: EncoderHead
    losses: list[float]
    parts: list[tuple[float, float, float]]


def train_csft(triplets: Sequence[InterestTriplet], features: FeatureLookup, head: EncoderHead,
               cfg: NegSamplingConfig = NegSamplingConfig(), weights: CsftLossWeights = CsftLossWeights(),
               epochs: int = 1, lr: float = 0.005, optimizer: str = "sgd", seed: int = 0,
               threads: bool = False) -> CsftResult:
    """Synchronous data-parallel training over ``cfg.P`` simulated workers.

    Each step takes ``N * P`` triplets (wrapping around the shuffled epoch
    order to fill the last batch), computes every worker's gradient, sums them
    in worker order and applies one optimizer update. The pool then receives
    detached copies of the step's item embeddings.
    """
    if not triplets:
        raise ValueError("train_csft: empty triplet list")
    head = head.copy()
    opt = nx.make_optimizer(optimizer, lr)
    pool = NegativePool(cfg)
    rng = np.random.default_rng([seed, 0xC5F7])
    step_size = cfg.N * cfg.P
    losses: list[float] = []
    parts: list[tuple[float, float, float]] = []
    executor = ThreadPoolExecutor(max_workers=cfg.P) if threads and cfg.P > 1 else None
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(triplets))
            n_steps = -(-len(order) // step_size)
            for s in range(n_steps):
                idx = [order[(s * step_size + r) % len(order)] for r in range(step_size)]
                batch = [triplets[i] for i in idx]
                shards = [_shard(features, batch[w * cfg.N:(w + 1) * cfg.N]) for w in range(cfg.P)]

                current = [encode_detached(head, sh, cfg.hard_negatives) for sh in shards] if cfg.P > 1 else None

                def run(w):
                    wp = csft_loss(head, shards, pool, w, weights, cfg, current=current)
                    return wp, nx.collect_grads(wp.tape, wp.loss, wp.bound)

                if executor is not None:
                    results = list(executor.map(run, range(cfg.P)))
                else:
                    results = [run(w) for w in range(cfg.P)]
                total: Params | None = None
                for _, g in results:
                    total = add_grads(total, g)
                opt.step(head.params, total)
                pool.push_step([wp.batch for wp, _ in results])
                losses.append(float(np.mean([float(wp.loss.value) for wp, _ in results])))
                parts.append(tuple(float(np.mean([wp.parts[i] for wp, _ in results])) for i in range(3)))
            log.debug("csft epoch %d loss %.5f", epoch, losses[-1])
    finally:
        if executor is not None:
            executor.shutdown()
    return CsftResult(head, losses, parts)
