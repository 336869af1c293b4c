"""Content-interest-aware user behaviour model and its CTR head.

Three pooled views of the behaviour sequence, relative to the target item:

* ID interest: scaled dot-product attention over ID embeddings.
* content interest: raw cosine weights between the target's and each
  behaviour's multi-modal embedding (no normalisation across positions),
  applied to the multi-modal embeddings.
* fusion interest: the same cosine weights applied to the ID embeddings.

They are concatenated in that order, followed by the side features (user,
query and target ID embeddings plus a cold-target bit), and scored by an MLP.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .numerics.params import Params, init_mlp
from .samples import BehaviorSample

log = logging.getLogger(__name__)

MODULES = ("id", "content", "fusion")
VARIANTS: dict[str, tuple[str, ...]] = {
    "base": ("id",),
    "base+mim": ("id", "content", "fusion"),
    "no_id": ("content", "fusion"),
    "no_content": ("id", "fusion"),
    "no_fusion": ("id", "content"),
}

# (vectors (n, d) float64, hit flags (n,) bool) for a list of item keys
MMLookup = Callable[[Sequence[int]], tuple[np.ndarray, np.ndarray]]


class IdEmbeddingTable:
    """Trainable rows keyed by 64-bit id, created on first touch.

    A row's initial value depends only on (seed, name, key), so tables built
    in different orders hold identical vectors.
    """

    def __init__(self, dim: int, seed: int = 0, name: str = "item", scale: float = 0.05) -> None:
        self.dim, self.seed, self.name, self.scale = dim, seed, name, scale
        self._salt = sum(name.encode())
        self.index: dict[int, int] = {}
        self.weights = np.zeros((0, dim))

    def __len__(self) -> int:
        return len(self.index)

    def rows(self, keys) -> np.ndarray:
        keys = [int(k) for k in keys]
        new = [k for k in dict.fromkeys(keys) if k not in self.index]
        if new:
            init = np.stack([np.random.default_rng([self.seed, self._salt, k]).normal(0.0, self.scale, self.dim)
                             for k in new])
            base = len(self.index)
            for i, k in enumerate(new):
                self.index[k] = base + i
            self.weights = np.concatenate([self.weights, init])
        return np.array([self.index[k] for k in keys], dtype=np.int64)

    def vector(self, key: int) -> np.ndarray:
        return self.weights[self.rows([key])[0]]


@dataclass
class CtrModel:
    variant: str
    id_dim: int
    mm_dim: int
    hidden: tuple[int, ...]
    max_len: int
    items: IdEmbeddingTable
    users: IdEmbeddingTable
    queries: IdEmbeddingTable
    dense: Params = field(default_factory=dict)

    @classmethod
    def create(cls, variant: str = "base+mim", id_dim: int = 16, mm_dim: int = 16, hidden=(64, 32),
               max_len: int = 16, seed: int = 0) -> "CtrModel":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        m = cls(variant, id_dim, mm_dim, tuple(hidden), max_len, IdEmbeddingTable(id_dim, seed, "item"),
                IdEmbeddingTable(id_dim, seed, "user"), IdEmbeddingTable(id_dim, seed, "query"))
        rng = np.random.default_rng([seed, 0xDC7])
        m.dense = init_mlp(rng, [m.input_dim, *m.hidden, 1], "deepctr")
        return m

    @property
    def modules(self) -> tuple[str, ...]:
        return VARIANTS[self.variant]

    @property
    def behavior_dim(self) -> int:
        sizes = {"id": self.id_dim, "content": self.mm_dim, "fusion": self.id_dim}
        return sum(sizes[m] for m in self.modules)

    @property
    def side_dim(self) -> int:
        return 3 * self.id_dim + 1

    @property
    def input_dim(self) -> int:
        return self.behavior_dim + self.side_dim

    @property
    def params(self) -> Params:
        p = {"emb.item": self.items.weights, "emb.user": self.users.weights, "emb.query": self.queries.weights}
        p.update(self.dense)
        return p

    def set_params(self, p: Params) -> None:
        self.items.weights, self.users.weights, self.queries.weights = p["emb.item"], p["emb.user"], p["emb.query"]
        for k in self.dense:
            self.dense[k] = p[k]

    def zero_dense(self) -> None:
        for k in self.dense:
            self.dense[k] = np.zeros_like(self.dense[k])


# ---------------------------------------------------------------------------
# interest modules (batched: leading axis is the sample)



def id_interest(h_t: nx.Var, h_b: nx.Var, mask: np.ndarray) -> nx.Var:
    """Softmax over unmasked positions of <h_t, h_i>/sqrt(d), then the weighted sum of h_i.

    Accepts (d,), (l, d), (l,) or batched (B, d), (B, l, d), (B, l). A row
    with every position masked pools to the zero vector.
    """
    single = h_t.value.ndim == 1
    mask = np.asarray(mask, dtype=bool)
    if single:
        h_t = nx.reshape(h_t, (1,) + h_t.shape)
        h_b = nx.reshape(h_b, (1,) + h_b.shape)
        mask = mask[None, :]
    if h_b.shape[:2] != mask.shape or h_b.shape[0] != h_t.shape[0] or h_b.shape[2] != h_t.shape[1]:
        raise nx.ShapeError(f"id_interest: target {h_t.shape}, behaviors {h_b.shape}, mask {mask.shape}")
    logits = nx.scale(nx.dot(nx.expand(h_t, h_b.shape[1]), h_b), 1.0 / math.sqrt(h_t.shape[1]))
    out = nx.weighted_sum(nx.softmax(logits, mask=mask), h_b)
    return nx.reshape(out, out.shape[1:]) if single else out


def id_attention_weights(h_t: np.ndarray, h_b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    tape = nx.Tape()
    t, b = tape.constant(np.atleast_2d(h_t)), tape.constant(h_b if h_b.ndim == 3 else h_b[None])
    m = np.atleast_2d(mask)
    logits = nx.scale(nx.dot(nx.expand(t, b.shape[1]), b), 1.0 / math.sqrt(t.shape[1]))
    return nx.softmax(logits, mask=m).value


def content_interest(h_t: nx.Var, h_b: nx.Var, mask: np.ndarray) -> tuple[nx.Var, nx.Var]:
    """(alpha, pooled): alpha_i = cos(h_t, h_i) on unmasked slots (0 elsewhere),
    pooled = sum_i alpha_i h_i. Zero-norm unmasked embeddings raise ValueError."""
    single = h_t.value.ndim == 1
    mask = np.asarray(mask, dtype=bool)
    if single:
        h_t = nx.reshape(h_t, (1,) + h_t.shape)
        h_b = nx.reshape(h_b, (1,) + h_b.shape)
        mask = mask[None, :]
    if h_b.shape[:2] != mask.shape or h_b.shape[0] != h_t.shape[0] or h_b.shape[2] != h_t.shape[1]:
        raise nx.ShapeError(f"content_interest: target {h_t.shape}, behaviors {h_b.shape}, mask {mask.shape}")
    target_norm = np.linalg.norm(h_t.value, axis=-1)
    if np.any(mask.any(axis=1) & (target_norm == 0.0)):
        raise ValueError("content_interest: zero-norm target embedding")
    if np.any(mask & (np.linalg.norm(h_b.value, axis=-1) == 0.0)):
        raise ValueError("content_interest: zero-norm behavior embedding at an unmasked position")
    alpha = nx.cosine(nx.expand(h_t, h_b.shape[1]), h_b, mask=mask)
    pooled = nx.weighted_sum(alpha, h_b)
    if single:
        return nx.reshape(alpha, alpha.shape[1:]), nx.reshape(pooled, pooled.shape[1:])
    return alpha, pooled


def fusion_interest(alpha: nx.Var, h_b_id: nx.Var, mask: np.ndarray) -> nx.Var:
    """sum_i alpha_i * h_i^ID over unmasked positions, reusing the content-interest weights."""
    mask = np.asarray(mask, dtype=bool)
    if alpha.shape != mask.shape or h_b_id.shape[:-1] != alpha.shape:
        raise nx.ShapeError(f"fusion_interest: alpha {alpha.shape}, ids {h_b_id.shape}, mask {mask.shape}")
    tape = alpha.tape
    gated = nx.mul(alpha, tape.constant(mask.astype(np.float64)))
    return nx.weighted_sum(gated, h_b_id)


# ---------------------------------------------------------------------------
# dataset encoding


@dataclass
class EncodedData:
    """Index form of a sample list plus the frozen multi-modal vectors it needs."""

    user_idx: np.ndarray
    query_idx: np.ndarray
    target_idx: np.ndarray
    beh_idx: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    mm: np.ndarray
    mm_hit: np.ndarray
    target_mm_row: np.ndarray
    beh_mm_row: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "EncodedData":
        return EncodedData(self.user_idx[idx], self.query_idx[idx], self.target_idx[idx], self.beh_idx[idx],
                           self.mask[idx], self.labels[idx], self.mm, self.mm_hit, self.target_mm_row[idx],
                           self.beh_mm_row[idx])


def encode_samples(model: CtrModel, samples: Sequence[BehaviorSample], lookup: MMLookup | None) -> EncodedData:
    """Resolve ids to table rows and fetch multi-modal vectors for every item key once."""
    B, L = len(samples), model.max_len
    for s in samples:
        if len(s.behavior_keys) > L:
            raise ValueError(f"behavior length {len(s.behavior_keys)} exceeds max_len {L}")
    user_idx = model.users.rows([s.user_key for s in samples])
    query_idx = model.queries.rows([s.query_key for s in samples])
    target_idx = model.items.rows([s.target_key for s in samples])
    mask = np.zeros((B, L), dtype=bool)
    beh_keys = np.zeros((B, L), dtype=np.uint64)
    for r, s in enumerate(samples):
        n = len(s.behavior_keys)
        mask[r, :n] = True
        beh_keys[r, :n] = s.behavior_keys
    flat = [int(k) for k in beh_keys[mask]]
    beh_idx = np.zeros((B, L), dtype=np.int64)
    if flat:
        beh_idx[mask] = model.items.rows(flat)
    universe = sorted({s.target_key for s in samples} | set(flat))
    pos = {k: i for i, k in enumerate(universe)}
    if lookup is not None and universe:
        mm, hit = lookup(universe)
        mm = np.asarray(mm, dtype=np.float64)
        hit = np.asarray(hit, dtype=bool)
    else:
        mm, hit = np.zeros((len(universe), model.mm_dim)), np.zeros(len(universe), dtype=bool)
    if mm.shape != (len(universe), model.mm_dim):
        raise ValueError(f"lookup returned {mm.shape}, expected {(len(universe), model.mm_dim)}")
    target_row = np.array([pos[s.target_key] for s in samples], dtype=np.int64)
    beh_row = np.zeros((B, L), dtype=np.int64)
    if flat:
        beh_row[mask] = [pos[k] for k in flat]
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return EncodedData(user_idx, query_idx, target_idx, beh_idx, mask, labels, mm, hit, target_row, beh_row)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    logits: nx.Var
    alpha: nx.Var | None
    h_b_id: nx.Var | None
    h_b_mm: nx.Var | None
    h_b_fusion: nx.Var | None
    features: nx.Var


def forward_vars(model: CtrModel, bound: dict, data: EncodedData) -> ForwardTrace:
    tape = bound["emb.item"].tape
    mods = model.modules
    items = bound["emb.item"]
    h_t = nx.gather(items, data.target_idx)
    h_b = nx.gather(items, data.beh_idx)
    parts: list[nx.Var] = []
    h_id = alpha = h_mm = h_fu = None
    if "id" in mods:
        h_id = id_interest(h_t, h_b, data.mask)
        parts.append(h_id)
    if "content" in mods or "fusion" in mods:
        t_hit = data.mm_hit[data.target_mm_row]
        cmask = data.mask & data.mm_hit[data.beh_mm_row] & t_hit[:, None]
        t_mm = tape.constant(data.mm[data.target_mm_row])
        b_mm = tape.constant(data.mm[data.beh_mm_row])
        alpha, h_mm = content_interest(t_mm, b_mm, cmask)
        if "content" in mods:
            parts.append(h_mm)
        if "fusion" in mods:
            h_fu = fusion_interest(alpha, h_b, cmask)
            parts.append(h_fu)
    miss = (~data.mm_hit[data.target_mm_row]).astype(np.float64)[:, None]
    parts += [nx.gather(bound["emb.user"], data.user_idx), nx.gather(bound["emb.query"], data.query_idx), h_t,
              tape.constant(miss)]
    x = nx.concat(parts, axis=-1)
    z = nx.mlp(bound, "deepctr", x)
    return ForwardTrace(nx.reshape(z, (len(data),)), alpha, h_id, h_mm, h_fu, x)


def predict(model: CtrModel, data: EncodedData, batch_size: int = 4096) -> np.ndarray:
    out = np.empty(len(data))
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        tape = nx.Tape()
        bound = nx.bind(tape, model.params, trainable=False)
        z = forward_vars(model, bound, data.take(idx)).logits
        out[idx] = nx.sigmoid(z).value
    return out


def score(model: CtrModel, samples: Sequence[BehaviorSample], lookup: MMLookup | None) -> np.ndarray:
    return predict(model, encode_samples(model, samples, lookup))


def ciubm_forward(model: CtrModel, sample: BehaviorSample, lookup: MMLookup | None) -> float:
    """Click probability for one sample."""
    return float(score(model, [sample], lookup)[0])


# ---------------------------------------------------------------------------
# training / metrics


@dataclass
class CtrTrainResult:
    model: CtrModel
    epoch_losses: list[float]


def train_ctr(model: CtrModel, samples: Sequence[BehaviorSample] | EncodedData, lookup: MMLookup | None = None,
              epochs: int = 2, lr: float = 0.005, batch_size: int = 256, optimizer: str = "adam",
              seed: int = 0) -> CtrTrainResult:
    """Minimise mean binary cross-entropy with mini-batch updates.

    Multi-modal vectors are fetched once and held fixed; only ID tables and
    the MLP move.
    """
    data = samples if isinstance(samples, EncodedData) else encode_samples(model, samples, lookup)
    if len(data) == 0:
        raise ValueError("train_ctr: empty dataset")
    if not np.all((data.labels == 0) | (data.labels == 1)):
        raise ValueError("train_ctr: labels must be 0 or 1")
    opt = nx.make_optimizer(optimizer, lr)
    rng = np.random.default_rng([seed, 0x7C7])
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = data.take(idx)
            params = model.params
            tape = nx.Tape()
            bound = nx.bind(tape, params)
            z = forward_vars(model, bound, batch).logits
            loss = nx.mean(nx.bce_with_logits(z, batch.labels))
            grads = nx.collect_grads(tape, loss, bound)
            opt.step(params, grads)
            total += float(loss.value) * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.debug("ctr[%s] epoch %d logloss %.5f", model.variant, epoch, losses[-1])
    return CtrTrainResult(model, losses)


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("auc: scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: need at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def format_metrics(metrics: dict, prefix: str = "") -> str:
    """Flatten nested metrics into sorted ``key=value`` lines; None prints as ``na``."""
    lines = []
    for k in sorted(metrics):
        v = metrics[k]
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            lines.append(format_metrics(v, name + "."))
        elif isinstance(v, (list, tuple)):
            lines.append(f"{name}={','.join(repr(float(x)) for x in v)}")
        elif v is None:
            lines.append(f"{name}=na")
        else:
            lines.append(f"{name}={v!r}" if isinstance(v, float) else f"{name}={v}")
    return "\n".join(x for x in lines if x)


def parse_metrics(text: str) -> dict:
    """Inverse of :func:`format_metrics` for scalar entries (values come back as float or None)."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"metrics line without '=': {line!r}")
        out[key] = None if value == "na" else float(value) if "," not in value else \
            [float(x) for x in value.split(",")]
    return out
