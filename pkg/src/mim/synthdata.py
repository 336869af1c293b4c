"""Synthetic e-commerce world with latent content structure and a known click model.

Every item, query and user carries a unit latent style vector. Stub image and
text features are two fixed linear views of that latent plus independent
hash-expanded noise, so the modalities are correlated but not identical.
Click labels come from a logistic model of content similarity and item
popularity, which gives the acceptance experiments a verifiable ground truth.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoders import StubFeatureProvider
from .samples import BehaviorSample

ITEM_BASE = 1 << 32
QUERY_BASE = 2 << 32
USER_BASE = 3 << 32


@dataclass(frozen=True)
class WorldConfig:
    n_items: int = 2000
    n_users: int = 1000
    n_queries: int = 400
    n_categories: int = 10
    latent_dim: int = 8
    n_purchases: int = 6000
    n_ctr_samples: int = 50000
    content_weight: float = 4.0
    popularity_weight: float = 1.0
    noise_scale: float = 0.5
    feature_noise: float = 0.3
    category_spread: float = 0.6
    purchase_sharpness: float = 20.0
    behavior_sharpness: float = 8.0
    min_behaviors: int = 4
    max_behaviors: int = 16
    relevant_fraction: float = 0.5
    image_dim: int = 32
    text_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("n_items", "n_users", "n_queries", "n_categories", "latent_dim", "n_purchases",
                     "n_ctr_samples", "min_behaviors", "max_behaviors", "image_dim", "text_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"WorldConfig.{name} must be >= 1")
        for name in ("content_weight", "popularity_weight", "noise_scale", "feature_noise", "category_spread",
                     "purchase_sharpness", "behavior_sharpness"):
            if getattr(self, name) < 0:
                raise ValueError(f"WorldConfig.{name} must be >= 0")
        if self.min_behaviors > self.max_behaviors:
            raise ValueError("WorldConfig.min_behaviors exceeds max_behaviors")
        if not 0.0 <= self.relevant_fraction <= 1.0:
            raise ValueError("WorldConfig.relevant_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LatentItem:
    key: int
    category: int
    z: np.ndarray
    birth_time: float
    popularity: float


@dataclass
class LatentViewProvider:
    """Feature provider whose output is ``projection @ z + noise * stub(key)``."""

    modality: str
    projection: np.ndarray
    latents: dict
    noise: float
    stub: StubFeatureProvider

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def feature(self, key: int) -> np.ndarray:
        return self.projection @ self.latents[key] + self.noise * self.stub.feature(key)

    def features(self, keys) -> np.ndarray:
        if not len(keys):
            return np.zeros((0, self.dim))
        return np.stack([self.feature(k) for k in keys])


@dataclass
class Catalog:
    items: list[LatentItem]
    image: LatentViewProvider
    text: LatentViewProvider
    centroids: np.ndarray
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {it.key: i for i, it in enumerate(self.items)}
        self.keys = np.array([it.key for it in self.items], dtype=np.uint64)
        self.z = np.stack([it.z for it in self.items]) if self.items else np.zeros((0, self.centroids.shape[1]))
        self.categories = np.array([it.category for it in self.items], dtype=np.int64)
        self.popularity = np.array([it.popularity for it in self.items])
        self.birth = np.array([it.birth_time for it in self.items])
        self._img = self.image.features([it.key for it in self.items])
        self._txt = self.text.features([it.key for it in self.items])

    def category_of(self) -> dict:
        return {it.key: it.category for it in self.items}

    def image_features(self, keys) -> np.ndarray:
        return self._img[[self.index[int(k)] for k in keys]]

    def text_features(self, keys) -> np.ndarray:
        return self._txt[[self.index[int(k)] for k in keys]]


@dataclass
class Queries:
    keys: np.ndarray
    z: np.ndarray
    categories: np.ndarray
    image: LatentViewProvider

    def __post_init__(self):
        self.index = {int(k): i for i, k in enumerate(self.keys)}
        self._img = self.image.features([int(k) for k in self.keys])

    def image_features(self, keys) -> np.ndarray:
        return self._img[[self.index[int(k)] for k in keys]]


@dataclass
class Users:
    keys: np.ndarray
    interest: np.ndarray
    categories: np.ndarray
    behaviors: list[tuple[int, ...]]


@dataclass
class World:
    cfg: WorldConfig
    catalog: Catalog
    queries: Queries
    users: Users

    def image_features(self, keys) -> np.ndarray:
        """Image features for item or query keys."""
        keys = [int(k) for k in keys]
        out = np.empty((len(keys), self.cfg.image_dim))
        for i, k in enumerate(keys):
            if k in self.catalog.index:
                out[i] = self.catalog._img[self.catalog.index[k]]
            else:
                out[i] = self.queries._img[self.queries.index[k]]
        return out

    def text_features(self, keys) -> np.ndarray:
        return self.catalog.text_features(keys)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _around(rng, centroids, cats, spread, dim):
    return _unit(centroids[cats] + spread * rng.standard_normal((len(cats), dim)) / math.sqrt(dim))


def generate_catalog(cfg: WorldConfig) -> Catalog:
    """Items with category-clustered latents and feature providers wired to them."""
    rng = np.random.default_rng([cfg.seed, 0xCA7])
    L = cfg.latent_dim
    centroids = _unit(rng.standard_normal((cfg.n_categories, L)))
    cats = rng.integers(0, cfg.n_categories, size=cfg.n_items)
    z = _around(rng, centroids, cats, cfg.category_spread, L)
    birth = rng.uniform(0.0, 1.0, size=cfg.n_items)
    pop = rng.standard_normal(cfg.n_items)
    items = [LatentItem(ITEM_BASE + i, int(cats[i]), z[i], float(birth[i]), float(pop[i])) for i in range(cfg.n_items)]
    proj_img = rng.standard_normal((cfg.image_dim, L))
    proj_txt = rng.standard_normal((cfg.text_dim, L))
    latents = {it.key: it.z for it in items}
    image = LatentViewProvider("image", proj_img, latents, cfg.feature_noise,
                               StubFeatureProvider("image", cfg.image_dim, cfg.seed))
    text = LatentViewProvider("text", proj_txt, latents, cfg.feature_noise,
                              StubFeatureProvider("text", cfg.text_dim, cfg.seed))
    return Catalog(items, image, text, centroids)


def generate_queries(cfg: WorldConfig, catalog: Catalog) -> Queries:
    rng = np.random.default_rng([cfg.seed, 0x0E7])
    cats = rng.integers(0, cfg.n_categories, size=cfg.n_queries)
    z = _around(rng, catalog.centroids, cats, cfg.category_spread, cfg.latent_dim)
    keys = np.array([QUERY_BASE + j for j in range(cfg.n_queries)], dtype=np.uint64)
    latents = dict(catalog.image.latents)
    latents.update({int(k): z[j] for j, k in enumerate(keys)})
    image = LatentViewProvider("image", catalog.image.projection, latents, cfg.feature_noise, catalog.image.stub)
    return Queries(keys, z, cats, image)


def _sample_softmax(rng, scores: np.ndarray, sharpness: float) -> int:
    if math.isinf(sharpness):
        return int(np.argmax(scores))
    logits = sharpness * scores
    p = np.exp(logits - logits.max())
    return int(rng.choice(len(scores), p=p / p.sum()))


def generate_purchase_log(cfg: WorldConfig, catalog: Catalog, queries: Queries) -> list[tuple[int, int]]:
    """(query_key, item_key) rows; the purchase is drawn within the query's category,
    favouring items whose latent is close to the query's."""
    rng = np.random.default_rng([cfg.seed, 0xB0B])
    by_cat = [np.flatnonzero(catalog.categories == c) for c in range(cfg.n_categories)]
    rows = []
    for _ in range(cfg.n_purchases):
        j = int(rng.integers(cfg.n_queries))
        pool = by_cat[queries.categories[j]]
        if len(pool) == 0:
            pool = np.arange(len(catalog.items))
        sims = catalog.z[pool] @ queries.z[j]
        i = pool[_sample_softmax(rng, sims, cfg.purchase_sharpness)]
        rows.append((int(queries.keys[j]), catalog.items[i].key))
    return rows


def generate_users(cfg: WorldConfig, catalog: Catalog) -> Users:
    rng = np.random.default_rng([cfg.seed, 0x5E5])
    cats = rng.integers(0, cfg.n_categories, size=cfg.n_users)
    u = _around(rng, catalog.centroids, cats, cfg.category_spread, cfg.latent_dim)
    sims = u @ catalog.z.T
    behaviors = []
    for r in range(cfg.n_users):
        n = int(rng.integers(cfg.min_behaviors, cfg.max_behaviors + 1))
        logits = cfg.behavior_sharpness * sims[r]
        p = np.exp(logits - logits.max())
        picks = rng.choice(len(catalog.items), size=min(n, len(catalog.items)), replace=False, p=p / p.sum())
        behaviors.append(tuple(catalog.items[i].key for i in picks))
    keys = np.array([USER_BASE + r for r in range(cfg.n_users)], dtype=np.uint64)
    return Users(keys, u, cats, behaviors)


def click_logit(cfg: WorldConfig, u: np.ndarray, zq: np.ndarray, zt: np.ndarray, pop: np.ndarray) -> np.ndarray:
    """Noise-free click logit: content term on cos(u + z_query, z_target) plus popularity."""
    s = _unit(u + zq)
    return cfg.content_weight * np.sum(s * zt, axis=-1) + cfg.popularity_weight * pop


def content_similarity(u: np.ndarray, zq: np.ndarray, zt: np.ndarray) -> np.ndarray:
    return np.sum(_unit(u + zq) * zt, axis=-1)


@dataclass
class CtrData:
    samples: list[BehaviorSample]
    probabilities: np.ndarray
    content: np.ndarray


def generate_ctr_dataset(cfg: WorldConfig, catalog: Catalog, queries: Queries, users: Users) -> CtrData:
    """Impressions labelled by the click model; also returns the true click
    probabilities and content similarities for oracle scoring."""
    rng = np.random.default_rng([cfg.seed, 0xC7C])
    n = cfg.n_ctr_samples
    by_cat = [np.flatnonzero(catalog.categories == c) for c in range(cfg.n_categories)]
    q_by_cat = [np.flatnonzero(queries.categories == c) for c in range(cfg.n_categories)]
    ui = rng.integers(cfg.n_users, size=n)
    same_q = rng.uniform(size=n) < 0.7
    relevant = rng.uniform(size=n) < cfg.relevant_fraction
    qi = np.empty(n, dtype=np.int64)
    ti = np.empty(n, dtype=np.int64)
    for r in range(n):
        pool = q_by_cat[users.categories[ui[r]]]
        qi[r] = pool[rng.integers(len(pool))] if same_q[r] and len(pool) else rng.integers(cfg.n_queries)
        ipool = by_cat[queries.categories[qi[r]]]
        ti[r] = ipool[rng.integers(len(ipool))] if relevant[r] and len(ipool) else rng.integers(len(catalog.items))
    eps = rng.standard_normal(n)
    content = content_similarity(users.interest[ui], queries.z[qi], catalog.z[ti])
    logit = click_logit(cfg, users.interest[ui], queries.z[qi], catalog.z[ti], catalog.popularity[ti])
    logit = logit + cfg.noise_scale * eps
    prob = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.uniform(size=n) < prob).astype(int)
    samples = [BehaviorSample(int(users.keys[ui[r]]), int(queries.keys[qi[r]]), catalog.items[ti[r]].key,
                              users.behaviors[ui[r]], int(labels[r])) for r in range(n)]
    return CtrData(samples, prob, content)


def split_cold_start(items: list[LatentItem], n_buckets: int = 10) -> list[list[int]]:
    """Item keys in buckets S1..Sn by descending birth time (S1 newest)."""
    order = sorted(items, key=lambda it: (-it.birth_time, it.key))
    return [[order[i].key for i in chunk] for chunk in np.array_split(np.arange(len(order)), n_buckets)]


def exclude_targets(samples: list[BehaviorSample], keys) -> list[BehaviorSample]:
    banned = set(keys)
    return [s for s in samples if s.target_key not in banned]


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x5A1])
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def generate_world(cfg: WorldConfig) -> World:
    catalog = generate_catalog(cfg)
    return World(cfg, catalog, generate_queries(cfg, catalog), generate_users(cfg, catalog))
