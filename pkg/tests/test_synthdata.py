import math
from dataclasses import replace

import numpy as np
import pytest

from mim.ciubm import auc
from mim.synthdata import (LatentItem, WorldConfig, exclude_targets, generate_catalog, generate_ctr_dataset,
                           generate_purchase_log, generate_queries, generate_users, generate_world, split_cold_start)

SMALL = WorldConfig(n_items=300, n_users=100, n_queries=60, n_purchases=500, n_ctr_samples=2000, seed=3)


def _mean_pairwise_cos(z):
    g = z @ z.T
    n = len(z)
    return (g.sum() - np.trace(g)) / (n * (n - 1))


def test_catalog_deterministic():
    a, b = generate_catalog(SMALL), generate_catalog(SMALL)
    assert a.keys.tolist() == b.keys.tolist()
    assert a.z.tobytes() == b.z.tobytes()
    assert a._img.tobytes() == b._img.tobytes() and a._txt.tobytes() == b._txt.tobytes()
    c = generate_catalog(replace(SMALL, seed=4))
    assert c.z.tobytes() != a.z.tobytes()


def test_latents_are_unit_vectors():
    z = generate_catalog(SMALL).z
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, rtol=1e-12)


def test_single_category_is_more_concentrated():
    one = generate_catalog(replace(SMALL, n_categories=1)).z
    many = generate_catalog(SMALL).z
    assert _mean_pairwise_cos(one) > _mean_pairwise_cos(many)


def test_noise_free_features_are_linear_views_of_latent():
    cat = generate_catalog(replace(SMALL, feature_noise=0.0))
    np.testing.assert_allclose(cat._img, cat.z @ cat.image.projection.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cat._txt, cat.z @ cat.text.projection.T, rtol=1e-12, atol=1e-12)
    # the map has full column rank, so z is recovered exactly
    z_hat = np.linalg.lstsq(cat.image.projection, cat._img.T, rcond=None)[0].T
    np.testing.assert_allclose(z_hat, cat.z, atol=1e-10)


def test_modalities_correlated_but_distinct():
    cat = generate_catalog(SMALL)
    assert not np.allclose(cat.image.projection, cat.text.projection)
    # both views predict the latent far better than chance
    for feats, proj in ((cat._img, cat.image.projection), (cat._txt, cat.text.projection)):
        z_hat = np.linalg.lstsq(proj, feats.T, rcond=None)[0].T
        cos = np.sum(z_hat * cat.z, axis=1) / np.linalg.norm(z_hat, axis=1)
        assert cos.mean() > 0.8


def test_argmax_purchases_pick_best_item_in_category():
    cfg = replace(SMALL, purchase_sharpness=math.inf)
    world = generate_world(cfg)
    cat, qs = world.catalog, world.queries
    for qk, ik in generate_purchase_log(cfg, cat, qs)[:100]:
        j = qs.index[qk]
        pool = np.flatnonzero(cat.categories == qs.categories[j])
        best = pool[np.argmax(cat.z[pool] @ qs.z[j])]
        assert ik == int(cat.keys[best])


def test_purchase_log_deterministic():
    w = generate_world(SMALL)
    assert generate_purchase_log(SMALL, w.catalog, w.queries) == generate_purchase_log(SMALL, w.catalog, w.queries)


def test_purchased_items_are_closer_than_random():
    w = generate_world(SMALL)
    rows = generate_purchase_log(SMALL, w.catalog, w.queries)
    zq = np.stack([w.queries.z[w.queries.index[q]] for q, _ in rows])
    zi = np.stack([w.catalog.z[w.catalog.index[i]] for _, i in rows])
    rnd = w.catalog.z[np.random.default_rng(0).integers(len(w.catalog.items), size=len(rows))]
    assert np.sum(zq * zi, axis=1).mean() > np.sum(zq * rnd, axis=1).mean()


def test_flat_click_model_gives_half_label_rate():
    cfg = replace(SMALL, content_weight=0.0, popularity_weight=0.0, noise_scale=0.0, n_ctr_samples=10000)
    w = generate_world(cfg)
    data = generate_ctr_dataset(cfg, w.catalog, w.queries, w.users)
    np.testing.assert_array_equal(data.probabilities, 0.5)
    rate = np.mean([s.label for s in data.samples])
    assert 0.45 <= rate <= 0.55


def test_ctr_dataset_deterministic():
    w = generate_world(SMALL)
    a = generate_ctr_dataset(SMALL, w.catalog, w.queries, w.users)
    b = generate_ctr_dataset(SMALL, w.catalog, w.queries, w.users)
    assert a.samples == b.samples and a.probabilities.tobytes() == b.probabilities.tobytes()


def test_behaviors_are_catalog_items_within_length_bounds():
    w = generate_world(SMALL)
    for b in w.users.behaviors:
        assert SMALL.min_behaviors <= len(b) <= SMALL.max_behaviors
        assert len(set(b)) == len(b)
        assert all(k in w.catalog.index for k in b)


def test_oracle_and_content_signal_at_default_weights():
    cfg = WorldConfig(n_ctr_samples=20000)
    w = generate_world(cfg)
    data = generate_ctr_dataset(cfg, w.catalog, w.queries, w.users)
    labels = [s.label for s in data.samples]
    assert auc(data.probabilities, labels) > 0.7
    # content similarity alone (a monotone one-feature logistic model) is recoverable
    assert auc(data.content, labels) >= 0.70


def test_cold_start_ten_items_one_per_bucket():
    items = [LatentItem(k, 0, np.ones(1), b, 0.0) for k, b in enumerate(np.linspace(0, 1, 10))]
    buckets = split_cold_start(items, 10)
    assert [len(b) for b in buckets] == [1] * 10
    assert [b[0] for b in buckets] == list(range(9, -1, -1))


def test_cold_start_buckets_monotone_in_birth_time():
    cat = generate_catalog(SMALL)
    birth = {it.key: it.birth_time for it in cat.items}
    buckets = split_cold_start(cat.items, 10)
    assert sum(map(len, buckets)) == len(cat.items)
    for newer, older in zip(buckets, buckets[1:]):
        assert min(birth[k] for k in newer) >= max(birth[k] for k in older)


def test_newest_bucket_excluded_from_training_targets():
    w = generate_world(SMALL)
    data = generate_ctr_dataset(SMALL, w.catalog, w.queries, w.users)
    s1 = split_cold_start(w.catalog.items, 10)[0]
    train = exclude_targets(data.samples, s1)
    assert set(s1).isdisjoint(s.target_key for s in train)
    assert len(train) < len(data.samples)


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(n_items=0)
    with pytest.raises(ValueError):
        WorldConfig(min_behaviors=5, max_behaviors=2)
    with pytest.raises(ValueError):
        WorldConfig(noise_scale=-1.0)


def test_queries_and_users_share_category_structure():
    cat = generate_catalog(SMALL)
    qs, us = generate_queries(SMALL, cat), generate_users(SMALL, cat)
    own = np.sum(qs.z * cat.centroids[qs.categories], axis=1).mean()
    other = np.sum(qs.z * cat.centroids[(qs.categories + 1) % SMALL.n_categories], axis=1).mean()
    assert own > other
    np.testing.assert_allclose(np.linalg.norm(us.interest, axis=1), 1.0, rtol=1e-12)
