import math

import numpy as np
import pytest

from mim import numerics as nx
from mim.ciubm import (CtrModel, auc, ciubm_forward, content_interest, encode_samples, format_metrics,
                       fusion_interest, id_interest, parse_metrics, score, train_ctr)
from mim.samples import BehaviorSample, format_sample, parse_sample, read_samples, write_samples


def run(fn, *arrays):
    tape = nx.Tape()
    return fn(*[tape.leaf(np.asarray(a, float)) for a in arrays])


def test_id_interest_single_behavior_is_identity():
    e = np.array([0.3, -1.0, 2.0])
    out = run(lambda t, b: id_interest(t, b, np.array([True])), np.ones(3), e[None])
    np.testing.assert_allclose(out.value, e, rtol=1e-15)


def test_id_interest_two_identical_behaviors():
    e = np.array([1.5, -0.5])
    out = run(lambda t, b: id_interest(t, b, np.ones(2, bool)), np.array([0.2, 0.9]), np.stack([e, e]))
    np.testing.assert_allclose(out.value, e, rtol=1e-15)


def test_id_interest_matches_manual_softmax():
    rng = np.random.default_rng(0)
    t, b = rng.standard_normal(4), rng.standard_normal((3, 4))
    logits = [float(np.dot(t, b[i])) / 2.0 for i in range(3)]
    w = [math.exp(x) for x in logits]
    w = [x / sum(w) for x in w]
    expected = sum(w[i] * b[i] for i in range(3))
    out = run(lambda x, y: id_interest(x, y, np.ones(3, bool)), t, b)
    np.testing.assert_allclose(out.value, expected, rtol=1e-12)


def test_id_interest_masked_positions_ignored():
    rng = np.random.default_rng(1)
    t, b = rng.standard_normal(2), rng.standard_normal((3, 2))
    full = run(lambda x, y: id_interest(x, y, np.array([True, False, True])), t, b).value
    b2 = b.copy()
    b2[1] = 100.0
    again = run(lambda x, y: id_interest(x, y, np.array([True, False, True])), t, b2).value
    np.testing.assert_allclose(full, again, rtol=1e-15)


def test_content_interest_identical_behavior():
    t = np.array([0.6, 0.8])
    alpha, pooled = run(lambda x, y: content_interest(x, y, np.array([True])), t, t[None])
    assert alpha.value[0] == pytest.approx(1.0)
    np.testing.assert_allclose(pooled.value, t)


def test_content_interest_orthogonal_case():
    alpha, pooled = run(lambda x, y: content_interest(x, y, np.ones(2, bool)), [1, 0], [[1, 0], [0, 1]])
    np.testing.assert_allclose(alpha.value, [1, 0])
    np.testing.assert_allclose(pooled.value, [1, 0])


def test_content_interest_matches_brute_force():
    rng = np.random.default_rng(2)
    t, b = rng.standard_normal(5), rng.standard_normal((4, 5))
    alpha, pooled = run(lambda x, y: content_interest(x, y, np.ones(4, bool)), t, b)
    cos = [float(np.dot(t, b[i]) / np.sqrt(np.dot(t, t) * np.dot(b[i], b[i]))) for i in range(4)]
    np.testing.assert_allclose(alpha.value, cos, rtol=1e-12)
    np.testing.assert_allclose(pooled.value, sum(cos[i] * b[i] for i in range(4)), rtol=1e-12)


def test_content_interest_zero_norm_raises():
    with pytest.raises(ValueError, match="zero-norm"):
        run(lambda x, y: content_interest(x, y, np.ones(1, bool)), [0, 0], [[1, 0]])


def test_fusion_interest_cases():
    ids = np.array([[2.0, 2.0], [5.0, 5.0]])
    out = run(lambda a, h: fusion_interest(a, h, np.ones(2, bool)), [1, 0], ids)
    np.testing.assert_allclose(out.value, [2, 2])
    out = run(lambda a, h: fusion_interest(a, h, np.ones(2, bool)), [0, 0], ids)
    np.testing.assert_array_equal(out.value, 0.0)
    rng = np.random.default_rng(3)
    a, h = rng.uniform(-1, 1, 4), rng.standard_normal((4, 3))
    out = run(lambda x, y: fusion_interest(x, y, np.ones(4, bool)), a, h)
    np.testing.assert_allclose(out.value, sum(a[i] * h[i] for i in range(4)), rtol=1e-12)


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_matches_pairwise_enumeration():
    rng = np.random.default_rng(4)
    s = rng.integers(0, 5, 60).astype(float)  # many ties
    y = rng.integers(0, 2, 60)
    pos, neg = s[y == 1], s[y == 0]
    pairs = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    assert auc(s, y) == pytest.approx(pairs / (len(pos) * len(neg)), rel=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


MM = {k: np.random.default_rng(k).standard_normal(4) for k in range(1, 30)}


def lookup(keys):
    return np.stack([MM[k] for k in keys]), np.ones(len(keys), dtype=bool)


def sample(label=1, behaviors=(3, 4, 5)):
    return BehaviorSample(100, 200, 2, tuple(behaviors), label)


def test_zero_dense_gives_half():
    for v in ("base", "base+mim", "no_fusion"):
        m = CtrModel.create(v, id_dim=3, mm_dim=4, hidden=(5,), max_len=4)
        m.zero_dense()
        assert ciubm_forward(m, sample(), lookup) == 0.5


def test_input_dims_differ_by_mm_plus_id():
    base = CtrModel.create("base", id_dim=3, mm_dim=4, hidden=(5,))
    mim = CtrModel.create("base+mim", id_dim=3, mm_dim=4, hidden=(5,))
    assert mim.input_dim - base.input_dim == 4 + 3


def test_forward_matches_hand_composition():
    m = CtrModel.create("base+mim", id_dim=3, mm_dim=4, hidden=(5,), max_len=4, seed=7)
    s = sample()
    got = ciubm_forward(m, s, lookup)
    t_id = m.items.vector(s.target_key)
    b_id = np.stack([m.items.vector(k) for k in s.behavior_keys])
    logits = b_id @ t_id / math.sqrt(3)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    h_id = w @ b_id
    t_mm, b_mm = MM[s.target_key], np.stack([MM[k] for k in s.behavior_keys])
    alpha = b_mm @ t_mm / np.linalg.norm(b_mm, axis=1) / np.linalg.norm(t_mm)
    h_mm = alpha @ b_mm
    h_fu = alpha @ b_id
    x = np.concatenate([h_id, h_mm, h_fu, m.users.vector(s.user_key), m.queries.vector(s.query_key), t_id, [0.0]])
    p = m.dense
    h = np.maximum(p["deepctr.0.W"] @ x + p["deepctr.0.b"], 0)
    z = (p["deepctr.1.W"] @ h + p["deepctr.1.b"])[0]
    assert got == pytest.approx(1 / (1 + math.exp(-z)), rel=1e-12)


def test_cold_target_sets_miss_bit_and_masks_content():
    def partial(keys):
        vecs, hit = lookup(keys)
        hit = np.array([k != 2 for k in keys])
        vecs[~hit] = 0.0
        return vecs, hit
    m = CtrModel.create("base+mim", id_dim=3, mm_dim=4, hidden=(5,), max_len=4, seed=1)
    data = encode_samples(m, [sample()], partial)
    assert not data.mm_hit[data.target_mm_row[0]]
    p = ciubm_forward(m, sample(), partial)
    assert 0.0 < p < 1.0


def test_behavior_longer_than_max_len_rejected():
    m = CtrModel.create("base", id_dim=3, mm_dim=4, hidden=(5,), max_len=2)
    with pytest.raises(ValueError, match="max_len"):
        score(m, [sample()], None)


def test_single_sample_training_loss_decreases():
    m = CtrModel.create("base+mim", id_dim=3, mm_dim=4, hidden=(5,), max_len=4, seed=0)
    losses = train_ctr(m, [sample(1)], lookup, epochs=50, lr=0.01, batch_size=1, seed=0).epoch_losses
    assert all(b < a for a, b in zip(losses, losses[1:]))


def _noise_data(seed, n):
    rng = np.random.default_rng(seed)
    return [BehaviorSample(int(rng.integers(1, 50)), int(rng.integers(1, 20)), int(rng.integers(1, 30)),
                           tuple(int(k) for k in rng.integers(1, 30, size=rng.integers(1, 5))), int(rng.integers(2)))
            for _ in range(n)]


def test_training_deterministic():
    data = _noise_data(0, 200)
    a = train_ctr(CtrModel.create("base+mim", id_dim=3, mm_dim=4, hidden=(5,), max_len=4, seed=2), data, lookup,
                  epochs=2, seed=3).epoch_losses
    b = train_ctr(CtrModel.create("base+mim", id_dim=3, mm_dim=4, hidden=(5,), max_len=4, seed=2), data, lookup,
                  epochs=2, seed=3).epoch_losses
    assert a == b


def test_noise_labels_give_chance_auc():
    aucs = []
    for seed in range(5):
        data = _noise_data(seed, 3000)
        m = CtrModel.create("base+mim", id_dim=4, mm_dim=4, hidden=(8,), max_len=4, seed=seed)
        train_ctr(m, data[:2000], lookup, epochs=2, seed=seed)
        test = data[2000:]
        aucs.append(auc(score(m, test, lookup), [s.label for s in test]))
    assert 0.45 <= np.mean(aucs) <= 0.55


def test_sample_round_trip(tmp_path):
    s = [sample(), BehaviorSample(1, 2, 3, (), 0)]
    assert parse_sample(format_sample(s[0])) == s[0]
    write_samples(tmp_path / "s.tsv", s)
    assert read_samples(tmp_path / "s.tsv") == s
    with pytest.raises(ValueError):
        BehaviorSample(1, 2, 3, (), 2)


def test_metrics_text_round_trip():
    m = {"auc": 0.71234567890123, "buckets": {"S1": 0.8, "S2": None}, "train_logloss": [0.69, 0.6]}
    text = format_metrics(m, "base.")
    assert text.splitlines()[0] == "base.auc=0.71234567890123"
    assert parse_metrics(text) == {"base.auc": 0.71234567890123, "base.buckets.S1": 0.8, "base.buckets.S2": None,
                                   "base.train_logloss": [0.69, 0.6]}
    with pytest.raises(ValueError):
        parse_metrics("no equals sign")
