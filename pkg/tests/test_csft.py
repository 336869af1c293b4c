import math
from collections import Counter

import numpy as np
import pytest

from mim import numerics as nx
from mim.csft import (BatchEmbeddings, CsftLossWeights, FeatureLookup, InterestTriplet, NegSamplingConfig,
                      NegativePool, WorkerShard, build_triplets, csft_loss, expected_negatives, infonce, pool_gather,
                      read_triplets, train_csft, write_triplets)
from mim.encoders import EncoderHead, encode_items, encode_query
from mim.synthdata import WorldConfig, generate_purchase_log, generate_world


def test_triplet_only_choice():
    tb = build_triplets([(1, 10)], {10: 0, 11: 0})
    assert tb.triplets == [InterestTriplet(1, 10, 11)]


def test_triplet_singleton_category_skipped():
    tb = build_triplets([(1, 10)], {10: 0, 11: 1})
    assert tb.triplets == [] and tb.skipped == 1


def test_triplet_unknown_item_rejected():
    tb = build_triplets([(1, 99)], {10: 0, 11: 0})
    assert tb.triplets == [] and len(tb.rejected) == 1


def test_hard_negative_uniform_over_candidates():
    tb = build_triplets([(q, 1) for q in range(1000)], {1: 0, 2: 0, 3: 0}, seed=11)
    counts = Counter(t.hard_neg_key for t in tb.triplets)
    assert set(counts) == {2, 3}
    for c in counts.values():
        assert abs(c / 1000 - 0.5) <= 0.05


def test_triplet_file_round_trip(tmp_path):
    ts = [InterestTriplet(2**33 + 1, 2**40, 5), InterestTriplet(1, 2, 3)]
    write_triplets(tmp_path / "t.tsv", ts)
    assert read_triplets(tmp_path / "t.tsv") == ts


def _batch(rows, n_pos, d=1, start=0):
    keys = np.arange(start, start + rows, dtype=np.uint64)
    v = np.ones((rows, d))
    return BatchEmbeddings(keys, v, v, v, n_pos)


def _warm_pool(N, k, P, steps, hard=True):
    cfg = NegSamplingConfig(N=N, k=k, P=P, hard_negatives=hard)
    pool = NegativePool(cfg)
    rows = (2 if hard else 1) * N
    for s in range(steps):
        pool.push_step([_batch(rows, N, start=(s * P + w) * rows) for w in range(P)])
    return pool


@pytest.mark.parametrize("N,k,P,j,expected", [(1024, 10, 1, 10, 22527), (2, 1, 3, 1, 23), (2, 1, 1, 0, 3)])
def test_pool_gather_counts(N, k, P, j, expected):
    pool = _warm_pool(N, k, P, j + 1)
    assert len(pool_gather(pool, (0, 0))) == expected
    assert expected_negatives(N, k, P, j) == expected


def test_pool_gather_excludes_only_own_positive():
    pool = _warm_pool(2, 1, 2, 3)
    anchor_key = int(pool.buffers[1][0].keys[1])
    got = [b.item_key for b in pool_gather(pool, (1, 1))]
    assert anchor_key not in got
    assert len(got) == len(set(got))


def test_pool_gather_bad_anchor():
    pool = _warm_pool(2, 1, 1, 1)
    with pytest.raises(IndexError):
        pool_gather(pool, (0, 5))


def _loss(a, p, negs, tau=1.0):
    tape = nx.Tape()
    return float(infonce(tape.leaf(np.array(a, float)), tape.leaf(np.array(p, float)),
                         tape.leaf(np.array(negs, float)), tau).value)


@pytest.mark.parametrize("tau", [0.1, 1.0, 3.0])
def test_infonce_uniform_logits_ln4(tau):
    # every candidate has cosine 1/sqrt(2) with the anchor
    assert _loss([1, 0], [1, 1], [[1, -1], [2, 2], [3, -3]], tau) == pytest.approx(math.log(4), abs=1e-12)


def test_infonce_closed_form_single_negative():
    assert _loss([1, 0], [2, 0], [[0, 1]]) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_infonce_list_of_negatives_and_errors():
    tape = nx.Tape()
    a, p = tape.leaf(np.array([1.0, 0.0])), tape.leaf(np.array([1.0, 1.0]))
    loss = infonce(a, p, [tape.leaf(np.array([0.0, 1.0]))])
    assert float(loss.value) > 0
    with pytest.raises(ValueError, match="negative 0"):
        infonce(a, p, tape.leaf(np.zeros((1, 2))))
    with pytest.raises(ValueError, match="anchor"):
        infonce(tape.leaf(np.zeros(2)), p, tape.leaf(np.ones((1, 2))))


def _setup(P=1, N=3, k=0, hard=True, seed=0):
    rng = np.random.default_rng(seed)
    head = EncoderHead.create(img_dim=4, txt_dim=3, align_dim=3, mm_dim=3, hidden=(5,), seed=seed)
    cfg = NegSamplingConfig(N=N, k=k, P=P, hard_negatives=hard)

    def shard(w):
        keys = np.arange(2 * N, dtype=np.uint64) + 100 * w
        return WorkerShard(rng.standard_normal((N, 4)), keys[:N], keys[N:], rng.standard_normal((N, 4)),
                           rng.standard_normal((N, 3)), rng.standard_normal((N, 4)), rng.standard_normal((N, 3)))
    return head, cfg, [shard(w) for w in range(P)]


def test_csft_zero_weights_is_item_level_only():
    head, cfg, shards = _setup()
    wp = csft_loss(head, shards, NegativePool(cfg), 0, CsftLossWeights(0.0, 0.0), cfg)
    assert float(wp.loss.value) == pytest.approx(wp.parts[0], abs=1e-15)


def test_csft_total_is_linear_in_parts():
    head, cfg, shards = _setup(seed=3)
    w = CsftLossWeights(0.5, 0.5)
    wp = csft_loss(head, shards, NegativePool(cfg), 0, w, cfg)
    mm, txt, img = wp.parts
    assert float(wp.loss.value) == pytest.approx(mm + 0.5 * txt + 0.5 * img, rel=1e-14)
    # equal parts l give 2l
    l = mm
    assert l + 0.5 * l + 0.5 * l == pytest.approx(2 * l)


def test_csft_matches_hand_composed_infonce():
    head, cfg, shards = _setup(seed=5)
    sh = shards[0]
    wp = csft_loss(head, shards, NegativePool(cfg), 0, CsftLossWeights(0.5, 0.5), cfg)
    q = encode_query(head, sh.query_img).data
    levels = encode_items(head, np.concatenate([sh.pos_img, sh.neg_img]), np.concatenate([sh.pos_txt, sh.neg_txt]))
    per_level = []
    for cands in levels:  # (mm, img, txt)
        total = 0.0
        for r in range(cfg.N):
            others = np.delete(cands, r, axis=0)
            total += _loss(q[r], cands[r], others, cfg.tau)
        per_level.append(total / cfg.N)
    expected = per_level[0] + 0.5 * per_level[2] + 0.5 * per_level[1]
    assert float(wp.loss.value) == pytest.approx(expected, rel=1e-12)


def test_csft_candidate_count_follows_count_law():
    # with P workers and a warm pool, each anchor sees 2NP(min(j,k)+1) candidates
    head, cfg, shards = _setup(P=2, N=2, k=1, seed=2)
    pool = NegativePool(cfg)
    rows = 2 * cfg.N
    for _ in range(3):
        pool.push_step([_batch(rows, cfg.N, d=3) for _ in range(cfg.P)])
    wp = csft_loss(head, shards, pool, 1, CsftLossWeights(), cfg)
    # logits node is the first cosine_matrix on the tape
    i = next(i for i, n in enumerate(wp.tape.nodes) if n.op == "cosine_matrix")
    assert wp.tape.values[i].shape == (cfg.N, expected_negatives(cfg.N, cfg.k, cfg.P, 3) + 1)


def _tiny_world():
    cfg = WorldConfig(n_items=200, n_users=20, n_queries=40, n_categories=4, n_purchases=600, n_ctr_samples=100,
                      image_dim=16, text_dim=16, seed=1)
    return cfg, generate_world(cfg)


def test_train_csft_bookkeeping_and_determinism():
    cfg, world = _tiny_world()
    head = EncoderHead.create(img_dim=16, txt_dim=16, align_dim=8, mm_dim=8, hidden=(8,), seed=0)
    tb = build_triplets(generate_purchase_log(cfg, world.catalog, world.queries)[:1], world.catalog.category_of())
    feats = FeatureLookup.from_world(world)
    sampling = NegSamplingConfig(N=1, k=2, P=1)
    r1 = train_csft(tb.triplets, feats, head, sampling, epochs=10, seed=4)
    r2 = train_csft(tb.triplets, feats, head, sampling, epochs=10, seed=4)
    assert len(r1.losses) == 10
    assert r1.losses == r2.losses
    for k in r1.head.params:
        assert r1.head.params[k].tobytes() == r2.head.params[k].tobytes()


def test_train_csft_rejects_empty():
    head = EncoderHead.create(img_dim=2, txt_dim=2, align_dim=2, mm_dim=2, hidden=(2,))
    with pytest.raises(ValueError):
        train_csft([], None, head)


def test_train_csft_aligns_queries_with_purchases():
    cfg, world = _tiny_world()
    head = EncoderHead.create(img_dim=16, txt_dim=16, align_dim=8, mm_dim=8, hidden=(16,), seed=0)
    tb = build_triplets(generate_purchase_log(cfg, world.catalog, world.queries), world.catalog.category_of())
    res = train_csft(tb.triplets, FeatureLookup.from_world(world), head, NegSamplingConfig(N=8, k=2, P=2),
                     epochs=3, seed=0)
    h = res.head
    item_mm = encode_items(h, world.catalog._img, world.catalog._txt)[0]
    idx = world.catalog.index

    def cos(a, b):
        return (a * b).sum(-1) / np.linalg.norm(a, axis=-1) / np.linalg.norm(b, axis=-1)
    q = encode_query(h, world.queries.image_features([t.query_key for t in tb.triplets])).data
    pos = item_mm[[idx[t.pos_item_key] for t in tb.triplets]]
    rnd = item_mm[np.random.default_rng(0).integers(len(idx), size=len(tb.triplets))]
    assert cos(q, pos).mean() - cos(q, rnd).mean() >= 0.1


def test_threaded_workers_match_sequential():
    cfg, world = _tiny_world()
    head = EncoderHead.create(img_dim=16, txt_dim=16, align_dim=8, mm_dim=8, hidden=(8,), seed=0)
    tb = build_triplets(generate_purchase_log(cfg, world.catalog, world.queries)[:64], world.catalog.category_of())
    feats = FeatureLookup.from_world(world)
    s = NegSamplingConfig(N=4, k=1, P=2)
    a = train_csft(tb.triplets, feats, head, s, seed=1)
    b = train_csft(tb.triplets, feats, head, s, seed=1, threads=True)
    assert a.losses == b.losses
