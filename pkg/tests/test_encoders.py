import math

import numpy as np
import pytest

from mim import numerics as nx
from mim.encoders import (EncoderHead, StubFeatureProvider, dma_align_step, encode_item, encode_items, encode_query,
                          load_head, pretrain_dma, provide_feature, save_head, tfn_fuse)


def test_stub_features_deterministic_and_keyed():
    img = StubFeatureProvider("image", 4, 7)
    a = provide_feature(img, 42).data
    np.testing.assert_array_equal(a, provide_feature(img, 42).data)
    assert np.any(a != provide_feature(img, 43).data)
    txt = StubFeatureProvider("text", 4, 7)
    assert np.any(a != provide_feature(txt, 42).data)


def test_stub_rejects_unknown_modality():
    with pytest.raises(ValueError):
        StubFeatureProvider("audio", 4, 0)


def test_tfn_small_cases():
    out, _ = nx.forward(tfn_fuse, [np.array([2.0]), np.array([3.0])])
    np.testing.assert_array_equal(out.data, [6, 2, 3, 1])
    out, _ = nx.forward(tfn_fuse, [np.zeros(2), np.zeros(3)])
    assert out.data.shape == (12,)
    np.testing.assert_array_equal(out.data[:-1], 0.0)
    assert out.data[-1] == 1.0


def test_tfn_matches_double_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(3), rng.standard_normal(5)
    ea, eb = np.append(a, 1.0), np.append(b, 1.0)
    expected = []
    for i in range(4):
        for j in range(6):
            expected.append(ea[i] * eb[j])
    out, _ = nx.forward(tfn_fuse, [a, b])
    np.testing.assert_array_equal(out.data, expected)


def _zero_mlp(head):
    for k in head.params:
        if k.startswith("mlp."):
            head.params[k][...] = 0.0


def test_encode_item_zero_mlp_gives_zero():
    head = EncoderHead.create(img_dim=3, txt_dim=2, align_dim=2, mm_dim=4, hidden=(5,))
    _zero_mlp(head)
    b = encode_item(head, 1, np.zeros(3), np.zeros(2))
    np.testing.assert_array_equal(b.h_mm, 0.0)


def test_encode_item_deterministic():
    head = EncoderHead.create(img_dim=3, txt_dim=2, align_dim=2, mm_dim=4, hidden=(5,), seed=2)
    x, y = np.arange(3.0), np.arange(2.0)
    b1, b2 = encode_item(head, 9, x, y), encode_item(head, 9, x, y)
    assert b1.h_mm.tobytes() == b2.h_mm.tobytes()
    assert b1.h_img.tobytes() == b2.h_img.tobytes()


def test_encode_item_hand_built_one_layer_head():
    head = EncoderHead.create(img_dim=1, txt_dim=1, align_dim=1, mm_dim=2, hidden=())
    head.params["proj_img.W"][...] = [[2.0]]
    head.params["proj_img.b"][...] = [0.5]
    head.params["proj_txt.W"][...] = [[-1.0]]
    head.params["proj_txt.b"][...] = [0.25]
    W = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.0]])
    c = np.array([0.1, -0.2])
    head.params["mlp.0.W"][...] = W
    head.params["mlp.0.b"][...] = c
    a = 2.0 * 1.5 + 0.5
    b = -1.0 * 0.75 + 0.25
    expected = W @ np.array([a * b, a, b, 1.0]) + c
    np.testing.assert_allclose(encode_item(head, 1, [1.5], [0.75]).h_mm, expected, rtol=1e-15)


def test_encode_query_cases():
    head = EncoderHead.create(img_dim=3, txt_dim=2, align_dim=2, mm_dim=2, hidden=(4,), seed=5)
    x = np.array([0.3, -0.4, 1.0])
    manual = head.params["proj_img.W"] @ x + head.params["proj_img.b"]
    np.testing.assert_allclose(encode_query(head, x).data, manual, rtol=1e-15)
    assert encode_query(head, x).data.tobytes() == encode_query(head, x).data.tobytes()
    head.params["proj_img.W"][...] = 0
    head.params["proj_img.b"][...] = 0
    np.testing.assert_array_equal(encode_query(head, np.zeros(3)).data, 0.0)


def test_encode_query_dim_mismatch():
    head = EncoderHead.create(img_dim=3, txt_dim=2, align_dim=2, mm_dim=2, hidden=(4,))
    with pytest.raises(ValueError, match="image feature dim"):
        encode_query(head, np.zeros(4))


def test_batched_and_single_encoding_agree():
    rng = np.random.default_rng(1)
    head = EncoderHead.create(img_dim=4, txt_dim=3, align_dim=3, mm_dim=2, hidden=(6,), seed=1)
    img, txt = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    batch = encode_items(head, img, txt)[0]
    for i in range(5):
        np.testing.assert_allclose(encode_item(head, i, img[i], txt[i]).h_mm, batch[i], rtol=1e-12)


def test_dma_single_pair_loss_zero():
    head = EncoderHead.create(img_dim=3, txt_dim=3, align_dim=2, mm_dim=2, hidden=(2,))
    loss, _ = dma_align_step(head, np.ones((1, 3)), np.ones((1, 3)))
    assert loss == pytest.approx(0.0, abs=1e-15)


def test_dma_uniform_similarities_give_ln2():
    head = EncoderHead.create(img_dim=2, txt_dim=2, align_dim=2, mm_dim=2, hidden=(2,))
    for k in ("proj_img", "proj_txt"):
        head.params[f"{k}.W"][...] = np.eye(2)
        head.params[f"{k}.b"][...] = 0.0
    # every image projects to the same direction, so all logits in a row coincide
    img = np.array([[1.0, 0.0], [2.0, 0.0]])
    txt = np.array([[1.0, 1.0], [1.0, -1.0]])
    loss, _ = dma_align_step(head, img, txt)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_dma_loss_decreases():
    rng = np.random.default_rng(0)
    head = EncoderHead.create(img_dim=6, txt_dim=5, align_dim=4, mm_dim=2, hidden=(2,), seed=0)
    z = rng.standard_normal((8, 3))
    img = z @ rng.standard_normal((3, 6))
    txt = z @ rng.standard_normal((3, 5))
    first, _ = dma_align_step(head, img, txt)
    losses = pretrain_dma(head, img, txt, epochs=100, batch_size=8, lr=0.005)
    assert losses[-1] < first


def test_dma_rejects_bad_tau():
    head = EncoderHead.create(img_dim=2, txt_dim=2, align_dim=2, mm_dim=2, hidden=(2,))
    with pytest.raises(ValueError):
        dma_align_step(head, np.ones((2, 2)), np.ones((2, 2)), tau=0.0)


def test_checkpoint_round_trip(tmp_path):
    head = EncoderHead.create(img_dim=3, txt_dim=2, align_dim=2, mm_dim=2, hidden=(4, 3), fusion="concat", seed=3)
    save_head(head, tmp_path / "h.mimh")
    back = load_head(tmp_path / "h.mimh")
    assert back.config() == head.config()
    for k, v in head.params.items():
        assert back.params[k].tobytes() == v.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError):
        load_head(tmp_path / "x")
