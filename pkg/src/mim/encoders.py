"""Stub modality feature providers and the trainable multi-modal encoder head.

The head projects image and text features into a shared space (the
alignment projections), fuses them with an augmented outer product and
refines the fused vector with an MLP.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from . import numerics as nx
from .numerics.params import Params, init_mlp, uniform_linear

MODALITY_SALT = {"image": 0x1F1A6E, "text": 0x7E47}


class FeatureSource(Protocol):
    dim: int

    def feature(self, key: int) -> np.ndarray: ...


@dataclass(frozen=True)
class StubFeatureProvider:
    """Seeded hash expansion standing in for a pre-trained vision or language model.

    The vector for a key depends only on (modality, dim, seed, key), so it is
    identical across processes and call order.
    """

    modality: str
    dim: int
    seed: int

    def __post_init__(self):
        if self.modality not in MODALITY_SALT:
            raise ValueError(f"unknown modality {self.modality!r}")

    def feature(self, key: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, MODALITY_SALT[self.modality],
                                     int(key) & 0xFFFFFFFFFFFFFFFF])
        return rng.standard_normal(self.dim)

    def features(self, keys) -> np.ndarray:
        return np.stack([self.feature(k) for k in keys]) if len(keys) else np.zeros((0, self.dim))


def provide_feature(provider: FeatureSource, key: int) -> nx.Tensor:
    return nx.Tensor(provider.feature(key))


@dataclass
class MMEmbeddingBundle:
    item_key: int
    h_mm: np.ndarray
    h_img: np.ndarray
    h_txt: np.ndarray

    def detached(self) -> "MMEmbeddingBundle":
        return MMEmbeddingBundle(self.item_key, *(_ro(v) for v in (self.h_mm, self.h_img, self.h_txt)))


def _ro(v: np.ndarray) -> np.ndarray:
    out = np.array(v, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass
class EncoderHead:
    """Alignment projections plus fusion MLP.

    ``fusion`` is ``"tfn"`` (augmented outer product) or ``"concat"``
    (plain concatenation, used for the no-TFN ablation).
    """

    img_dim: int
    txt_dim: int
    align_dim: int
    mm_dim: int
    hidden: tuple[int, ...]
    fusion: str = "tfn"
    params: Params = field(default_factory=dict)

    @classmethod
    def create(cls, img_dim: int = 32, txt_dim: int = 32, align_dim: int = 16, mm_dim: int = 16,
               hidden=(64,), fusion: str = "tfn", seed: int = 0) -> "EncoderHead":
        if fusion not in ("tfn", "concat"):
            raise ValueError(f"unknown fusion {fusion!r}")
        head = cls(img_dim, txt_dim, align_dim, mm_dim, tuple(hidden), fusion)
        rng = np.random.default_rng([seed, 0xE4C0])
        w, b = uniform_linear(rng, img_dim, align_dim)
        head.params["proj_img.W"], head.params["proj_img.b"] = w, b
        w, b = uniform_linear(rng, txt_dim, align_dim)
        head.params["proj_txt.W"], head.params["proj_txt.b"] = w, b
        head.params.update(init_mlp(rng, [head.fused_dim, *head.hidden, mm_dim], "mlp"))
        return head

    @property
    def fused_dim(self) -> int:
        if self.fusion == "tfn":
            return (self.align_dim + 1) * (self.align_dim + 1)
        return 2 * self.align_dim

    def copy(self) -> "EncoderHead":
        return EncoderHead(self.img_dim, self.txt_dim, self.align_dim, self.mm_dim, self.hidden,
                           self.fusion, {k: v.copy() for k, v in self.params.items()})

    def config(self) -> dict:
        return {"img_dim": self.img_dim, "txt_dim": self.txt_dim, "align_dim": self.align_dim,
                "mm_dim": self.mm_dim, "hidden": list(self.hidden), "fusion": self.fusion}

    def validate(self) -> None:
        expected = {
            "proj_img.W": (self.align_dim, self.img_dim), "proj_img.b": (self.align_dim,),
            "proj_txt.W": (self.align_dim, self.txt_dim), "proj_txt.b": (self.align_dim,),
        }
        sizes = [self.fused_dim, *self.hidden, self.mm_dim]
        for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            expected[f"mlp.{i}.W"] = (n, m)
            expected[f"mlp.{i}.b"] = (n,)
        if set(expected) != set(self.params):
            raise ValueError(f"head parameters {sorted(self.params)} != expected {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"head parameter {k} has shape {self.params[k].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# differentiable building blocks (operate on bound Vars)


def tfn_fuse(h_img: nx.Var, h_txt: nx.Var) -> nx.Var:
    return nx.outer_product_augmented(h_img, h_txt)


def fuse(head: EncoderHead, h_img: nx.Var, h_txt: nx.Var) -> nx.Var:
    if head.fusion == "tfn":
        return tfn_fuse(h_img, h_txt)
    return nx.concat([h_img, h_txt], axis=-1)


def project_image(bound: Mapping[str, nx.Var], x: nx.Var) -> nx.Var:
    return nx.affine(x, bound["proj_img.W"], bound["proj_img.b"])


def project_text(bound: Mapping[str, nx.Var], x: nx.Var) -> nx.Var:
    return nx.affine(x, bound["proj_txt.W"], bound["proj_txt.b"])


def encode_vars(head: EncoderHead, bound: Mapping[str, nx.Var], img: nx.Var, txt: nx.Var):
    """(h_mm, h_img, h_txt) for a batch of raw features, recorded on the tape of ``bound``."""
    h_img = project_image(bound, img)
    h_txt = project_text(bound, txt)
    h_mm = nx.mlp(bound, "mlp", fuse(head, h_img, h_txt))
    return h_mm, h_img, h_txt


def _check_dims(head: EncoderHead, img: np.ndarray, txt: np.ndarray | None = None) -> None:
    if img.shape[-1] != head.img_dim:
        raise ValueError(f"image feature dim {img.shape[-1]} != head image dim {head.img_dim}")
    if txt is not None and txt.shape[-1] != head.txt_dim:
        raise ValueError(f"text feature dim {txt.shape[-1]} != head text dim {head.txt_dim}")


def encode_items(head: EncoderHead, img: np.ndarray, txt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched inference: arrays (n, d_img), (n, d_txt) -> (h_mm, h_img, h_txt)."""
    img = np.atleast_2d(np.asarray(img, dtype=np.float64))
    txt = np.atleast_2d(np.asarray(txt, dtype=np.float64))
    _check_dims(head, img, txt)
    tape = nx.Tape()
    bound = nx.bind(tape, head.params, trainable=False)
    h_mm, h_img, h_txt = encode_vars(head, bound, tape.constant(img), tape.constant(txt))
    return h_mm.value, h_img.value, h_txt.value


def encode_item(head: EncoderHead, key: int, img_feature, txt_feature) -> MMEmbeddingBundle:
    img, txt = nx.as_array(img_feature), nx.as_array(txt_feature)
    h_mm, h_img, h_txt = encode_items(head, img[None, :], txt[None, :])
    return MMEmbeddingBundle(int(key), _ro(h_mm[0]), _ro(h_img[0]), _ro(h_txt[0]))


def encode_query(head: EncoderHead, img_feature) -> nx.Tensor:
    img = np.atleast_2d(nx.as_array(img_feature))
    _check_dims(head, img)
    out = img @ head.params["proj_img.W"].T + head.params["proj_img.b"]
    return nx.Tensor(out[0] if np.ndim(nx.as_array(img_feature)) == 1 else out)


# ---------------------------------------------------------------------------
# image-text alignment pre-training


def symmetric_infonce(a: nx.Var, b: nx.Var, tau: float) -> nx.Var:
    """Mean of the a->b and b->a in-batch InfoNCE losses over cosine logits."""
    n = a.shape[0]
    diag = np.arange(n)
    s_ab = nx.scale(nx.cosine_matrix(a, b), 1.0 / tau)
    s_ba = nx.scale(nx.cosine_matrix(b, a), 1.0 / tau)
    l_ab = nx.mean(nx.sub(nx.log_sum_exp(s_ab), nx.pick(s_ab, diag)))
    l_ba = nx.mean(nx.sub(nx.log_sum_exp(s_ba), nx.pick(s_ba, diag)))
    return nx.scale(nx.add(l_ab, l_ba), 0.5)


DMA_PARAMS = ("proj_img.W", "proj_img.b", "proj_txt.W", "proj_txt.b")


def dma_align_step(head: EncoderHead, img: np.ndarray, txt: np.ndarray, tau: float = 1.0) -> tuple[float, Params]:
    """Loss and projection-head gradients for one batch of matched image/text features."""
    if tau <= 0:
        raise ValueError("dma_align_step: temperature must be positive")
    img = np.atleast_2d(np.asarray(img, dtype=np.float64))
    txt = np.atleast_2d(np.asarray(txt, dtype=np.float64))
    if img.shape[0] < 1 or img.shape[0] != txt.shape[0]:
        raise ValueError("dma_align_step: need a non-empty batch of matched pairs")
    _check_dims(head, img, txt)
    tape = nx.Tape()
    bound = nx.bind(tape, {k: head.params[k] for k in DMA_PARAMS})
    loss = symmetric_infonce(project_image(bound, tape.constant(img)),
                             project_text(bound, tape.constant(txt)), tau)
    return float(loss.value), nx.collect_grads(tape, loss, bound)


def pretrain_dma(head: EncoderHead, img: np.ndarray, txt: np.ndarray, *, epochs: int = 1, batch_size: int = 64,
                 lr: float = 0.005, tau: float = 1.0, optimizer: str = "sgd", seed: int = 0) -> list[float]:
    """Train the alignment projections in place; returns the per-step loss trajectory."""
    opt = nx.make_optimizer(optimizer, lr)
    rng = np.random.default_rng([seed, 0xD4A])
    n = img.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = dma_align_step(head, img[idx], txt[idx], tau)
            opt.step(head.params, grads)
            losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# checkpoint: b"MIMH" | u32 format | u32 config_len | config json | u32 n_params |
# per param: u32 name_len, name, u32 ndim, u32 dims..., f64 data (all little-endian)

CKPT_MAGIC = b"MIMH"
CKPT_FORMAT = 1


def save_head(head: EncoderHead, path) -> None:
    cfg = json.dumps(head.config(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_FORMAT, len(cfg)), cfg, struct.pack("<I", len(head.params))]
    for name in sorted(head.params):
        arr = np.ascontiguousarray(head.params[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_head(path) -> EncoderHead:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a head checkpoint")
    fmt, cfg_len = struct.unpack_from("<II", blob, 4)
    if fmt != CKPT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt}")
    pos = 12
    cfg = json.loads(blob[pos:pos + cfg_len])
    pos += cfg_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    head = EncoderHead(cfg["img_dim"], cfg["txt_dim"], cfg["align_dim"], cfg["mm_dim"], tuple(cfg["hidden"]),
                       cfg["fusion"], params)
    head.validate()
    return head
