"""Analytic per-sample FLOP counts for the CTR model with and without the representation center.

Counting rules: an affine m -> n layer costs 2mn; elementwise work is
counted where it scales with the behavior length; a backward pass costs
twice its forward pass. ``fom_cost`` is the forward cost of encoding one
entity (item or query) from raw content, head included.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

VARIANTS = ("base", "mim", "mim_no_rc", "mim_e2e")
BACKWARD_FACTOR = 2


@dataclass(frozen=True)
class FlopLedger:
    encoder_fom: float = 0.0
    tfn: float = 0.0
    mlp: float = 0.0
    attention: float = 0.0
    deepctr: float = 0.0
    lookup: float = 0.0

    @property
    def total(self) -> float:
        return sum(getattr(self, f.name) for f in fields(self))

    def scaled(self, c: float) -> "FlopLedger":
        return FlopLedger(**{f.name: getattr(self, f.name) * c for f in fields(self)})

    def __add__(self, other: "FlopLedger") -> "FlopLedger":
        return FlopLedger(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["total"] = self.total
        return d


@dataclass(frozen=True)
class FlopDims:
    id_dim: int = 16
    mm_dim: int = 16
    hidden: tuple[int, ...] = (64, 32)
    side_dim: int | None = None  # defaults to the CTR model's side features: 3 id vectors + miss bit

    def __post_init__(self):
        if self.id_dim < 0 or self.mm_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("dims must be positive")

    @property
    def side(self) -> int:
        return 3 * self.id_dim + 1 if self.side_dim is None else self.side_dim

    @classmethod
    def from_model(cls, model) -> "FlopDims":
        return cls(model.id_dim, model.mm_dim, tuple(model.hidden))


@dataclass(frozen=True)
class FlopReport:
    variant: str
    behaviors: int
    inference: FlopLedger
    train: FlopLedger
    deepctr_layers: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        return {"variant": self.variant, "behaviors": self.behaviors,
                "inference": self.inference.to_dict(), "train": self.train.to_dict(),
                "deepctr_layers": list(self.deepctr_layers)}


def affine_flops(m: int, n: int) -> int:
    return 2 * m * n


def mlp_layer_flops(sizes) -> list[int]:
    return [affine_flops(a, b) for a, b in zip(sizes[:-1], sizes[1:])]


def id_attention_flops(l: int, d: int) -> int:
    # dot logits, 1/sqrt(d) scale, softmax (exp, sum, divide), weighted sum
    return 2 * l * d + l + 3 * l + 2 * l * d


def content_attention_flops(l: int, d: int) -> int:
    # target norm, per-behavior norm and dot, one divide each, weighted sum
    return 2 * d + l * (4 * d + 1) + 2 * l * d


def fusion_flops(l: int, d_id: int) -> int:
    return 2 * l * d_id


def flop_account(variant: str, l: int, dims: FlopDims = FlopDims(), fom_cost: float = 0.0) -> FlopReport:
    """FLOPs for one sample with ``l`` behaviors."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if l < 0 or fom_cost < 0:
        raise ValueError("behavior length and fom_cost must be non-negative")
    mm = variant != "base"
    in_dim = dims.id_dim + dims.side + (dims.mm_dim + dims.id_dim if mm else 0)
    layers = mlp_layer_flops([in_dim, *dims.hidden, 1])
    attention = id_attention_flops(l, dims.id_dim)
    if mm:
        attention += content_attention_flops(l, dims.mm_dim) + fusion_flops(l, dims.id_dim)
    fom = fom_cost * (l + 2) if variant in ("mim_no_rc", "mim_e2e") else 0.0

    inference = FlopLedger(encoder_fom=fom, attention=attention, deepctr=sum(layers))
    # CTR parts are always trained; the encoder is frozen (forward only) unless trained end to end
    fom_train = fom * (1 + BACKWARD_FACTOR) if variant == "mim_e2e" else fom
    train = FlopLedger(encoder_fom=fom_train,
                       attention=attention * (1 + BACKWARD_FACTOR),
                       deepctr=sum(layers) * (1 + BACKWARD_FACTOR))
    return FlopReport(variant, l, inference, train, tuple(float(x) for x in layers))


def precompute_flops(img_dim: int, txt_dim: int, align_dim: int, mm_dim: int, hidden=(64,),
                     fusion: str = "tfn", fom_cost: float = 0.0) -> FlopLedger:
    """Offline cost of filling one store entry: content encoders plus the fusion head."""
    proj = affine_flops(img_dim, align_dim) + affine_flops(txt_dim, align_dim)
    if fusion == "tfn":
        fused = (align_dim + 1) ** 2
        tfn = proj + fused
    else:
        fused = 2 * align_dim
        tfn = proj
    return FlopLedger(encoder_fom=fom_cost, tfn=tfn, mlp=sum(mlp_layer_flops([fused, *hidden, mm_dim])))
