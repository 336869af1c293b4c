"""End-to-end stages: data, encoder training, embedding table, CTR training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .ciubm import CtrModel, ciubm_forward, encode_samples, predict, train_ctr, auc
from .config import PipelineConfig
from .csft import CsftLossWeights, FeatureLookup, NegSamplingConfig, TripletBuild, build_triplets, train_csft
from .encoders import EncoderHead, pretrain_dma
from .repcenter import (DirectEncoder, EmbeddingStore, FlopDims, ParameterClient, WindowBuffer, flop_account,
                        parse_bind, precompute_table, serve_parameters)
from .samples import BehaviorSample
from .synthdata import (CtrData, World, exclude_targets, generate_ctr_dataset, generate_purchase_log,
                        generate_world, split_cold_start, train_test_split)

log = logging.getLogger(__name__)


class InvariantError(RuntimeError):
    """A result violated a property the pipeline guarantees."""


@dataclass
class Prepared:
    world: World
    purchases: list[tuple[int, int]]
    ctr: CtrData
    train_idx: np.ndarray
    test_idx: np.ndarray
    buckets: list[list[int]]
    train: list[BehaviorSample]
    test: list[BehaviorSample]


def prepare_data(cfg: PipelineConfig) -> Prepared:
    world = generate_world(cfg.world)
    purchases = generate_purchase_log(cfg.world, world.catalog, world.queries)
    ctr = generate_ctr_dataset(cfg.world, world.catalog, world.queries, world.users)
    return split_data(cfg, world, purchases, ctr)


def split_data(cfg: PipelineConfig, world: World, purchases, ctr: CtrData,
               train_idx: np.ndarray | None = None, test_idx: np.ndarray | None = None) -> Prepared:
    if train_idx is None:
        train_idx, test_idx = train_test_split(len(ctr.samples), cfg.eval.test_fraction, cfg.seed)
    buckets = split_cold_start(world.catalog.items, cfg.eval.cold_start_buckets)
    train = [ctr.samples[i] for i in train_idx]
    if cfg.eval.hold_out_newest:
        train = exclude_targets(train, buckets[0])
    test = [ctr.samples[i] for i in test_idx]
    return Prepared(world, purchases, ctr, train_idx, test_idx, buckets, train, test)


def interest_pairs(cfg: PipelineConfig, prep: Prepared) -> list[tuple[int, int]]:
    """(query, item) pairs that express interest, by the configured signal."""
    signal = cfg.csft.signal
    if signal == "purchase":
        return list(prep.purchases)
    if signal == "click":
        return [(s.query_key, s.target_key) for s in prep.train if s.label == 1]
    # category: a random same-category item per draw, i.e. no content preference beyond the category
    rng = np.random.default_rng([cfg.seed, 0xCA7])
    cat, qs = prep.world.catalog, prep.world.queries
    by_cat = {c: np.flatnonzero(cat.categories == c) for c in np.unique(cat.categories)}
    out = []
    for qi in rng.integers(len(qs.keys), size=cfg.world.n_purchases):
        pool = by_cat.get(int(qs.categories[qi]))
        if pool is not None and len(pool):
            out.append((int(qs.keys[qi]), int(cat.keys[pool[rng.integers(len(pool))]])))
    return out


def make_triplets(cfg: PipelineConfig, prep: Prepared) -> TripletBuild:
    return build_triplets(interest_pairs(cfg, prep), prep.world.catalog.category_of(), cfg.seed)


def pretrain_head(cfg: PipelineConfig, world: World) -> tuple[EncoderHead, list[float]]:
    e = cfg.encoder
    head = EncoderHead.create(img_dim=cfg.world.image_dim, txt_dim=cfg.world.text_dim, align_dim=e.align_dim,
                              mm_dim=e.mm_dim, hidden=e.hidden, fusion=e.fusion, seed=cfg.seed)
    losses = pretrain_dma(head, world.catalog._img, world.catalog._txt, epochs=e.dma_epochs,
                          batch_size=e.dma_batch_size, lr=e.dma_lr, tau=e.dma_tau, seed=cfg.seed)
    return head, losses


def finetune_head(cfg: PipelineConfig, world: World, triplets, head: EncoderHead) -> tuple[EncoderHead, list[float]]:
    c = cfg.csft
    if not c.enabled or c.epochs == 0:
        return head, []
    sampling = NegSamplingConfig(N=c.N, k=c.k, P=c.P, tau=c.tau, hard_negatives=c.hard_negatives)
    weights = CsftLossWeights(c.alpha, c.beta) if c.loss_variant == "multi_level" else CsftLossWeights(0.0, 0.0)
    res = train_csft(triplets, FeatureLookup.from_world(world), head, sampling, weights, epochs=c.epochs, lr=c.lr,
                     optimizer=c.optimizer, seed=cfg.seed)
    return res.head, res.losses


def build_store(world: World, head: EncoderHead) -> EmbeddingStore:
    cat = world.catalog
    return precompute_table([it.key for it in cat.items], cat.image_features, cat.text_features, head)


def new_model(cfg: PipelineConfig, variant: str) -> CtrModel:
    c = cfg.ciubm
    return CtrModel.create(variant, id_dim=c.id_dim, mm_dim=cfg.encoder.mm_dim, hidden=c.hidden,
                           max_len=cfg.world.max_behaviors, seed=cfg.seed)


def fit_ctr(cfg: PipelineConfig, prep: Prepared, variant: str, lookup) -> tuple[CtrModel, list[float]]:
    c = cfg.ciubm
    model = new_model(cfg, variant)
    res = train_ctr(model, prep.train, lookup, epochs=c.epochs, lr=c.lr, batch_size=c.batch_size,
                    optimizer=c.optimizer, seed=cfg.seed)
    return model, res.epoch_losses


def _safe_auc(scores, labels) -> float | None:
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        return None
    return auc(scores, labels)


def evaluate_scores(prep: Prepared, scores: np.ndarray) -> dict:
    """AUC overall, per cold-start bucket (S1 newest) and per target category."""
    y = np.array([s.label for s in prep.test])
    bucket_of = {k: b for b, keys in enumerate(prep.buckets) for k in keys}
    tb = np.array([bucket_of[s.target_key] for s in prep.test])
    cat_of = prep.world.catalog.category_of()
    tc = np.array([cat_of[s.target_key] for s in prep.test])
    return {
        "auc": _safe_auc(scores, y),
        "buckets": {f"S{b + 1}": _safe_auc(scores[tb == b], y[tb == b]) for b in range(len(prep.buckets))},
        "categories": {str(c): _safe_auc(scores[tc == c], y[tc == c]) for c in sorted(set(tc.tolist()))},
    }


def train_and_evaluate(cfg: PipelineConfig, prep: Prepared, variant: str, lookup) -> tuple[CtrModel, dict]:
    model, losses = fit_ctr(cfg, prep, variant, lookup)
    scores = predict(model, encode_samples(model, prep.test, lookup))
    if not np.all(np.isfinite(scores)):
        raise InvariantError(f"non-finite CTR scores for variant {variant}")
    out = evaluate_scores(prep, scores)
    out["train_logloss"] = losses
    return model, out


def gains(base: dict, other: dict) -> dict:
    def diff(a, b):
        return None if a is None or b is None else b - a
    return {"auc": diff(base["auc"], other["auc"]),
            "buckets": {k: diff(base["buckets"][k], other["buckets"][k]) for k in base["buckets"]}}


def reference_aucs(prep: Prepared) -> dict:
    """Scores that know the generator: true click probability and true content similarity."""
    y = np.array([s.label for s in prep.test])
    return {"true_probability": _safe_auc(prep.ctr.probabilities[prep.test_idx], y),
            "true_content": _safe_auc(prep.ctr.content[prep.test_idx], y)}


def serving_check(cfg: PipelineConfig, prep: Prepared, model: CtrModel, head: EncoderHead,
                  store: EmbeddingStore, n: int) -> dict:
    """Score ``n`` test samples through a loopback parameter server and through live encoding."""
    cat = prep.world.catalog
    direct = DirectEncoder(head, cat.image_features, cat.text_features)
    window = WindowBuffer(store, cfg.repcenter.window_count, cfg.repcenter.window_ms / 1000.0)
    host, _ = parse_bind(cfg.repcenter.bind)
    mismatches = 0
    samples = prep.test[:n]
    with serve_parameters(store, window, (host, 0)) as server, ParameterClient(server.address) as client:
        for s in samples:
            a = ciubm_forward(model, s, client)
            b = ciubm_forward(model, s, direct)
            mismatches += int(np.float64(a).tobytes() != np.float64(b).tobytes())
    return {"samples": len(samples), "mismatches": mismatches}


def flop_table(cfg: PipelineConfig) -> dict:
    dims = FlopDims(cfg.ciubm.id_dim, cfg.encoder.mm_dim, tuple(cfg.ciubm.hidden))
    l = cfg.world.max_behaviors
    return {v: flop_account(v, l, dims, cfg.eval.fom_cost).to_dict() for v in ("base", "mim", "mim_no_rc", "mim_e2e")}


ABLATIONS = ("w/o TFN", "w/o ST-NSG", "w/o multi-level", "w/o C-SFT")
MODULE_ABLATIONS = {"w/o ID interest": "no_id", "w/o content interest": "no_content",
                    "w/o fusion interest": "no_fusion"}


def ablation_config(cfg: PipelineConfig, name: str) -> PipelineConfig:
    c = cfg.csft
    if name == "w/o TFN":
        return replace(cfg, encoder=replace(cfg.encoder, fusion="concat"))
    if name == "w/o ST-NSG":
        # same global batch, one worker, no history and no hard negatives
        return replace(cfg, csft=replace(c, hard_negatives=False, k=0, P=1, N=c.N * c.P))
    if name == "w/o multi-level":
        return replace(cfg, csft=replace(c, alpha=0.0, beta=0.0))
    if name == "w/o C-SFT":
        return replace(cfg, csft=replace(c, enabled=False))
    raise KeyError(name)


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Every stage plus the ablation table; returns the report dictionary."""
    prep = prepare_data(cfg)
    tb = make_triplets(cfg, prep)
    head0, dma_losses = pretrain_head(cfg, prep.world)
    head, csft_losses = finetune_head(cfg, prep.world, tb.triplets, head0)
    store = build_store(prep.world, head)
    log.info("store built: %d entries, version %d", len(store), store.version)

    ctr = {}
    base_model, ctr["base"] = train_and_evaluate(cfg, prep, "base", None)
    mim_model, ctr["base+mim"] = train_and_evaluate(cfg, prep, "base+mim", store)
    if cfg.ciubm.variant not in ctr:
        _, ctr[cfg.ciubm.variant] = train_and_evaluate(cfg, prep, cfg.ciubm.variant, store)
    log.info("auc base %.4f base+mim %.4f", ctr["base"]["auc"], ctr["base+mim"]["auc"])

    report = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "data": {
            "items": len(prep.world.catalog.items),
            "ctr_samples": len(prep.ctr.samples),
            "train_samples": len(prep.train),
            "test_samples": len(prep.test),
            "positive_rate": float(np.mean([s.label for s in prep.ctr.samples])),
            "purchases": len(prep.purchases),
            "triplets": len(tb.triplets),
            "triplets_skipped": tb.skipped,
            "reference_auc": reference_aucs(prep),
        },
        "dma": {"steps": len(dma_losses), "loss_first": dma_losses[0] if dma_losses else None,
                "loss_last": dma_losses[-1] if dma_losses else None},
        "csft": {"steps": len(csft_losses), "losses": csft_losses},
        "ctr": ctr,
        "gain": gains(ctr["base"], ctr["base+mim"]),
        "flops": flop_table(cfg),
    }
    if cfg.repcenter.serve_check_samples:
        check = serving_check(cfg, prep, mim_model, head, store, cfg.repcenter.serve_check_samples)
        if check["mismatches"]:
            raise InvariantError(f"serving check: {check['mismatches']} of {check['samples']} samples differ")
        report["serving"] = check

    if cfg.eval.ablations:
        report["ablations"] = run_ablations(cfg, prep, ctr, head0, store)
    return report


def run_ablations(cfg: PipelineConfig, prep: Prepared, ctr: dict, head0: EncoderHead, store: EmbeddingStore) -> list[dict]:
    rows = [{"name": "MIM", "auc": ctr["base+mim"]["auc"], "gain": ctr["base+mim"]["auc"] - ctr["base"]["auc"]}]
    tb = make_triplets(cfg, prep)
    for name in ABLATIONS:
        acfg = ablation_config(cfg, name)
        h0 = head0 if acfg.encoder == cfg.encoder else pretrain_head(acfg, prep.world)[0]
        h, _ = finetune_head(acfg, prep.world, tb.triplets, h0)
        _, res = train_and_evaluate(acfg, prep, "base+mim", build_store(prep.world, h))
        rows.append({"name": name, "auc": res["auc"], "gain": res["auc"] - ctr["base"]["auc"]})
        log.info("ablation %s: auc %.4f", name, res["auc"])
    for name, variant in MODULE_ABLATIONS.items():
        _, res = train_and_evaluate(cfg, prep, variant, store)
        rows.append({"name": name, "auc": res["auc"], "gain": res["auc"] - ctr["base"]["auc"]})
        log.info("ablation %s: auc %.4f", name, res["auc"])
    return rows
