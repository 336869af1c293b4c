"""Command line entry point: ``mim <subcommand> [--config cfg.json] [--out runs]``.

Artifacts go to ``<out>/<config hash>-s<seed>/``. Exit codes: 0 ok,
2 invalid config, 3 missing upstream artifact, 4 invariant breach.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .ciubm import VARIANTS, format_metrics
from .config import ConfigError, PipelineConfig, load_config
from .csft import read_triplets, write_triplets
from .encoders import load_head, save_head
from .gradcheck import run_grad_checks
from .numerics import NonFiniteError
from .repcenter import EmbeddingStore, WindowBuffer, parse_bind, serve_parameters
from .samples import read_samples, write_samples
from .synthdata import CtrData, generate_world

log = logging.getLogger("mim")

EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# run directory helpers


def run_dir(args, cfg: PipelineConfig) -> Path:
    d = Path(args.out) / f"{cfg.config_hash()}-s{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json() + "\n")
    return d


def need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run '{stage}' first")
    return path


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def update_report(d: Path, **sections) -> dict:
    path = d / "report.json"
    report = json.loads(path.read_text()) if path.exists() else {}
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(report.get(k), dict):
            report[k] = {**report[k], **v}
        else:
            report[k] = v
    path.write_text(dump_json(report))
    return report


def load_prepared(d: Path, cfg: PipelineConfig) -> pl.Prepared:
    samples = read_samples(need(d / "ctr_samples.tsv", "gen-data"))
    split = json.loads(need(d / "split.json", "gen-data").read_text())
    purchases = [tuple(p) for p in split["purchases"]]
    world = generate_world(cfg.world)
    nan = np.full(len(samples), np.nan)
    return pl.split_data(cfg, world, purchases, CtrData(samples, nan, nan),
                         np.array(split["train"], dtype=np.int64), np.array(split["test"], dtype=np.int64))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    d = run_dir(args, cfg)
    prep = pl.prepare_data(cfg)
    write_samples(d / "ctr_samples.tsv", prep.ctr.samples)
    tb = pl.make_triplets(cfg, prep)
    write_triplets(d / "triplets.tsv", tb.triplets)
    (d / "split.json").write_text(json.dumps({"train": prep.train_idx.tolist(), "test": prep.test_idx.tolist(),
                                              "purchases": [list(p) for p in prep.purchases]}))
    update_report(d, seed=cfg.seed, config_hash=cfg.config_hash(), config=cfg.to_dict(),
                  data={"items": len(prep.world.catalog.items), "ctr_samples": len(prep.ctr.samples),
                        "train_samples": len(prep.train), "test_samples": len(prep.test),
                        "triplets": len(tb.triplets), "triplets_skipped": tb.skipped,
                        "reference_auc": pl.reference_aucs(prep)})
    print(f"data written to {d}")


def cmd_pretrain_dma(args, cfg):
    d = run_dir(args, cfg)
    need(d / "split.json", "gen-data")
    head, losses = pl.pretrain_head(cfg, generate_world(cfg.world))
    save_head(head, d / "head_dma.mimh")
    update_report(d, dma={"steps": len(losses), "loss_first": losses[0] if losses else None,
                          "loss_last": losses[-1] if losses else None})
    print(f"pretrained head -> {d / 'head_dma.mimh'}")


def cmd_train_csft(args, cfg):
    d = run_dir(args, cfg)
    head = load_head(need(d / "head_dma.mimh", "pretrain-dma"))
    triplets = read_triplets(need(d / "triplets.tsv", "gen-data"))
    head, losses = pl.finetune_head(cfg, generate_world(cfg.world), triplets, head)
    if losses and not np.all(np.isfinite(losses)):
        raise NonFiniteError("C-SFT loss became non-finite")
    save_head(head, d / "head.mimh")
    update_report(d, csft={"steps": len(losses), "losses": losses})
    print(f"fine-tuned head -> {d / 'head.mimh'} ({len(losses)} steps)")


def cmd_build_repcenter(args, cfg):
    d = run_dir(args, cfg)
    head = load_head(need(d / "head.mimh", "train-csft"))
    store = pl.build_store(generate_world(cfg.world), head)
    store.save(d / "store.mimt")
    update_report(d, repcenter={"entries": len(store), "version": store.version})
    print(f"store with {len(store)} entries -> {d / 'store.mimt'}")


def cmd_serve_params(args, cfg):
    store_path = Path(args.store) if args.store else run_dir(args, cfg) / "store.mimt"
    store = EmbeddingStore.load(need(store_path, "build-repcenter"))
    count = args.window_count or cfg.repcenter.window_count
    ms = args.window_ms or cfg.repcenter.window_ms
    window = WindowBuffer(store, count, ms / 1000.0)
    try:
        bind = parse_bind(args.bind or cfg.repcenter.bind)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    server = serve_parameters(store, window, bind)
    host, port = server.address
    print(f"listening {host}:{port} entries={len(store)} version={store.version}", flush=True)
    try:
        if args.duration > 0:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        window.flush()
        server.close()
        if args.save_on_exit:
            store.save(store_path)


def cmd_train_ctr(args, cfg):
    d = run_dir(args, cfg)
    variant = args.variant or cfg.ciubm.variant
    prep = load_prepared(d, cfg)
    lookup = None
    if VARIANTS[variant] != ("id",):
        lookup = EmbeddingStore.load(need(d / "store.mimt", "build-repcenter"))
    _, res = pl.train_and_evaluate(cfg, prep, variant, lookup)
    update_report(d, ctr={variant: res})
    print(format_metrics(res, f"{variant}."))


def cmd_eval(args, cfg):
    d = run_dir(args, cfg)
    report = json.loads(need(d / "report.json", "train-ctr").read_text())
    ctr = report.get("ctr", {})
    if "base" not in ctr:
        raise MissingArtifact("no base CTR result in report; run 'train-ctr --variant base' first")
    variant_gains = {v: pl.gains(ctr["base"], r) for v, r in sorted(ctr.items()) if v != "base"}
    sections = {"variant_gains": variant_gains}
    if "base+mim" in variant_gains:
        sections["gain"] = variant_gains["base+mim"]
    update_report(d, **sections)
    print(f"{'variant':<12} {'AUC':>8} {'gain':>8}")
    print(f"{'base':<12} {ctr['base']['auc']:>8.4f} {'':>8}")
    for v, g in variant_gains.items():
        print(f"{v:<12} {ctr[v]['auc']:>8.4f} {g['auc']:>+8.4f}")


def format_flops(table: dict) -> str:
    cols = ["encoder_fom", "attention", "deepctr", "lookup", "total"]
    lines = [f"{'variant':<10} {'phase':<9} " + " ".join(f"{c:>14}" for c in cols)]
    for v, rep in table.items():
        for phase in ("train", "inference"):
            lines.append(f"{v:<10} {phase:<9} " + " ".join(f"{rep[phase][c]:>14.6g}" for c in cols))
    return "\n".join(lines)


def cmd_flops(args, cfg):
    table = pl.flop_table(cfg)
    d = run_dir(args, cfg)
    update_report(d, flops=table)
    print(format_flops(table))
    if args.json:
        print(dump_json(table), end="")


def cmd_grad_check(args, cfg):
    results = run_grad_checks(args.cases, cfg.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<18} cases={r.cases} max_rel_err={r.max_rel_error:.3e} "
              f"({r.seconds:.1f}s)")
    bad = [r.name for r in results if not r.passed]
    if bad:
        raise pl.InvariantError(f"gradient check failed for {', '.join(bad)}")


def cmd_pipeline(args, cfg):
    d = run_dir(args, cfg)
    report = pl.run_pipeline(cfg)
    (d / "report.json").write_text(dump_json(report))
    print(f"report -> {d / 'report.json'}")
    print(f"AUC base {report['ctr']['base']['auc']:.4f}  base+mim {report['ctr']['base+mim']['auc']:.4f}  "
          f"gain {report['gain']['auc']:+.4f}")
    for row in report.get("ablations", []):
        print(f"  {row['name']:<22} AUC {row['auc']:.4f}  gain {row['gain']:+.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-dma": cmd_pretrain_dma,
    "train-csft": cmd_train_csft,
    "build-repcenter": cmd_build_repcenter,
    "serve-params": cmd_serve_params,
    "train-ctr": cmd_train_ctr,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "grad-check": cmd_grad_check,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mim", description="Multi-modal content interest modeling pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
        s.add_argument("--out", default="runs", help="root directory for run directories")
        s.add_argument("--seed", type=int, help="override the config seed")
        if name == "serve-params":
            s.add_argument("--bind", help="host:port (default from config)")
            s.add_argument("--store", help="store file (default: the run directory's store.mimt)")
            s.add_argument("--window-count", type=int, help="flush after this many pending writes")
            s.add_argument("--window-ms", type=float, help="flush after the oldest write is this old")
            s.add_argument("--duration", type=float, default=0.0, help="stop after N seconds (0: run until ^C)")
            s.add_argument("--save-on-exit", action="store_true", help="write the store back on shutdown")
        if name == "train-ctr":
            s.add_argument("--variant", choices=sorted(VARIANTS))
        if name == "flops":
            s.add_argument("--json", action="store_true", help="also print the table as JSON")
        if name == "grad-check":
            s.add_argument("--cases", type=int, default=100)
    return p


def fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as e:
        return fail("invalid_config", str(e), EXIT_CONFIG)
    log.info("resolved config (hash %s, seed %d): %s", cfg.config_hash(), cfg.seed,
             json.dumps(cfg.to_dict(), sort_keys=True))
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        return fail("invalid_config", str(e), EXIT_CONFIG)
    except MissingArtifact as e:
        return fail("missing_artifact", str(e), EXIT_MISSING)
    except (pl.InvariantError, NonFiniteError) as e:
        return fail("invariant_breach", str(e), EXIT_INVARIANT)
    return 0


if __name__ == "__main__":
    sys.exit(main())
