"""Command-line orchestration: gen, split, train, serve, attack, eval, sweep, e2e."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attack import HttpClient, InProcessClient, run_attack, write_extraction, load_extracted
from .evaluate import evaluate_extraction, grow_matching, unmatched_by_distance, write_distance_table
from .experiment import (
    ConfigError,
    ExperimentConfig,
    build_attack_config,
    build_policy,
    build_train_config,
    load_split,
    run_experiment,
    run_sweep,
    sample_prior_surrogate,
    sample_seed_entities,
    save_split,
    write_manifest,
    write_metrics_csv,
)
from .kg import KgError, desk_generator_spec, load_generator_spec, load_kg_dir, save_kg, split_private, synth_kg
from .model import TrainConfig, load_model, save_model, train
from .service import DefensePolicy, KgrService, ModelBackend, create_app

log = logging.getLogger("kgx")


def _setup_logging() -> None:
    level = os.environ.get("KGX_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic graph")
    p.add_argument("--spec", help="generator spec file; omit for the built-in desk shape")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="carve a private sub-graph")
    p.add_argument("--kg", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--mode", choices=["connected", "scattered"], default="connected")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the embedding reasoner")
    p.add_argument("--kg", required=True)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="serve the reasoning API over HTTP")
    p.add_argument("--kg", required=True, help="graph directory (full graph)")
    p.add_argument("--split", help="split directory; omit to serve without a private region")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--policy", help="policy config file ([policy] section)")
    p.add_argument("--budget", type=int, default=500_000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("attack", help="run the extraction attack")
    p.add_argument("--api", help="base URL of a remote API; omit for in-process")
    p.add_argument("--kg", help="graph directory (in-process mode)")
    p.add_argument("--split", help="split directory (in-process mode)")
    p.add_argument("--model", help="model checkpoint (in-process mode)")
    p.add_argument("--config", help="experiment config supplying [attack]/[policy] sections")
    p.add_argument("--budget", type=int)
    p.add_argument("--alloc", type=float)
    p.add_argument("--explore", type=float)
    p.add_argument("--validation", choices=["score", "bidirectional"])
    p.add_argument("--seeds", help="seed entity file (name<TAB>category) for zero-knowledge start")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate an extraction against ground truth")
    p.add_argument("--extracted", required=True)
    p.add_argument("--truth", required=True, help="split directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run a factor sweep from a plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("e2e", help="full pipeline in one process")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override [experiment] seed")
    p.add_argument("--out", required=True)
    return parser


def _cmd_gen(args) -> int:
    spec = load_generator_spec(args.spec) if args.spec else desk_generator_spec(args.scale)
    kg = synth_kg(spec, args.seed)
    save_kg(kg, args.out)
    log.info("wrote %d entities, %d facts to %s", kg.n_entities, kg.n_facts, args.out)
    return 0


def _cmd_split(args) -> int:
    kg = load_kg_dir(args.kg)
    split = split_private(kg, args.category, args.mode, args.size, args.seed)
    save_split(split, args.out)
    log.info(
        "private region: %d entities, %d facts", len(split.private_entities), len(split.private_facts)
    )
    return 0


def _cmd_train(args) -> int:
    kg = load_kg_dir(args.kg)
    cfg = TrainConfig.desk(seed=args.seed) if args.preset == "desk" else TrainConfig.paper(seed=args.seed)
    if args.epochs:
        from dataclasses import replace

        cfg = replace(cfg, epochs=args.epochs)
    model = train(kg, cfg)
    save_model(model, args.out)
    log.info("final loss %.4f, checkpoint at %s", model.loss_trace[-1] if model.loss_trace else float("nan"), args.out)
    return 0


def _load_policy_file(path: str | None) -> DefensePolicy:
    if not path:
        return DefensePolicy()
    cfg = ExperimentConfig.load(path)
    return build_policy(cfg)


def _cmd_serve(args) -> int:
    import uvicorn

    kg = load_kg_dir(args.kg)
    split = load_split(args.split) if args.split else None
    model = load_model(args.model)
    policy = _load_policy_file(args.policy)
    service = KgrService(kg, split, ModelBackend(model), policy, budget_per_session=args.budget, seed=args.seed)
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_attack(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.defaults()
    if args.budget is not None:
        cfg.values["attack"]["budget"] = args.budget
    if args.alloc is not None:
        cfg.values["attack"]["alloc"] = args.alloc
    if args.explore is not None:
        cfg.values["attack"]["explore_fraction"] = args.explore
    if args.validation:
        cfg.values["attack"]["validation"] = args.validation
    cfg.values["experiment"]["seed"] = args.seed
    attack_cfg = build_attack_config(cfg, args.seed)
    if args.api:
        client = HttpClient(args.api)
        prior = None
        seeds = _read_seeds(args.seeds) if args.seeds else None
        if seeds is None:
            raise ConfigError("remote attacks need --seeds (no local public graph available)")
    else:
        if not (args.kg and args.split and args.model):
            raise ConfigError("in-process attack needs --kg, --split and --model")
        kg = load_kg_dir(args.kg)
        split = load_split(args.split)
        model = load_model(args.model)
        policy = _load_policy_file(None)
        service = KgrService(kg, split, ModelBackend(model), policy, budget_per_session=attack_cfg.budget, seed=args.seed)
        client = InProcessClient(service)
        ratio = cfg.values["attack"]["surrogate_ratio"]
        prior = sample_prior_surrogate(split.public_kg, ratio, args.seed + 3) if ratio > 0 else None
        seeds = None
        if prior is None:
            seeds = sample_seed_entities(split.public_kg, cfg.values["attack"]["seed_count"], args.seed + 3)
    state = run_attack(client, attack_cfg, prior_public=prior, seeds=seeds)
    write_extraction(state, args.out)
    log.info("extracted %d variables, %d edges", state.extracted.n_variables(), state.extracted.n_edges())
    return 0


def _read_seeds(path: str) -> list[tuple[str, str]]:
    seeds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                name, category = line.split("\t")
                seeds.append((name, category))
    return seeds


def _cmd_eval(args) -> int:
    extracted = load_extracted(args.extracted)
    split = load_split(args.truth)
    matching = grow_matching(extracted, split)
    matching.check_injective()
    from .evaluate import compute_metrics

    metrics = compute_metrics(matching, extracted, split)
    write_metrics_csv([metrics.as_row()], args.out)
    distance_path = Path(args.out).with_name(Path(args.out).stem + "_distance.csv")
    write_distance_table(unmatched_by_distance(split, matching), distance_path)
    log.info(
        "entity precision %.4f recall %.4f; fact precision %.4f recall %.4f",
        metrics.entity_precision,
        metrics.entity_recall,
        metrics.fact_precision,
        metrics.fact_recall,
    )
    return 0


def _cmd_sweep(args) -> int:
    plan = ExperimentConfig.load(args.plan)
    run_sweep(plan, args.out)
    return 0


def _cmd_e2e(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.values["experiment"]["seed"] = args.seed
    run_experiment(cfg, out_dir=args.out)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "split": _cmd_split,
    "train": _cmd_train,
    "serve": _cmd_serve,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "e2e": _cmd_e2e,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, KgError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
