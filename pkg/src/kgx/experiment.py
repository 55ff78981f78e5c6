"""Reproducible experiments: config files, the end-to-end pipeline, sweeps.

An experiment config is a flat key=value file with sections (parsed with
``configparser``, unknown sections or keys rejected).  The end-to-end run
generates or loads a graph, splits it, trains the victim, serves it behind a
defense policy, runs the extraction attack in-process, evaluates the result
against ground truth, and writes CSV reports plus a manifest.  Everything is
derived from one seed, so a repeated run produces byte-identical outputs.
"""
from __future__ import annotations

import concurrent.futures
import configparser
import csv
import hashlib
import json
import platform
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import __version__
from .attack import AttackConfig, ExtractionState, InProcessClient, run_attack, write_extraction
from .evaluate import (
    MetricsReport,
    evaluate_extraction,
    grow_matching,
    sample_utility_queries,
    unmatched_by_distance,
    utility_report,
    write_distance_table,
)
from .kg import (
    KgBuilder,
    KgError,
    KgSplit,
    KnowledgeGraph,
    desk_generator_spec,
    load_generator_spec,
    load_kg_dir,
    save_kg,
    split_private,
    synth_kg,
)
from .model import TrainConfig, train
from .service import DefensePolicy, KgrService, ModelBackend

PRIVATE_ENTITIES_FILE = "private_entities.tsv"
PRIVATE_FACTS_FILE = "private_facts.tsv"


class ConfigError(ValueError):
    """Bad experiment configuration; maps to exit status 2."""


# section -> key -> (parser, default)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {"seed": (int, 7)},
    "kg": {"source": (str, "desk"), "spec": (str, ""), "dir": (str, ""), "scale": (float, 1.0)},
    "split": {"category": (str, "threat"), "mode": (str, "connected"), "size": (int, 200)},
    "train": {
        "preset": (str, "desk"),
        "epochs": (int, 0),
        "dim": (int, 0),
        "depth": (int, 0),
        "n_queries": (int, 0),
    },
    "policy": {
        "top_k": (int, 10),
        "reveal_scores": (bool, True),
        "shuffle": (bool, False),
        "epsilon": (float, 0.0),  # 0 disables noise
    },
    "attack": {
        "budget": (int, 12000),
        "alloc": (float, 0.5),
        "explore_fraction": (float, 0.5),
        "paths_per_pair": (int, 3),
        "max_hops": (int, 3),
        "beam_width": (int, 8),
        "rank_stop": (int, 40),
        "focus_private_category": (bool, True),
        "validation": (str, "score"),
        "calibration_samples": (int, 200),
        "consolidation": (bool, True),
        "consolidate_every": (int, 100),
        "bootstrap_min_score": (float, 0.25),
        "surrogate_ratio": (float, 0.5),
        "seed_count": (int, 100),
        "surrogate_epochs": (int, 0),
        "suggester": (str, "beam"),
        "record_trace": (bool, True),
    },
    "eval": {"utility_queries": (int, 300)},
    "sweep": {
        "axis": (str, ""),
        "values": (str, ""),
        "seeds": (str, "1"),
        "jobs": (int, 1),
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, value: str):
    parser, default = _SCHEMA[section][key]
    value = value.strip()
    if parser is bool:
        low = value.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {value!r}")
    try:
        return parser(value) if value != "" else default
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {value!r}") from None


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    source_text: str = ""

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, dotted_key: str, raw_value: str) -> None:
        if "." not in dotted_key:
            raise ConfigError(f"axis key must look like section.key, got {dotted_key!r}")
        section, key = dotted_key.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = _coerce(section, key, raw_value)

    def digest(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()

    @staticmethod
    def defaults() -> "ExperimentConfig":
        return ExperimentConfig(
            {s: {k: v for k, (_, v) in keys.items()} for s, keys in _SCHEMA.items()}
        )

    @staticmethod
    def load(path: str | Path) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep case
        text = Path(path).read_text(encoding="utf-8")
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = ExperimentConfig.defaults()
        cfg.source_text = text
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                cfg.values[section][key] = _coerce(section, key, raw)
        base = Path(path).parent
        for section, key in (("kg", "spec"), ("kg", "dir")):
            value = cfg.values[section][key]
            if value:
                resolved = (base / value).resolve() if not Path(value).is_absolute() else Path(value)
                if not resolved.exists():
                    raise ConfigError(f"{path}: [{section}] {key} references missing {resolved}")
                cfg.values[section][key] = str(resolved)
        return cfg


# -- split persistence ---------------------------------------------------------


def save_split(split: KgSplit, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_kg(split.kg, d / "full")
    save_kg(split.public_kg, d / "public")
    kg = split.kg
    with open(d / PRIVATE_ENTITIES_FILE, "w", encoding="utf-8") as fh:
        for e in sorted(split.private_entities):
            fh.write(f"{kg.entities[e].name}\t{kg.categories[kg.category_of(e)]}\n")
    with open(d / PRIVATE_FACTS_FILE, "w", encoding="utf-8") as fh:
        for s, r, o in sorted(split.private_canonical_facts()):
            fh.write(f"{kg.entities[s].name}\t{kg.relations[r].name}\t{kg.entities[o].name}\n")


def load_split(directory: str | Path) -> KgSplit:
    d = Path(directory)
    kg = load_kg_dir(d / "full")
    public = load_kg_dir(d / "public")
    private: set[int] = set()
    with open(d / PRIVATE_ENTITIES_FILE, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                name = line.split("\t")[0]
                private.add(kg.entity_id(name))
    facts = frozenset(f for f in kg.facts if f[0] in private or f[2] in private)
    return KgSplit(kg=kg, public_kg=public, private_entities=frozenset(private), private_facts=facts)


# -- prior knowledge ------------------------------------------------------------


def sample_prior_surrogate(public: KnowledgeGraph, ratio: float, seed: int) -> KnowledgeGraph:
    """The adversary's head start: a uniform fraction of public facts."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("surrogate_ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    canonical = sorted(public.canonical_facts())
    keep_n = int(round(ratio * len(canonical)))
    keep_idx = sorted(int(i) for i in rng.choice(len(canonical), size=keep_n, replace=False)) if keep_n else []
    builder = KgBuilder()
    for cat in public.categories:
        builder.add_category(cat)
    declared: set[int] = set()
    for rel in public.relations:
        if rel.id in declared:
            continue
        builder.add_relation(
            rel.name,
            public.categories[rel.subject_category],
            public.categories[rel.object_category],
            public.relations[rel.inverse].name,
        )
        declared.update((rel.id, rel.inverse))
    for i in keep_idx:
        s, r, o = canonical[i]
        s_id = builder.add_entity(public.entities[s].name, public.categories[public.category_of(s)])
        o_id = builder.add_entity(public.entities[o].name, public.categories[public.category_of(o)])
        builder.add_fact(s_id, builder.relation_id(public.relations[r].name), o_id)
    return builder.build()


def sample_seed_entities(public: KnowledgeGraph, count: int, seed: int) -> list[tuple[str, str]]:
    rng = np.random.default_rng(seed)
    count = min(count, public.n_entities)
    picks = sorted(int(i) for i in rng.choice(public.n_entities, size=count, replace=False))
    return [(public.entities[i].name, public.categories[public.category_of(i)]) for i in picks]


# -- the end-to-end pipeline ------------------------------------------------------


def build_kg(cfg: ExperimentConfig) -> KnowledgeGraph:
    source = cfg["kg"]["source"]
    if source == "desk":
        return synth_kg(desk_generator_spec(cfg["kg"]["scale"]), cfg["experiment"]["seed"])
    if source == "spec":
        if not cfg["kg"]["spec"]:
            raise ConfigError("[kg] source=spec needs spec=<file>")
        return synth_kg(load_generator_spec(cfg["kg"]["spec"]), cfg["experiment"]["seed"])
    if source == "dir":
        if not cfg["kg"]["dir"]:
            raise ConfigError("[kg] source=dir needs dir=<path>")
        return load_kg_dir(cfg["kg"]["dir"])
    raise ConfigError(f"unknown kg source {source!r}")


def build_train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    preset = cfg["train"]["preset"]
    if preset == "desk":
        base = TrainConfig.desk(seed=seed)
    elif preset == "paper":
        base = TrainConfig.paper(seed=seed)
    else:
        raise ConfigError(f"unknown train preset {preset!r}")
    overrides = {}
    for key in ("epochs", "dim", "depth", "n_queries"):
        if cfg["train"][key]:
            overrides[key] = cfg["train"][key]
    return replace(base, **overrides) if overrides else base


def build_policy(cfg: ExperimentConfig) -> DefensePolicy:
    eps = cfg["policy"]["epsilon"]
    try:
        return DefensePolicy(
            top_k=cfg["policy"]["top_k"],
            reveal_scores=cfg["policy"]["reveal_scores"],
            shuffle_ranking=cfg["policy"]["shuffle"],
            laplace_epsilon=eps if eps > 0 else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_attack_config(cfg: ExperimentConfig, seed: int) -> AttackConfig:
    a = cfg["attack"]
    surrogate_train = TrainConfig.surrogate(seed=seed + 4)
    if a["surrogate_epochs"]:
        surrogate_train = replace(surrogate_train, epochs=a["surrogate_epochs"])
    consolidate_every = a["consolidate_every"] if a["consolidation"] else a["budget"] + 1
    targets = (cfg["split"]["category"],) if a["focus_private_category"] else ()
    try:
        return AttackConfig(
            budget=a["budget"],
            surrogate_train=surrogate_train,
            alloc=a["alloc"],
            explore_fraction=a["explore_fraction"],
            paths_per_pair=a["paths_per_pair"],
            max_hops=a["max_hops"],
            beam_width=a["beam_width"],
            rank_stop=a["rank_stop"],
            target_categories=targets,
            validation=a["validation"],
            calibration_samples=a["calibration_samples"],
            consolidate_every=consolidate_every,
            bootstrap_min_score=a["bootstrap_min_score"],
            suggester=a["suggester"],
            record_trace=a["record_trace"],
            seed=seed + 4,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ExperimentResult:
    kg: KnowledgeGraph
    split: KgSplit
    service: KgrService
    state: ExtractionState
    metrics: MetricsReport
    utility: Any
    row: dict


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Generate, split, train, serve, attack, evaluate; optionally write artifacts."""
    seed = cfg["experiment"]["seed"]
    kg = build_kg(cfg)
    split = split_private(
        kg, cfg["split"]["category"], cfg["split"]["mode"], cfg["split"]["size"], seed + 1
    )
    victim = train(kg, build_train_config(cfg, seed + 2))
    policy = build_policy(cfg)
    budget = cfg["attack"]["budget"]
    service = KgrService(
        kg,
        split,
        ModelBackend(victim),
        policy,
        budget_per_session=max(budget, cfg["eval"]["utility_queries"] + 1),
        seed=seed + 6,
    )
    ratio = cfg["attack"]["surrogate_ratio"]
    prior = sample_prior_surrogate(split.public_kg, ratio, seed + 3) if ratio > 0 else None
    seeds = None
    if prior is None:
        seeds = sample_seed_entities(split.public_kg, cfg["attack"]["seed_count"], seed + 3)
    client = InProcessClient(service, token="attacker")
    state = run_attack(client, build_attack_config(cfg, seed), prior_public=prior, seeds=seeds)
    matching = grow_matching(state.extracted, split)
    matching.check_injective()
    from .evaluate import compute_metrics

    metrics = compute_metrics(matching, state.extracted, split)
    rng_util = np.random.default_rng(seed + 5)
    heldout = sample_utility_queries(kg, split, cfg["eval"]["utility_queries"], rng_util)
    answer = lambda q: service.submit_query("utility", q).entries
    utility = utility_report(answer, heldout)
    row = dict(metrics.as_row())
    row.update(utility.as_row())
    row["queries_issued"] = state.queries_issued()
    row["service_issued"] = service.budget_issued("attacker")
    row["hits"] = len(state.hit_pool)
    row["flags"] = "|".join(sorted(state.flags))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_extraction(state, out / "extraction")
        write_metrics_csv([row], out / "metrics.csv")
        write_distance_table(unmatched_by_distance(split, matching), out / "distance.csv")
        write_manifest(cfg, out)
    return ExperimentResult(kg, split, service, state, metrics, utility, row)


_METRIC_COLUMNS = [
    "entity_truth",
    "entity_extracted",
    "entity_matched",
    "entity_precision",
    "entity_recall",
    "fact_truth",
    "fact_extracted",
    "fact_matched",
    "fact_precision",
    "fact_recall",
    "ged_upper_bound",
    "mrr",
    "hit1",
    "hit5",
    "hit10",
    "queries_issued",
    "service_issued",
    "hits",
    "flags",
]


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_metrics_csv(rows: Iterable[dict], path: str | Path, extra_columns: list[str] | None = None) -> None:
    columns = (extra_columns or []) + _METRIC_COLUMNS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c, "")) for c in columns])


def write_manifest(cfg: ExperimentConfig, out_dir: Path) -> None:
    manifest = {
        "config_sha256": cfg.digest(),
        "seed": cfg["experiment"]["seed"],
        "kgx_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- sweeps ------------------------------------------------------------------------


def _sweep_task(args: tuple) -> dict:
    values_dict, axis, value, seed = args
    cfg = ExperimentConfig({s: dict(kv) for s, kv in values_dict.items()})
    cfg.set(axis, value)
    cfg.values["experiment"]["seed"] = seed
    row: dict = {"axis": axis, "value": value, "seed": seed}
    try:
        result = run_experiment(cfg, out_dir=None)
        row.update(result.row)
        row["status"] = "ok"
    except Exception as exc:  # a failed grid point must not sink the sweep
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def run_sweep(plan: ExperimentConfig, out_dir: str | Path) -> list[dict]:
    """One attack run per (axis value, seed) grid point, plus aggregates."""
    axis = plan["sweep"]["axis"]
    if not axis:
        raise ConfigError("[sweep] axis is required")
    values = [v.strip() for v in plan["sweep"]["values"].split(",") if v.strip()]
    if not values:
        raise ConfigError("[sweep] values is required")
    seeds = [int(s) for s in plan["sweep"]["seeds"].split(",") if s.strip()]
    jobs = plan["sweep"]["jobs"]
    tasks = [(plan.values, axis, value, seed) for value in values for seed in seeds]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_task, tasks))
    else:
        rows = [_sweep_task(t) for t in tasks]
    rows.sort(key=lambda r: (str(r["value"]), r["seed"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "runs.csv", extra_columns=["axis", "value", "seed", "status"])
    summary_rows = []
    for value in values:
        group = [r for r in rows if r["value"] == value and r.get("status") == "ok"]
        summary: dict = {"axis": axis, "value": value, "runs": len(group)}
        for metric in ("entity_precision", "entity_recall", "fact_precision", "fact_recall", "mrr"):
            data = [r[metric] for r in group if metric in r]
            summary[f"{metric}_mean"] = float(np.mean(data)) if data else float("nan")
            summary[f"{metric}_std"] = float(np.std(data)) if len(data) > 1 else 0.0
        summary_rows.append(summary)
    summary_columns = ["axis", "value", "runs"] + [
        f"{m}_{agg}"
        for m in ("entity_precision", "entity_recall", "fact_precision", "fact_recall", "mrr")
        for agg in ("mean", "std")
    ]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(summary_columns)
        for row in summary_rows:
            writer.writerow([_format_cell(row.get(c, "")) for c in summary_columns])
    write_manifest(plan, out)
    return rows
