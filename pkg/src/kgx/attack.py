"""Black-box structure extraction against the reasoning API.

The adversary grows a surrogate public graph by one-hop probing, trains its
own embedding reasoner on it, calibrates a confidence threshold separating
true from false answers, then loops: sample an entity pair (interleaving
random exploration with embedding-space exploitation of previous hits),
suggest candidate relation paths between them, trim off publicly-resolvable
hops, validate the remainder against the API, and record validated paths as
variable chains in the extracted graph.  Periodic consolidation merges
variables of hit pairs that share an endpoint and a common relation prefix or
suffix, confirmed by a conjunctive follow-up query.
"""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .kg import KgBuilder, KgError, KnowledgeGraph
from .model import Adam, EmbeddingModel, TrainConfig, train
from .queries import PathQuery, exact_answer
from .service import KgrService, QuotaExhaustedError

VAR_PREFIX = "var:"

EXTRACTED_FILE = "extracted.tsv"
VARIABLES_FILE = "variables.tsv"
TRANSCRIPT_FILE = "transcript.jsonl"
BUDGET_FILE = "budget.csv"
SUMMARY_FILE = "summary.json"

PHASES = ("bootstrap", "calibration", "validation", "consolidation")


class CalibrationError(RuntimeError):
    """Positive and negative score samples overlap; threshold is unusable."""


class AttackSetupError(ValueError):
    """The attack configuration or prior knowledge is unusable."""


# -- API clients ---------------------------------------------------------------


class ApiClient(Protocol):
    def meta(self) -> dict: ...

    def submit(self, payload: dict) -> dict: ...


class InProcessClient:
    """Direct service access, same wire semantics as HTTP."""

    def __init__(self, service: KgrService, token: str = "attacker"):
        self.service = service
        self.token = token

    def meta(self) -> dict:
        return self.service.meta()

    def submit(self, payload: dict) -> dict:
        return self.service.submit_json(self.token, payload)


class HttpClient:
    """Remote access via POST /v1/query with a session token header."""

    def __init__(self, base_url: str, token: str = "attacker", timeout: float = 30.0):
        import httpx

        self._client = httpx.Client(base_url=base_url, timeout=timeout)
        self.token = token

    def meta(self) -> dict:
        resp = self._client.get("/v1/meta")
        resp.raise_for_status()
        return resp.json()

    def submit(self, payload: dict) -> dict:
        resp = self._client.post("/v1/query", json=payload, headers={"X-Session-Token": self.token})
        if resp.status_code == 429:
            raise QuotaExhaustedError("quota_exhausted")
        resp.raise_for_status()
        return resp.json()


# -- extracted graph -------------------------------------------------------------


def is_variable(node: str) -> bool:
    return node.startswith(VAR_PREFIX)


class ExtractedGraph:
    """Mixed graph of known public entities (by name) and anonymous variables.

    Variables carry a schema-inferred category; merged variables collapse via
    union-find so edges and hit records stay consistent after consolidation.
    Every edge remembers the trace events that produced it.
    """

    def __init__(self) -> None:
        self.var_category: dict[str, str | None] = {}
        self.merged_from: dict[str, set[str]] = {}
        self.edges: set[tuple[str, str, str]] = set()
        self.provenance: dict[tuple[str, str, str], set[int]] = {}
        self._parent: dict[str, str] = {}
        self._next_var = 0

    def new_variable(self, category: str | None) -> str:
        node = f"{VAR_PREFIX}{self._next_var}"
        self._next_var += 1
        self.var_category[node] = category
        self.merged_from[node] = set()
        self._parent[node] = node
        return node

    def resolve(self, node: str) -> str:
        if not is_variable(node):
            return node
        root = node
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[node] != root:
            self._parent[node], node = root, self._parent[node]
        return root

    def add_edge(self, u: str, relation: str, v: str, provenance_id: int) -> None:
        edge = (self.resolve(u), relation, self.resolve(v))
        self.edges.add(edge)
        self.provenance.setdefault(edge, set()).add(provenance_id)

    def merge_variables(self, keep: str, absorb: str) -> None:
        keep, absorb = self.resolve(keep), self.resolve(absorb)
        if keep == absorb:
            return
        self._parent[absorb] = keep
        self.merged_from[keep] |= {absorb} | self.merged_from.pop(absorb, set())
        if self.var_category.get(keep) is None:
            self.var_category[keep] = self.var_category.get(absorb)
        self.var_category.pop(absorb, None)
        rewired: set[tuple[str, str, str]] = set()
        provenance: dict[tuple[str, str, str], set[int]] = {}
        for (u, r, v), prov in self.provenance.items():
            edge = (self.resolve(u), r, self.resolve(v))
            rewired.add(edge)
            provenance.setdefault(edge, set()).update(prov)
        self.edges = rewired
        self.provenance = provenance

    def variables(self) -> tuple[str, ...]:
        return tuple(sorted(self.var_category, key=lambda v: int(v[len(VAR_PREFIX):])))

    def public_nodes(self) -> tuple[str, ...]:
        names = {n for e in self.edges for n in (e[0], e[2]) if not is_variable(n)}
        return tuple(sorted(names))

    def n_variables(self) -> int:
        return len(self.var_category)

    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class PathHit:
    """A validated path believed to traverse the private region."""

    id: int
    anchor: int
    relations: tuple[int, ...]
    target: int
    interior: tuple[str, ...]  # variable node names, anchor side first
    score: float | None


@dataclass(frozen=True)
class AttackConfig:
    budget: int
    surrogate_train: TrainConfig
    alloc: float = 0.5
    explore_fraction: float = 0.5
    paths_per_pair: int = 3
    max_hops: int = 3
    beam_width: int = 8
    # a candidate path completes when the target ranks within this many
    # nearest entities of the projected embedding; the surrogate cannot rank
    # unknown-path targets first, so 1 is usually too strict in practice
    rank_stop: int = 1
    # categories believed private (from probing); when set, suggested paths
    # must cross one of them in their interior
    target_categories: tuple[str, ...] = ()
    validation: str = "score"  # or "bidirectional"
    calibration_samples: int = 1000
    consolidate_every: int = 100
    bootstrap_min_score: float = 0.25
    suggester: str = "beam"  # or "policy"
    policy_episodes: int = 1500
    record_trace: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise AttackSetupError("budget cannot be negative")
        if not 0.0 <= self.alloc <= 1.0:
            raise AttackSetupError("alloc must lie in [0, 1]")
        if not 0.0 <= self.explore_fraction <= 1.0:
            raise AttackSetupError("explore_fraction must lie in [0, 1]")
        if self.validation not in ("score", "bidirectional"):
            raise AttackSetupError(f"unknown validation mode {self.validation!r}")
        if self.suggester not in ("beam", "policy"):
            raise AttackSetupError(f"unknown path suggester {self.suggester!r}")
        if self.max_hops < 2:
            raise AttackSetupError("max_hops must be at least 2")


@dataclass
class ExtractionState:
    """Everything the adversary has accumulated."""

    config: AttackConfig
    surrogate: KnowledgeGraph | None = None
    surrogate_model: EmbeddingModel | None = None
    policy: "PathPolicy | None" = None
    extracted: ExtractedGraph = field(default_factory=ExtractedGraph)
    hit_pool: list[PathHit] = field(default_factory=list)
    threshold: float | None = None
    accounting: dict[str, int] = field(default_factory=lambda: {p: 0 for p in PHASES})
    trace: list[dict] = field(default_factory=list)
    flags: set[str] = field(default_factory=set)
    seen_paths: dict[tuple[int, tuple[int, ...], int], bool] = field(default_factory=dict)
    route_cache: dict = field(default_factory=dict)
    _hit_index: dict[tuple[int, tuple[int, ...], int], int] = field(default_factory=dict)

    def queries_issued(self) -> int:
        return sum(self.accounting.values())

    def note(self, **event) -> None:
        if self.config.record_trace:
            self.trace.append(event)


def _ask(client: ApiClient, state: ExtractionState, phase: str, payload: dict) -> dict:
    response = client.submit(payload)
    state.accounting[phase] += 1
    return response


def _path_payload(sur: KnowledgeGraph, anchor: int, relations: Sequence[int]) -> dict:
    nodes = ["a0"] + [f"v{i}" for i in range(1, len(relations))] + ["t"]
    return {
        "anchors": {"a0": sur.entities[anchor].name},
        "target": "t",
        "edges": [[nodes[i], sur.relations[r].name, nodes[i + 1]] for i, r in enumerate(relations)],
    }


def _answer_scores(response: dict) -> dict[str, float | None]:
    return {item["entity"]: item.get("score") for item in response.get("answers", ())}


# -- bootstrapping ----------------------------------------------------------------


def builder_from_meta(meta: dict) -> KgBuilder:
    builder = KgBuilder()
    for cat in meta["categories"]:
        builder.add_category(cat)
    declared: set[str] = set()
    for rel in meta["relations"]:
        if rel["name"] in declared:
            continue
        builder.add_relation(rel["name"], rel["subject_category"], rel["object_category"], rel["inverse"])
        declared.add(rel["name"])
        declared.add(rel["inverse"])
    return builder


def seed_builder(builder: KgBuilder, prior: KnowledgeGraph | None, seeds: Iterable[tuple[str, str]] | None) -> None:
    """Load the adversary's prior knowledge: a partial public graph or bare seeds."""
    if prior is not None:
        for ent in prior.entities:
            builder.add_entity(ent.name, prior.categories[ent.category])
        for s, r, o in prior.facts:
            builder.add_fact(
                builder.entity_id(prior.entities[s].name),
                builder.relation_id(prior.relations[r].name),
                builder.entity_id(prior.entities[o].name),
            )
    if seeds:
        for name, category in seeds:
            builder.add_entity(name, category)
    if not builder.entities:
        raise AttackSetupError("need a prior public graph or at least one seed entity")


def bootstrap(
    client: ApiClient,
    state: ExtractionState,
    builder: KgBuilder,
    query_limit: int,
    rng: np.random.Generator,
) -> int:
    """Expand the surrogate by one-hop queries until the share or frontier runs out.

    Pairs (entity, relation) already witnessed by a surrogate fact are not
    re-asked, so a fully-known public graph costs zero queries.  Quota
    exhaustion ends expansion early and keeps the partial result.
    """
    rels_by_cat: dict[int, list[int]] = {}
    for rel in builder.relations:
        rels_by_cat.setdefault(rel.subject_category, []).append(rel.id)
    frontier = deque(sorted(e.id for e in builder.entities))
    issued = 0
    while frontier:
        eid = frontier.popleft()
        cat = builder.entities[eid].category
        rel_order = list(rels_by_cat.get(cat, ()))
        rng.shuffle(rel_order)
        for rid in rel_order:
            if builder.has_fact_for(eid, rid):
                continue
            if issued >= query_limit:
                return issued
            rel = builder.relations[rid]
            payload = {
                "anchors": {"a0": builder.entities[eid].name},
                "target": "t",
                "edges": [["a0", rel.name, "t"]],
            }
            try:
                response = _ask(client, state, "bootstrap", payload)
            except QuotaExhaustedError:
                state.flags.add("bootstrap_truncated_by_quota")
                return issued
            issued += 1
            concealed = True
            min_score = state.config.bootstrap_min_score
            if state.threshold is not None and np.isfinite(state.threshold):
                min_score = max(min_score, state.threshold)
            expected_cat = builder.categories[rel.object_category]
            for item in response.get("answers", ()):
                score = item.get("score")
                if score is not None:
                    concealed = False
                    if score < min_score:
                        continue
                name = item["entity"]
                if builder.has_entity(name):
                    known = builder.entities[builder.entity_id(name)]
                    if builder.categories[known.category] != expected_cat:
                        continue  # model hallucination: schema forbids this endpoint
                else:
                    builder.add_entity(name, expected_cat)
                    frontier.append(builder.entity_id(name))
                builder.add_fact(eid, rid, builder.entity_id(name))
            if concealed and response.get("answers"):
                state.flags.add("bootstrap_scores_concealed")
    return issued


# -- threshold calibration ---------------------------------------------------------


def _sample_surrogate_walk(sur: KnowledgeGraph, rng: np.random.Generator, hops: int = 2):
    facts = getattr(sur, "_sorted_facts", None)
    if facts is None:
        facts = sorted(sur.facts)
        sur._sorted_facts = facts  # cache; graph is immutable
    for _ in range(50):
        s, r, o = facts[int(rng.integers(len(facts)))]
        seq = [r]
        node = o
        ok = True
        for _ in range(hops - 1):
            adj = sur.out_adjacency(node)
            if not adj:
                ok = False
                break
            rel_ids = sorted(adj)
            r2 = rel_ids[int(rng.integers(len(rel_ids)))]
            objs = adj[r2]
            node = objs[int(rng.integers(len(objs)))]
            seq.append(r2)
        if ok:
            return s, tuple(seq), node
    return None


def calibrate_threshold(
    client: ApiClient,
    state: ExtractionState,
    n_samples: int,
    rng: np.random.Generator,
    delta: float = 1e-6,
) -> float:
    """Separate true-answer from false-answer scores on surrogate path queries.

    Positives are scores of known-true answers.  Negatives must be known-false
    despite the adversary's partial knowledge, so they come from two clean
    sources: answers retrieved for relation-perturbed queries whose category
    chain is broken (no entity can satisfy them), and response entries whose
    category contradicts the query's target category.  The threshold sits just
    above the highest negative.
    """
    sur = state.surrogate
    assert sur is not None
    positives: list[float] = []
    negatives: list[float] = []
    for _ in range(n_samples):
        sample = _sample_surrogate_walk(sur, rng)
        if sample is None:
            break
        anchor, seq, expected = sample
        response = _ask(client, state, "calibration", _path_payload(sur, anchor, seq))
        scores = _answer_scores(response)
        expected_name = sur.entities[expected].name
        if scores.get(expected_name) is not None:
            positives.append(scores[expected_name])
        target_cat = sur.relations[seq[-1]].object_category
        wrong_cat = sorted(
            s
            for n, s in scores.items()
            if s is not None and sur.has_entity(n) and sur.category_of(sur.entity_id(n)) != target_cat
        )
        negatives.extend(wrong_cat[-2:])
        # break the category chain after the first hop: the perturbed path is
        # unsatisfiable by schema, so whatever comes back is a false answer
        mid_cat = sur.relations[seq[0]].object_category
        options = [r.id for r in sur.relations if r.subject_category != mid_cat]
        if options:
            bad = options[int(rng.integers(len(options)))]
            perturbed = (seq[0], bad)
            response2 = _ask(client, state, "calibration", _path_payload(sur, anchor, perturbed))
            bad_scores = sorted(s for s in _answer_scores(response2).values() if s is not None)
            negatives.extend(bad_scores[-2:])
    if not positives or not negatives:
        raise CalibrationError("no usable calibration scores; is the API concealing scores?")
    if max(negatives) >= max(positives):
        raise CalibrationError(
            "negative scores overlap positives; enlarge the sample or improve the surrogate model"
        )
    state.note(event="calibration", positives=len(positives), negatives=len(negatives),
               max_negative=max(negatives), min_positive=min(positives))
    return max(negatives) + delta


# -- path suggestion -----------------------------------------------------------------


def _relations_by_subject(sur: KnowledgeGraph) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for rel in sur.relations:
        out.setdefault(rel.subject_category, []).append(rel.id)
    return out


def _nearest_entity(model: EmbeddingModel, vec: np.ndarray) -> int:
    dists = np.abs(model.params["ent"] - vec).sum(axis=1)
    return int(np.lexsort((np.arange(model.n_entities), dists))[0])


def _entity_rank(model: EmbeddingModel, vec: np.ndarray, entity: int) -> int:
    """1-based rank of ``entity`` by distance to ``vec``, ties by id."""
    dists = np.abs(model.params["ent"] - vec).sum(axis=1)
    d = dists[entity]
    better = int((dists < d).sum())
    tied = int(((dists == d) & (np.arange(model.n_entities) < entity)).sum())
    return better + tied + 1


def suggest_paths(
    state: ExtractionState,
    v_a: int,
    v_t: int,
    n_paths: int | None = None,
    max_hops: int | None = None,
) -> list[tuple[int, ...]]:
    """Relation sequences from ``v_a`` toward ``v_t``, guided by the surrogate model.

    Beam search scores each extension by the L1 gap between the projected
    embedding and the target; a sequence completes when its projection's
    nearest entity is the target itself (rank-based stop, two-hop minimum).
    """
    cfg = state.config
    n_paths = cfg.paths_per_pair if n_paths is None else n_paths
    max_hops = cfg.max_hops if max_hops is None else max_hops
    if v_a == v_t:
        return []
    if cfg.suggester == "policy" and state.policy is not None:
        return state.policy.suggest(state, v_a, v_t, n_paths, max_hops)
    sur, model = state.surrogate, state.surrogate_model
    assert sur is not None and model is not None
    rels_by_cat = _relations_by_subject(sur)
    wanted_cats = {sur.category_id(c) for c in cfg.target_categories if c in sur.categories}
    if not _category_route_exists(state, sur.category_of(v_a), sur.category_of(v_t), wanted_cats, max_hops):
        return []
    target_vec = model.params["ent"][v_t]
    target_cat = sur.category_of(v_t)
    beam: list[tuple[float, tuple[int, ...], int, np.ndarray]] = [
        (0.0, (), sur.category_of(v_a), model.params["ent"][v_a])
    ]
    found: list[tuple[int, ...]] = []
    for _hop in range(max_hops):
        by_cat: dict[int, list[int]] = {}
        for i, (_score, _seq, cat, _vec) in enumerate(beam):
            by_cat.setdefault(cat, []).append(i)
        candidates: list[tuple[float, tuple[int, ...], int, np.ndarray]] = []
        for cat, idxs in sorted(by_cat.items()):
            stacked = np.stack([beam[i][3] for i in idxs])
            for rid in rels_by_cat.get(cat, ()):
                new_vecs = model.project(rid, stacked)
                gaps = np.abs(new_vecs - target_vec).sum(axis=1)
                obj_cat = sur.relations[rid].object_category
                for row, i in enumerate(idxs):
                    candidates.append((float(gaps[row]), beam[i][1] + (rid,), obj_cat, new_vecs[row]))
        if not candidates:
            break
        candidates.sort(key=lambda c: (c[0], c[1]))
        beam = candidates[: cfg.beam_width]
        for gap, seq, cat, vec in beam:
            interior_ok = not wanted_cats or any(
                sur.relations[r].object_category in wanted_cats for r in seq[:-1]
            )
            if len(seq) >= 2 and cat == target_cat and interior_ok and seq not in found:
                if _entity_rank(model, vec, v_t) <= cfg.rank_stop:
                    found.append(seq)
        if len(found) >= n_paths:
            break
    return found[:n_paths]


def _category_route_exists(
    state: ExtractionState,
    cat_a: int,
    cat_t: int,
    wanted: set[int],
    max_hops: int,
) -> bool:
    """True when the schema admits a 2..max_hops path between the categories
    whose interior crosses one of the wanted categories (when any are set)."""
    key = (cat_a, cat_t, tuple(sorted(wanted)), max_hops)
    cache = state.route_cache
    if key in cache:
        return cache[key]
    sur = state.surrogate
    rels_by_cat = _relations_by_subject(sur)
    # frontier after one hop: (category, interior crossed a wanted category)
    frontier = {
        (sur.relations[rid].object_category, not wanted)
        for rid in rels_by_cat.get(cat_a, ())
    }
    reachable = False
    position = 1
    while position < max_hops:
        if position >= 2 and any(cat == cat_t and crossed for cat, crossed in frontier):
            reachable = True
            break
        nxt: set[tuple[int, bool]] = set()
        for cat, crossed in frontier:
            interior_now = crossed or cat in wanted
            for rid in rels_by_cat.get(cat, ()):
                nxt.add((sur.relations[rid].object_category, interior_now))
        frontier = nxt
        position += 1
    if not reachable:
        reachable = any(cat == cat_t and crossed for cat, crossed in frontier)
    cache[key] = reachable
    return reachable


class PathPolicy:
    """REINFORCE-trained relation chooser over (current, target-current) states."""

    def __init__(self, dim: int, n_relations: int, hidden: int, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(2 * dim)
        self.params = {
            "W1": rng.normal(0.0, scale, size=(hidden, 2 * dim)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_relations, hidden)),
            "b2": np.zeros(n_relations),
        }

    def logits(self, state_vec: np.ndarray, cache: dict | None = None) -> np.ndarray:
        z1 = self.params["W1"] @ state_vec + self.params["b1"]
        h = np.tanh(z1)
        out = self.params["W2"] @ h + self.params["b2"]
        if cache is not None:
            cache.update(state_vec=state_vec, z1=z1, h=h)
        return out

    def grad_log_prob(self, cache: dict, probs: np.ndarray, action: int, valid: np.ndarray) -> dict:
        d_logits = np.zeros(len(probs))
        d_logits[valid] = -probs[valid]
        d_logits[action] += 1.0
        grads = {
            "W2": np.outer(d_logits, cache["h"]),
            "b2": d_logits,
        }
        dh = self.params["W2"].T @ d_logits
        dz1 = dh * (1.0 - np.tanh(cache["z1"]) ** 2)
        grads["W1"] = np.outer(dz1, cache["state_vec"])
        grads["b1"] = dz1
        return grads

    def rollout(
        self,
        sur: KnowledgeGraph,
        model: EmbeddingModel,
        rels_by_cat: dict[int, list[int]],
        v_a: int,
        v_t: int,
        max_hops: int,
        rng: np.random.Generator,
        record=None,
    ) -> tuple[bool, tuple[int, ...]]:
        vec = model.params["ent"][v_a]
        target = model.params["ent"][v_t]
        cat = sur.category_of(v_a)
        seq: list[int] = []
        for _ in range(max_hops):
            valid_ids = rels_by_cat.get(cat, ())
            if not valid_ids:
                return False, tuple(seq)
            valid = np.zeros(sur.n_relations, dtype=bool)
            valid[list(valid_ids)] = True
            cache: dict = {}
            logits = self.logits(np.concatenate([vec, target - vec]), cache)
            masked = np.where(valid, logits, -np.inf)
            masked = masked - masked.max()
            probs = np.exp(masked)
            probs /= probs.sum()
            action = int(rng.choice(sur.n_relations, p=probs))
            if record is not None:
                record.append((cache, probs, action, valid))
            vec = model.project(action, vec[None])[0]
            cat = sur.relations[action].object_category
            seq.append(action)
            if len(seq) >= 2 and _nearest_entity(model, vec) == v_t:
                return True, tuple(seq)
        return False, tuple(seq)

    def suggest(self, state: "ExtractionState", v_a: int, v_t: int, n_paths: int, max_hops: int) -> list[tuple[int, ...]]:
        sur, model = state.surrogate, state.surrogate_model
        rels_by_cat = _relations_by_subject(sur)
        rng = np.random.default_rng((state.config.seed, v_a, v_t))
        found: list[tuple[int, ...]] = []
        for _ in range(n_paths * 8):
            ok, seq = self.rollout(sur, model, rels_by_cat, v_a, v_t, max_hops, rng)
            if ok and seq not in found:
                found.append(seq)
            if len(found) >= n_paths:
                break
        return found


def train_path_policy(
    sur: KnowledgeGraph,
    model: EmbeddingModel,
    episodes: int,
    max_hops: int,
    rng: np.random.Generator,
    lr: float = 0.01,
) -> PathPolicy:
    """Fit the rollout policy on entity pairs connected by real surrogate paths."""
    policy = PathPolicy(model.dim, sur.n_relations, hidden=64, rng=rng)
    optim = Adam(policy.params, lr)
    rels_by_cat = _relations_by_subject(sur)
    baseline = 0.0
    for _ in range(episodes):
        sample = _sample_surrogate_walk(sur, rng, hops=int(rng.integers(2, max_hops + 1)))
        if sample is None:
            break
        v_a, _seq, v_t = sample
        record: list = []
        success, _ = policy.rollout(sur, model, rels_by_cat, v_a, v_t, max_hops, rng, record)
        reward = 1.0 if success else 0.0
        advantage = reward - baseline
        baseline = 0.9 * baseline + 0.1 * reward
        if not record or advantage == 0.0:
            continue
        grads = {k: np.zeros_like(v) for k, v in policy.params.items()}
        for cache, probs, action, valid in record:
            step = policy.grad_log_prob(cache, probs, action, valid)
            for k in grads:
                grads[k] -= advantage * step[k]  # gradient ascent on expected reward
        optim.step(policy.params, grads)
    return policy


# -- pair generation ---------------------------------------------------------------


def _neighbor_from_pool(
    model: EmbeddingModel,
    sur: KnowledgeGraph,
    entity: int,
    rng: np.random.Generator,
    pool: int = 8,
) -> int:
    """A same-category embedding neighbor, sampled from the ``pool`` nearest.

    Strict rank-1 would regenerate the same pair on every exploitation of a
    hit, which goes nowhere at desk scale; a small pool keeps pairs close in
    embedding space while still varying them.
    """
    members = [m for m in sur.category_members(sur.category_of(entity)) if m != entity]
    if not members:
        raise KgError("singleton category")
    member_arr = np.asarray(members, dtype=int)
    vec = model.params["ent"][entity]
    dists = np.abs(model.params["ent"][member_arr] - vec).sum(axis=1)
    order = np.lexsort((member_arr, dists))
    take = min(pool, len(members))
    return int(member_arr[order[int(rng.integers(take))]])


def generate_entity_pair(
    state: ExtractionState,
    mode: str,
    hit: PathHit | None,
    rng: np.random.Generator,
) -> tuple[int, int, str]:
    """An (anchor, target) pair to probe; returns the mode actually used."""
    sur, model = state.surrogate, state.surrogate_model
    assert sur is not None
    if mode == "exploitation":
        if hit is None:
            raise AttackSetupError("exploitation requires a hit query")
        try:
            v_a = _neighbor_from_pool(model, sur, hit.anchor, rng)
            v_t = _neighbor_from_pool(model, sur, hit.target, rng)
            return v_a, v_t, "exploitation"
        except KgError:
            state.note(event="fallback_exploration", reason="singleton_category")
            mode = "exploration"
    n = sur.n_entities
    if n < 2:
        raise AttackSetupError("surrogate graph too small to sample entity pairs")
    v_a = int(rng.integers(n))
    v_t = int(rng.integers(n - 1))
    if v_t >= v_a:
        v_t += 1
    return v_a, v_t, "exploration"


def exploration_schedule(fraction: float, step: int) -> bool:
    """Deterministic interleave: after N steps exactly round(fraction*N) explored."""
    return round(fraction * (step + 1)) > round(fraction * step)


# -- trimming, validation, recording --------------------------------------------------


def trim_path(
    state: ExtractionState,
    v_a: int,
    relations: Sequence[int],
    v_t: int,
) -> tuple[int, tuple[int, ...], int] | None:
    """Strip leading/trailing hops resolvable inside the surrogate, floor two hops.

    Returns None when the whole path already lies in public knowledge, in
    which case probing it cannot reveal anything private.
    """
    sur = state.surrogate
    assert sur is not None
    rels = list(relations)
    if not rels:
        raise AttackSetupError("cannot trim an empty path")
    if v_t in exact_answer(sur, PathQuery(v_a, tuple(rels))):
        return None
    while len(rels) > 2:
        objs = sur.neighbors(v_a, rels[0])
        if not objs:
            break
        v_a = objs[0]
        rels.pop(0)
    while len(rels) > 2:
        subs = sur.neighbors(v_t, sur.inverse(rels[-1]))
        if not subs:
            break
        v_t = subs[0]
        rels.pop()
    if v_t in exact_answer(sur, PathQuery(v_a, tuple(rels))):
        return None
    return v_a, tuple(rels), v_t


def validate_path(
    client: ApiClient,
    state: ExtractionState,
    v_a: int,
    relations: tuple[int, ...],
    v_t: int,
    mode: str | None = None,
    phase: str = "validation",
) -> tuple[bool, float | None]:
    """Check whether the path seems to hold, by score or by reverse agreement."""
    sur = state.surrogate
    mode = state.config.validation if mode is None else mode
    payload = _path_payload(sur, v_a, relations)
    response = _ask(client, state, phase, payload)
    scores = _answer_scores(response)
    target_name = sur.entities[v_t].name
    if target_name not in scores:
        return False, None
    score = scores[target_name]
    if mode == "score":
        if score is None:
            state.flags.add("score_validation_without_scores")
            return False, None
        if state.threshold is None or not np.isfinite(state.threshold):
            return False, score
        return score >= state.threshold, score
    reverse_rels = tuple(sur.inverse(r) for r in reversed(relations))
    reverse_payload = _path_payload(sur, v_t, reverse_rels)
    reverse_response = _ask(client, state, phase, reverse_payload)
    anchor_name = sur.entities[v_a].name
    return anchor_name in _answer_scores(reverse_response), score


def record_hit(
    state: ExtractionState,
    v_a: int,
    relations: tuple[int, ...],
    v_t: int,
    score: float | None,
) -> PathHit:
    """Materialize a validated path as a variable chain; idempotent per path."""
    key = (v_a, relations, v_t)
    if key in state._hit_index:
        return state.hit_pool[state._hit_index[key]]
    sur = state.surrogate
    hit_id = len(state.hit_pool)
    interior = []
    for i in range(len(relations) - 1):
        category = sur.categories[sur.relations[relations[i]].object_category]
        interior.append(state.extracted.new_variable(category))
    nodes = [sur.entities[v_a].name] + interior + [sur.entities[v_t].name]
    for i, rid in enumerate(relations):
        state.extracted.add_edge(nodes[i], sur.relations[rid].name, nodes[i + 1], hit_id)
    hit = PathHit(hit_id, v_a, relations, v_t, tuple(interior), score)
    state.hit_pool.append(hit)
    state._hit_index[key] = hit_id
    state.note(
        event="hit",
        hit_id=hit_id,
        anchor=sur.entities[v_a].name,
        relations=[sur.relations[r].name for r in relations],
        target=sur.entities[v_t].name,
        score=score,
    )
    return hit


# -- consolidation ----------------------------------------------------------------


def _common_suffix(a: Sequence[int], b: Sequence[int]) -> int:
    length = 0
    while (
        length < min(len(a), len(b)) - 1
        and a[len(a) - 1 - length] == b[len(b) - 1 - length]
    ):
        length += 1
    return length


def _common_prefix(a: Sequence[int], b: Sequence[int]) -> int:
    length = 0
    while length < min(len(a), len(b)) - 1 and a[length] == b[length]:
        length += 1
    return length


def consolidate_pair(
    client: ApiClient,
    state: ExtractionState,
    first: PathHit,
    second: PathHit,
) -> bool:
    """Try to merge two hits sharing an endpoint and a common relation run.

    Shared-answer pairs merge their common suffix and are validated by a
    two-anchor conjunctive query; shared-anchor pairs merge their common
    prefix and are validated with anchor and answers role-switched through
    inverse relations.  Variables merge only when the follow-up query
    confirms the target entity.
    """
    if first.id == second.id:
        return False
    sur = state.surrogate
    graph = state.extracted
    if first.target == second.target and first.relations[-1] == second.relations[-1]:
        overlap = _common_suffix(first.relations, second.relations)
        if overlap < 1:
            return False
        pairs = [
            (first.interior[len(first.relations) - 1 - overlap + j],
             second.interior[len(second.relations) - 1 - overlap + j])
            for j in range(overlap)
        ]
        if all(graph.resolve(x) == graph.resolve(y) for x, y in pairs):
            return False  # already merged
        edges = []
        a_rels = first.relations[: len(first.relations) - overlap]
        b_rels = second.relations[: len(second.relations) - overlap]
        suffix = first.relations[len(first.relations) - overlap:]
        nodes_a = ["a0"] + [f"x{i}" for i in range(1, len(a_rels))] + ["m"]
        nodes_b = ["a1"] + [f"y{i}" for i in range(1, len(b_rels))] + ["m"]
        nodes_s = ["m"] + [f"z{i}" for i in range(1, len(suffix))] + ["t"]
        for i, r in enumerate(a_rels):
            edges.append([nodes_a[i], sur.relations[r].name, nodes_a[i + 1]])
        for i, r in enumerate(b_rels):
            edges.append([nodes_b[i], sur.relations[r].name, nodes_b[i + 1]])
        for i, r in enumerate(suffix):
            edges.append([nodes_s[i], sur.relations[r].name, nodes_s[i + 1]])
        payload = {
            "anchors": {"a0": sur.entities[first.anchor].name, "a1": sur.entities[second.anchor].name},
            "target": "t",
            "edges": edges,
        }
        expected = sur.entities[first.target].name
        pattern = "shared_answer"
    elif first.anchor == second.anchor and first.relations[0] == second.relations[0]:
        overlap = _common_prefix(first.relations, second.relations)
        if overlap < 1:
            return False
        pairs = [(first.interior[j], second.interior[j]) for j in range(overlap)]
        if all(graph.resolve(x) == graph.resolve(y) for x, y in pairs):
            return False
        a_tail = tuple(sur.inverse(r) for r in reversed(first.relations[overlap:]))
        b_tail = tuple(sur.inverse(r) for r in reversed(second.relations[overlap:]))
        back = tuple(sur.inverse(r) for r in reversed(first.relations[:overlap]))
        edges = []
        nodes_a = ["a0"] + [f"x{i}" for i in range(1, len(a_tail))] + ["m"]
        nodes_b = ["a1"] + [f"y{i}" for i in range(1, len(b_tail))] + ["m"]
        nodes_s = ["m"] + [f"z{i}" for i in range(1, len(back))] + ["t"]
        for i, r in enumerate(a_tail):
            edges.append([nodes_a[i], sur.relations[r].name, nodes_a[i + 1]])
        for i, r in enumerate(b_tail):
            edges.append([nodes_b[i], sur.relations[r].name, nodes_b[i + 1]])
        for i, r in enumerate(back):
            edges.append([nodes_s[i], sur.relations[r].name, nodes_s[i + 1]])
        payload = {
            "anchors": {"a0": sur.entities[first.target].name, "a1": sur.entities[second.target].name},
            "target": "t",
            "edges": edges,
        }
        expected = sur.entities[first.anchor].name
        pattern = "shared_anchor"
    else:
        state.note(event="merge_skip", first=first.id, second=second.id, reason="not_mergeable")
        return False
    response = _ask(client, state, "consolidation", payload)
    scores = _answer_scores(response)
    confirmed = expected in scores
    if confirmed and state.config.validation == "score" and scores[expected] is not None:
        confirmed = state.threshold is not None and np.isfinite(state.threshold) and scores[expected] >= state.threshold
    if not confirmed:
        state.note(event="merge_reject", first=first.id, second=second.id, pattern=pattern)
        return False
    for x, y in pairs:
        graph.merge_variables(x, y)
    state.note(event="merge", first=first.id, second=second.id, pattern=pattern,
               merged=[[x, y] for x, y in pairs])
    return True


def _consolidation_round(client: ApiClient, state: ExtractionState, attempted: set) -> None:
    by_answer: dict[tuple[int, int], list[PathHit]] = {}
    by_anchor: dict[tuple[int, int], list[PathHit]] = {}
    for hit in state.hit_pool:
        by_answer.setdefault((hit.target, hit.relations[-1]), []).append(hit)
        by_anchor.setdefault((hit.anchor, hit.relations[0]), []).append(hit)
    for groups, pattern in ((by_answer, "i"), (by_anchor, "ii")):
        for key in sorted(groups):
            hits = groups[key]
            for i in range(len(hits)):
                for j in range(i + 1, len(hits)):
                    pair_key = (pattern, hits[i].id, hits[j].id)
                    if pair_key in attempted:
                        continue
                    attempted.add(pair_key)
                    consolidate_pair(client, state, hits[i], hits[j])


# -- the full loop -----------------------------------------------------------------


def run_attack(
    client: ApiClient,
    cfg: AttackConfig,
    prior_public: KnowledgeGraph | None = None,
    seeds: Iterable[tuple[str, str]] | None = None,
) -> ExtractionState:
    """Execute the complete extraction pipeline until the budget runs out."""
    state = ExtractionState(config=cfg)
    if cfg.budget <= 0:
        state.flags.add("zero_budget")
        return state
    rng = np.random.default_rng(cfg.seed)
    builder = builder_from_meta(client.meta())
    seed_builder(builder, prior_public, seeds)

    def calibrate() -> None:
        try:
            state.threshold = calibrate_threshold(client, state, cfg.calibration_samples, rng)
        except CalibrationError as exc:
            state.threshold = float("inf")
            state.flags.add("calibration_degenerate")
            state.note(event="calibration_failed", reason=str(exc))

    try:
        # calibrating before expansion lets bootstrap admit answers at the
        # attack's own confidence threshold instead of a blind default
        if cfg.validation == "score" and len(builder.facts) >= 100:
            state.surrogate = builder.build()
            calibrate()
        boot_limit = int(round(cfg.budget * cfg.alloc))
        bootstrap(client, state, builder, boot_limit, rng)
        state.surrogate = builder.build()
        if not state.surrogate.facts:
            state.flags.add("no_public_knowledge")
            return state
        state.surrogate_model = train(state.surrogate, cfg.surrogate_train)
        if cfg.suggester == "policy":
            state.policy = train_path_policy(
                state.surrogate, state.surrogate_model, cfg.policy_episodes, cfg.max_hops, rng
            )
        if cfg.validation == "score" and state.threshold is None:
            calibrate()
    except QuotaExhaustedError:
        state.flags.add("quota_during_setup")
        if state.surrogate is None:
            state.surrogate = builder.build()
        return state
    attempted_merges: set = set()
    seen_pairs: set[tuple[int, int]] = set()
    hits_since_round = 0
    pair_step = 0
    idle = 0
    try:
        while state.queries_issued() < cfg.budget and idle < 5000:
            intended = "exploration" if exploration_schedule(cfg.explore_fraction, pair_step) else "exploitation"
            pair_step += 1
            hit = None
            if intended == "exploitation":
                if state.hit_pool:
                    hit = state.hit_pool[int(rng.integers(len(state.hit_pool)))]
                else:
                    intended = "exploration"
            v_a, v_t, _used = generate_entity_pair(state, intended, hit, rng)
            issued_before = state.queries_issued()
            if (v_a, v_t) not in seen_pairs:
                seen_pairs.add((v_a, v_t))
                for rels in suggest_paths(state, v_a, v_t):
                    trimmed = trim_path(state, v_a, rels, v_t)
                    if trimmed is None:
                        continue
                    t_a, t_rels, t_t = trimmed
                    key = (t_a, t_rels, t_t)
                    if key in state.seen_paths:
                        continue
                    ok, score = validate_path(client, state, t_a, t_rels, t_t)
                    state.seen_paths[key] = ok
                    if ok:
                        record_hit(state, t_a, t_rels, t_t, score)
                        hits_since_round += 1
            if hits_since_round >= cfg.consolidate_every:
                _consolidation_round(client, state, attempted_merges)
                hits_since_round = 0
            idle = idle + 1 if state.queries_issued() == issued_before else 0
    except QuotaExhaustedError:
        state.flags.add("budget_exhausted")
    if idle >= 5000:
        state.flags.add("stalled")
    if hits_since_round and state.queries_issued() < cfg.budget:
        try:
            _consolidation_round(client, state, attempted_merges)
        except QuotaExhaustedError:
            state.flags.add("budget_exhausted")
    return state


# -- persistence --------------------------------------------------------------------


def write_extraction(state: ExtractionState, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    graph = state.extracted
    with open(d / EXTRACTED_FILE, "w", encoding="utf-8") as fh:
        for u, r, v in sorted(graph.edges):
            fh.write(f"{u}\t{r}\t{v}\n")
    with open(d / VARIABLES_FILE, "w", encoding="utf-8") as fh:
        for var in graph.variables():
            fh.write(f"{var}\t{graph.var_category.get(var) or '*'}\n")
    with open(d / TRANSCRIPT_FILE, "w", encoding="utf-8") as fh:
        for event in state.trace:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    with open(d / BUDGET_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "queries"])
        for phase in PHASES:
            writer.writerow([phase, state.accounting[phase]])
        writer.writerow(["total", state.queries_issued()])
    summary = {
        "threshold": state.threshold,
        "flags": sorted(state.flags),
        "hits": len(state.hit_pool),
        "variables": graph.n_variables(),
        "edges": graph.n_edges(),
    }
    with open(d / SUMMARY_FILE, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_extracted(directory: str | Path) -> ExtractedGraph:
    d = Path(directory)
    graph = ExtractedGraph()
    with open(d / VARIABLES_FILE, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            var, category = line.split("\t")
            index = int(var[len(VAR_PREFIX):])
            graph.var_category[var] = None if category == "*" else category
            graph.merged_from[var] = set()
            graph._parent[var] = var
            graph._next_var = max(graph._next_var, index + 1)
    with open(d / EXTRACTED_FILE, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            u, r, v = line.split("\t")
            graph.add_edge(u, r, v, -1 - i)
    return graph
