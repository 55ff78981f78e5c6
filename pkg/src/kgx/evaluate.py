"""Ground-truth evaluation of an extracted graph against the private region.

The structural matching grows outward from public entities shared by both
sides: a variable is matched to a private entity when an unconsumed extracted
edge and an unconsumed ground fact agree on the already-matched endpoint and
the relation, with compatible categories.  Growth is greedy and first-fit in
sorted order, so results are deterministic; each fact on either side is
consumed at most once, and the resulting counts give precision, recall and an
explicit upper bound on graph edit distance.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attack import ExtractedGraph, is_variable
from .kg import Fact, KgSplit, KnowledgeGraph
from .queries import ConjunctiveQuery, PathQuery

ExtEdge = tuple[str, int, str]  # resolved node, ground relation id, resolved node


@dataclass
class Matching:
    """Injective structural correspondence between extracted and ground graphs."""

    node_pairs: dict[str, int]
    matched_facts: list[tuple[ExtEdge, Fact]]
    consumed_extracted: set[ExtEdge]
    consumed_ground: set[Fact]

    def matched_variables(self) -> dict[str, int]:
        return {n: g for n, g in self.node_pairs.items() if is_variable(n)}

    def check_injective(self) -> None:
        ground_side = list(self.node_pairs.values())
        if len(set(self.node_pairs)) != len(ground_side) or len(set(ground_side)) != len(ground_side):
            raise AssertionError("matching is not injective")
        if len(self.consumed_extracted) != len(self.matched_facts) or len(self.consumed_ground) != len(self.matched_facts):
            raise AssertionError("a fact was consumed more than once")


def _canonical_ext(kg: KnowledgeGraph, u: str, rel: int, v: str) -> ExtEdge:
    inv = kg.relations[rel].inverse
    if inv == rel:
        return (u, rel, v) if u <= v else (v, rel, u)
    return (u, rel, v) if rel < inv else (v, inv, u)


def _extracted_canonical_edges(extracted: ExtractedGraph, kg: KnowledgeGraph) -> tuple[set[ExtEdge], int]:
    """Resolve extracted edges into the ground relation vocabulary.

    Returns the canonical resolvable edge set plus the count of edges whose
    relation the ground graph does not know (they still count as extracted).
    """
    edges: set[ExtEdge] = set()
    unknown = 0
    for u, r_name, v in extracted.edges:
        if not kg.has_relation(r_name):
            unknown += 1
            continue
        edges.add(_canonical_ext(kg, extracted.resolve(u), kg.relation_id(r_name), extracted.resolve(v)))
    return edges, unknown


def grow_matching(extracted: ExtractedGraph, split: KgSplit) -> Matching:
    """Grow the matching from shared public entities along agreeing relations."""
    kg = split.kg
    canonical_ext, _ = _extracted_canonical_edges(extracted, kg)
    # adjacency over both orientations, derived from the canonical sets
    ext_adj: dict[str, list[tuple[int, str, bool]]] = {}
    for u, r, v in sorted(canonical_ext):
        inv = kg.relations[r].inverse
        ext_adj.setdefault(u, []).append((r, v, False))
        ext_adj.setdefault(v, []).append((inv, u, True))
    ground_adj: dict[tuple[int, int], list[int]] = {}
    for s, r, o in sorted(split.private_facts):
        ground_adj.setdefault((s, r), []).append(o)

    node_pairs: dict[str, int] = {}
    ground_matched: set[int] = set()
    consumed_ext: set[ExtEdge] = set()
    consumed_ground: set[Fact] = set()
    matched_facts: list[tuple[ExtEdge, Fact]] = []

    frontier: deque[tuple[str, int]] = deque()
    for name in sorted(n for n in ext_adj if not is_variable(n)):
        if kg.has_entity(name):
            gid = kg.entity_id(name)
            if gid not in split.private_entities:
                node_pairs[name] = gid
                ground_matched.add(gid)
                frontier.append((name, gid))

    def edge_sort_key(item):
        r, other, flipped = item
        # typed variables are considered before wildcard ones
        wildcard = is_variable(other) and extracted.var_category.get(other) is None
        return (wildcard, r, other, flipped)

    while frontier:
        a_node, a_gid = frontier.popleft()
        for r, x_node, _flipped in sorted(ext_adj.get(a_node, ()), key=edge_sort_key):
            ext_can = _canonical_ext(kg, a_node, r, x_node)
            if ext_can in consumed_ext:
                continue
            if x_node in node_pairs:
                y = node_pairs[x_node]
                if (a_gid, r, y) in split.private_facts:
                    g_can = kg.canonical_fact((a_gid, r, y))
                    if g_can not in consumed_ground:
                        consumed_ext.add(ext_can)
                        consumed_ground.add(g_can)
                        matched_facts.append((ext_can, g_can))
                continue
            if not is_variable(x_node):
                continue  # unmatched public name unknown to the ground graph
            want_cat = extracted.var_category.get(x_node)
            for y in ground_adj.get((a_gid, r), ()):
                if y in ground_matched:
                    continue
                if y not in split.private_entities:
                    continue
                if want_cat is not None and kg.categories[kg.category_of(y)] != want_cat:
                    continue
                g_can = kg.canonical_fact((a_gid, r, y))
                if g_can in consumed_ground:
                    continue
                node_pairs[x_node] = y
                ground_matched.add(y)
                consumed_ext.add(ext_can)
                consumed_ground.add(g_can)
                matched_facts.append((ext_can, g_can))
                frontier.append((x_node, y))
                break
    return Matching(node_pairs, matched_facts, consumed_ext, consumed_ground)


@dataclass(frozen=True)
class MetricsReport:
    entity_truth: int
    entity_extracted: int
    entity_matched: int
    entity_precision: float
    entity_recall: float
    fact_truth: int
    fact_extracted: int
    fact_matched: int
    fact_precision: float
    fact_recall: float
    ged_upper_bound: int
    vacuous_precision: bool
    vacuous_recall: bool

    def as_row(self) -> dict:
        return {
            "entity_truth": self.entity_truth,
            "entity_extracted": self.entity_extracted,
            "entity_matched": self.entity_matched,
            "entity_precision": self.entity_precision,
            "entity_recall": self.entity_recall,
            "fact_truth": self.fact_truth,
            "fact_extracted": self.fact_extracted,
            "fact_matched": self.fact_matched,
            "fact_precision": self.fact_precision,
            "fact_recall": self.fact_recall,
            "ged_upper_bound": self.ged_upper_bound,
        }


def _ratio(numerator: int, denominator: int, empty_value: float) -> float:
    return numerator / denominator if denominator else empty_value


def compute_metrics(matching: Matching, extracted: ExtractedGraph, split: KgSplit) -> MetricsReport:
    """Counts, precision/recall, and the matching-induced edit-distance bound.

    The bound counts one edit per unmatched fact on either side plus the
    residual imbalance of unmatched nodes not already touched by a fact edit
    (variables are anonymous, so surviving nodes relabel for free).
    """
    kg = split.kg
    canonical_ext, unknown_rel_edges = _extracted_canonical_edges(extracted, kg)
    n_star_facts = len(canonical_ext) + unknown_rel_edges
    ground_canonical = split.private_canonical_facts()
    n_prv_facts = len(ground_canonical)
    n_matched_facts = len(matching.matched_facts)

    variables = [extracted.resolve(v) for v in extracted.variables()]
    variables = sorted(set(variables), key=lambda v: int(v.split(":")[1]))
    matched_vars = matching.matched_variables()
    n_star_entities = len(variables)
    n_prv_entities = len(split.private_entities)
    n_matched_entities = len(matched_vars)

    unmatched_ext_facts = n_star_facts - n_matched_facts
    unmatched_ground_facts = n_prv_facts - n_matched_facts
    ext_touched: set[str] = set()
    for u, r, v in canonical_ext - matching.consumed_extracted:
        ext_touched.add(u)
        ext_touched.add(v)
    ground_touched: set[int] = set()
    for s, r, o in ground_canonical - matching.consumed_ground:
        ground_touched.add(s)
        ground_touched.add(o)
    idle_ext = sum(1 for v in variables if v not in matched_vars and v not in ext_touched)
    matched_ground = set(matched_vars.values())
    idle_ground = sum(
        1 for e in split.private_entities if e not in matched_ground and e not in ground_touched
    )
    ged_bound = unmatched_ext_facts + unmatched_ground_facts + abs(idle_ext - idle_ground)

    return MetricsReport(
        entity_truth=n_prv_entities,
        entity_extracted=n_star_entities,
        entity_matched=n_matched_entities,
        entity_precision=_ratio(n_matched_entities, n_star_entities, 1.0),
        entity_recall=_ratio(n_matched_entities, n_prv_entities, 1.0),
        fact_truth=n_prv_facts,
        fact_extracted=n_star_facts,
        fact_matched=n_matched_facts,
        fact_precision=_ratio(n_matched_facts, n_star_facts, 1.0),
        fact_recall=_ratio(n_matched_facts, n_prv_facts, 1.0),
        ged_upper_bound=ged_bound,
        vacuous_precision=n_star_entities == 0 or n_star_facts == 0,
        vacuous_recall=n_prv_entities == 0 or n_prv_facts == 0,
    )


def evaluate_extraction(extracted: ExtractedGraph, split: KgSplit) -> MetricsReport:
    matching = grow_matching(extracted, split)
    matching.check_injective()
    return compute_metrics(matching, extracted, split)


# -- distance stratification ---------------------------------------------------


@dataclass(frozen=True)
class DistanceRow:
    hops: str  # "1", "2", "3+", or "inf"
    matched: int
    unmatched: int

    @property
    def total(self) -> int:
        return self.matched + self.unmatched

    @property
    def unmatched_ratio(self) -> float:
        return self.unmatched / self.total if self.total else 0.0


def distance_to_public(split: KgSplit) -> dict[int, int]:
    """Minimum hop count from each private entity to any public entity."""
    kg = split.kg
    dist: dict[int, int] = {}
    queue: deque[int] = deque()
    for ent in kg.entities:
        if ent.id not in split.private_entities:
            dist[ent.id] = 0
            queue.append(ent.id)
    while queue:
        node = queue.popleft()
        for nxt in kg.adjacent_entities(node):
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    return {e: dist.get(e, -1) for e in split.private_entities}


def unmatched_by_distance(split: KgSplit, matching: Matching) -> list[DistanceRow]:
    """Matched/unmatched private entities stratified by distance to public."""
    dist = distance_to_public(split)
    matched_ground = set(matching.matched_variables().values())
    buckets: dict[str, list[int]] = {"1": [], "2": [], "3+": [], "inf": []}
    for e, d in dist.items():
        if d < 0:
            buckets["inf"].append(e)
        elif d == 1:
            buckets["1"].append(e)
        elif d == 2:
            buckets["2"].append(e)
        else:
            buckets["3+"].append(e)
    rows = []
    for label in ("1", "2", "3+", "inf"):
        members = buckets[label]
        if not members:
            continue
        matched = sum(1 for e in members if e in matched_ground)
        rows.append(DistanceRow(label, matched, len(members) - matched))
    return rows


def write_distance_table(rows: Sequence[DistanceRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hops", "matched", "unmatched", "unmatched_ratio"])
        for row in rows:
            writer.writerow([row.hops, row.matched, row.unmatched, f"{row.unmatched_ratio:.6f}"])


# -- reasoning utility -----------------------------------------------------------


@dataclass(frozen=True)
class UtilityReport:
    mrr: float
    hit1: float
    hit5: float
    hit10: float

    def as_row(self) -> dict:
        return {"mrr": self.mrr, "hit1": self.hit1, "hit5": self.hit5, "hit10": self.hit10}


AnswerFn = Callable[[ConjunctiveQuery | PathQuery], Sequence[tuple[int, float | None]]]


def utility_report(answer: AnswerFn, heldout: Iterable[tuple[ConjunctiveQuery | PathQuery, frozenset[int]]]) -> UtilityReport:
    """MRR and HIT@K of an answerer against known truth sets."""
    reciprocal = []
    hits = {1: 0, 5: 0, 10: 0}
    total = 0
    for query, truth in heldout:
        entries = answer(query)
        rank = 0
        for i, (entity, _score) in enumerate(entries, start=1):
            if entity in truth:
                rank = i
                break
        reciprocal.append(1.0 / rank if rank else 0.0)
        for k in hits:
            if 0 < rank <= k:
                hits[k] += 1
        total += 1
    if not total:
        return UtilityReport(0.0, 0.0, 0.0, 0.0)
    return UtilityReport(
        mrr=float(np.mean(reciprocal)),
        hit1=hits[1] / total,
        hit5=hits[5] / total,
        hit10=hits[10] / total,
    )


def sample_utility_queries(
    kg: KnowledgeGraph,
    split: KgSplit,
    n: int,
    rng: np.random.Generator,
) -> list[tuple[PathQuery, frozenset[int]]]:
    """Held-out path queries anchored publicly whose truth includes public answers."""
    from .queries import exact_answer

    facts = sorted(kg.facts)
    out: list[tuple[PathQuery, frozenset[int]]] = []
    attempts = 0
    while len(out) < n and attempts < n * 30:
        attempts += 1
        s, r, o = facts[int(rng.integers(len(facts)))]
        if s in split.private_entities:
            continue
        hops = 1 + int(rng.integers(2))
        seq = [r]
        node = o
        ok = True
        for _ in range(hops - 1):
            adj = kg.out_adjacency(node)
            if not adj:
                ok = False
                break
            rel_ids = sorted(adj)
            r2 = rel_ids[int(rng.integers(len(rel_ids)))]
            node = adj[r2][int(rng.integers(len(adj[r2])))]
            seq.append(r2)
        if not ok:
            continue
        query = PathQuery(s, tuple(seq))
        truth = frozenset(e for e in exact_answer(kg, query) if e not in split.private_entities)
        if truth:
            out.append((query, truth))
    return out
