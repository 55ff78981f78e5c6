"""Conjunctive queries and the exact set-propagation reasoner.

Queries are existential-and-conjunctive: known anchor entities constrain a
DAG of relation edges that sinks at one target node.  The exact reasoner
answers them over the full graph by propagating candidate sets in topological
order, intersecting at merge nodes.  Queries are restricted to in-trees
(every non-target node has exactly one outgoing edge), the shape for which
set propagation coincides with brute-force assignment enumeration.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Mapping

from .kg import KgError, KnowledgeGraph


class QueryStructureError(ValueError):
    """The query graph is not a well-formed anchored in-tree."""


@dataclass(frozen=True)
class ConjunctiveQuery:
    """An anchored relational constraint tree asking for bindings of ``target``.

    ``anchors`` maps node names to entity ids; ``edges`` holds
    ``(node, relation id, node)`` constraints.  Non-anchor nodes are
    existential variables except the designated ``target``.
    """

    anchors: tuple[tuple[str, int], ...]
    target: str
    edges: tuple[tuple[str, int, str], ...]

    @staticmethod
    def make(anchors: Mapping[str, int], target: str, edges: Iterable[tuple[str, int, str]]) -> "ConjunctiveQuery":
        q = ConjunctiveQuery(tuple(sorted(anchors.items())), target, tuple(edges))
        q.validate_structure()
        return q

    @property
    def anchor_map(self) -> dict[str, int]:
        return dict(self.anchors)

    def nodes(self) -> set[str]:
        out = {name for name, _ in self.anchors} | {self.target}
        for u, _, v in self.edges:
            out.add(u)
            out.add(v)
        return out

    def variables(self) -> set[str]:
        return self.nodes() - {name for name, _ in self.anchors} - {self.target}

    def validate_structure(self) -> None:
        anchor_names = {name for name, _ in self.anchors}
        if not anchor_names:
            raise QueryStructureError("query needs at least one anchor")
        if len(anchor_names) != len(self.anchors):
            raise QueryStructureError("duplicate anchor node")
        if not self.edges:
            if self.target not in anchor_names:
                raise QueryStructureError("edgeless query must target an anchor")
            return
        if self.target in anchor_names:
            raise QueryStructureError("target of a non-trivial query cannot be an anchor")
        out_deg: dict[str, int] = {}
        in_deg: dict[str, int] = {}
        preds: dict[str, set[str]] = {}
        for u, _, v in self.edges:
            out_deg[u] = out_deg.get(u, 0) + 1
            in_deg[v] = in_deg.get(v, 0) + 1
            preds.setdefault(v, set()).add(u)
        try:
            TopologicalSorter(preds).static_order()
        except CycleError:
            raise QueryStructureError("query edges form a cycle") from None
        for name in anchor_names:
            if in_deg.get(name):
                raise QueryStructureError(f"anchor {name!r} has incoming edges")
        if out_deg.get(self.target):
            raise QueryStructureError("target must not have outgoing edges")
        if in_deg.get(self.target, 0) < 1:
            raise QueryStructureError("target is disconnected")
        for node in self.nodes():
            if node == self.target:
                continue
            if out_deg.get(node, 0) != 1:
                raise QueryStructureError(f"node {node!r} must have exactly one outgoing edge")
            if node not in anchor_names and in_deg.get(node, 0) < 1:
                raise QueryStructureError(f"variable {node!r} has no incoming edge")

    def topological_nodes(self) -> list[str]:
        preds: dict[str, set[str]] = {n: set() for n in self.nodes()}
        for u, _, v in self.edges:
            preds[v].add(u)
        return [n for n in TopologicalSorter(preds).static_order()]

    def in_edges(self) -> dict[str, list[tuple[str, int]]]:
        incoming: dict[str, list[tuple[str, int]]] = {n: [] for n in self.nodes()}
        for u, r, v in self.edges:
            incoming[v].append((u, r))
        for v in incoming:
            incoming[v].sort()
        return incoming


@dataclass(frozen=True)
class PathQuery:
    """Linear chain of relations from one anchor; the target sits at the end."""

    anchor: int
    relations: tuple[int, ...]

    def __post_init__(self):
        if not self.relations:
            raise QueryStructureError("path query needs at least one relation")

    @property
    def hops(self) -> int:
        return len(self.relations)

    def to_conjunctive(self) -> ConjunctiveQuery:
        nodes = ["a"] + [f"v{i}" for i in range(1, len(self.relations))] + ["t"]
        edges = tuple((nodes[i], r, nodes[i + 1]) for i, r in enumerate(self.relations))
        return ConjunctiveQuery.make({"a": self.anchor}, "t", edges)


def exact_answer(kg: KnowledgeGraph, query: ConjunctiveQuery | PathQuery) -> frozenset[int]:
    """All entities satisfying the query under exact graph matching.

    Evaluates over the complete graph; confidentiality filtering is the
    API layer's concern, not the reasoner's.
    """
    if isinstance(query, PathQuery):
        current = {query.anchor}
        for r in query.relations:
            if not 0 <= r < kg.n_relations:
                raise KgError(f"unknown relation id {r}")
            nxt: set[int] = set()
            for e in current:
                nxt.update(kg.neighbors(e, r))
            current = nxt
            if not current:
                break
        return frozenset(current)
    query.validate_structure()
    for _, r, _ in query.edges:
        if not 0 <= r < kg.n_relations:
            raise KgError(f"unknown relation id {r}")
    anchor_map = query.anchor_map
    incoming = query.in_edges()
    candidates: dict[str, set[int]] = {}
    for node in query.topological_nodes():
        if node in anchor_map:
            candidates[node] = {anchor_map[node]}
            continue
        sets: list[set[int]] = []
        for u, r in incoming[node]:
            reach: set[int] = set()
            for e in candidates[u]:
                reach.update(kg.neighbors(e, r))
            sets.append(reach)
        sets.sort(key=len)
        acc = sets[0]
        for s in sets[1:]:
            acc = acc & s
        candidates[node] = acc
    return frozenset(candidates[query.target])


def reverse_path(kg: KnowledgeGraph, query: PathQuery, observed_answer: int) -> PathQuery:
    """Path from an observed answer back toward the original anchor.

    Relations are reversed and inverted, so the original anchor satisfies the
    returned query exactly when the observed answer satisfied the original.
    """
    inverted = tuple(kg.inverse(r) for r in reversed(query.relations))
    return PathQuery(anchor=observed_answer, relations=inverted)


# -- serialization ------------------------------------------------------------

_PATH_RE = re.compile(r"^\s*(\S+)\s+\[([^\]]*)\]\s+\?\s*$")


def path_to_text(kg: KnowledgeGraph, query: PathQuery) -> str:
    """Compact one-line form: ``anchor [rel1,rel2] ?``."""
    rels = ",".join(kg.relations[r].name for r in query.relations)
    return f"{kg.entities[query.anchor].name} [{rels}] ?"


def path_from_text(kg: KnowledgeGraph, text: str) -> PathQuery:
    m = _PATH_RE.match(text)
    if not m:
        raise QueryStructureError(f"cannot parse path query {text!r}")
    anchor = kg.entity_id(m.group(1))
    rel_names = [s.strip() for s in m.group(2).split(",") if s.strip()]
    if not rel_names:
        raise QueryStructureError("path query needs at least one relation")
    return PathQuery(anchor, tuple(kg.relation_id(r) for r in rel_names))


def query_to_json(kg: KnowledgeGraph, query: ConjunctiveQuery) -> dict:
    """Name-based JSON DAG form used on the wire and in files."""
    return {
        "anchors": {name: kg.entities[e].name for name, e in query.anchors},
        "target": query.target,
        "edges": [[u, kg.relations[r].name, v] for u, r, v in query.edges],
    }


def query_from_json(kg: KnowledgeGraph, payload: dict) -> ConjunctiveQuery:
    """Parse the JSON DAG form, resolving names against ``kg``.

    Raises :class:`QueryStructureError` for structural problems and
    :class:`KgError` for names unknown to this graph.
    """
    if not isinstance(payload, dict):
        raise QueryStructureError("query payload must be an object")
    anchors_obj = payload.get("anchors")
    target = payload.get("target")
    edges_obj = payload.get("edges")
    if not isinstance(anchors_obj, dict) or not anchors_obj:
        raise QueryStructureError("missing or empty 'anchors' object")
    if not isinstance(target, str):
        raise QueryStructureError("missing 'target' node name")
    if not isinstance(edges_obj, list):
        raise QueryStructureError("missing 'edges' list")
    anchors: dict[str, int] = {}
    for node, ent_name in anchors_obj.items():
        if not isinstance(node, str) or not isinstance(ent_name, str):
            raise QueryStructureError("anchor entries must map node name to entity name")
        anchors[node] = kg.entity_id(ent_name)
    edges = []
    for item in edges_obj:
        if not (isinstance(item, (list, tuple)) and len(item) == 3 and all(isinstance(x, str) for x in item)):
            raise QueryStructureError("each edge must be [node, relation, node]")
        u, r_name, v = item
        edges.append((u, kg.relation_id(r_name), v))
    return ConjunctiveQuery.make(anchors, target, edges)


def query_to_text(kg: KnowledgeGraph, query: ConjunctiveQuery) -> str:
    return json.dumps(query_to_json(kg, query), sort_keys=True)


def query_from_text(kg: KnowledgeGraph, text: str) -> ConjunctiveQuery:
    return query_from_json(kg, json.loads(text))
