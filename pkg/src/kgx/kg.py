"""Knowledge-graph data model: typed facts, file ingestion, splitting, synthesis.

A graph is a set of directed facts ``(subject, relation, object)`` over
categorized entities.  Every relation has an inverse and the fact set is
closed under inversion, so reverse traversal never needs special cases.
Graphs are immutable once built; use :class:`KgBuilder` to assemble one.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

INVERSE_SUFFIX = "_inv"

TRIPLES_FILE = "triples.tsv"
CATEGORIES_FILE = "categories.tsv"
SCHEMA_FILE = "schema.tsv"

Fact = tuple[int, int, int]


class KgError(ValueError):
    """Base error for graph construction and lookup failures."""


class ParseError(KgError):
    """Malformed or inconsistent input file; carries the offending line."""

    def __init__(self, path: str | Path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class SchemaError(KgError):
    """A fact or relation violates the declared category schema."""


class SplitError(KgError):
    """Requested public/private split is infeasible."""


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    category: int


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    subject_category: int
    object_category: int
    inverse: int  # relation id; equals own id only for declared-symmetric relations


class KnowledgeGraph:
    """Immutable multigraph of facts with category schema and adjacency indexes.

    Safe to share across threads after construction.  ``facts`` contains every
    stored edge including the materialized inverses, so the fact count of a
    graph built from ``n`` declared triples (none self-inverse) is ``2n``.
    """

    def __init__(
        self,
        categories: Sequence[str],
        entities: Sequence[Entity],
        relations: Sequence[Relation],
        facts: Iterable[Fact],
    ):
        self.categories: tuple[str, ...] = tuple(categories)
        self.entities: tuple[Entity, ...] = tuple(entities)
        self.relations: tuple[Relation, ...] = tuple(relations)
        self.facts: frozenset[Fact] = frozenset(facts)
        self._validate()
        self._name_to_entity = {e.name: e.id for e in self.entities}
        self._name_to_relation = {r.name: r.id for r in self.relations}
        self._name_to_category = {c: i for i, c in enumerate(self.categories)}
        out: dict[int, dict[int, list[int]]] = {e.id: {} for e in self.entities}
        for s, r, o in sorted(self.facts):
            out[s].setdefault(r, []).append(o)
        self._out: dict[int, dict[int, tuple[int, ...]]] = {
            e: {r: tuple(objs) for r, objs in by_rel.items()} for e, by_rel in out.items()
        }
        members: dict[int, list[int]] = {i: [] for i in range(len(self.categories))}
        for e in self.entities:
            members[e.category].append(e.id)
        self._members = {c: tuple(sorted(ids)) for c, ids in members.items()}

    def _validate(self) -> None:
        ids = [e.id for e in self.entities]
        if ids != list(range(len(ids))):
            raise KgError("entity ids must be contiguous from 0 in definition order")
        if [r.id for r in self.relations] != list(range(len(self.relations))):
            raise KgError("relation ids must be contiguous from 0 in definition order")
        if len({e.name for e in self.entities}) != len(self.entities):
            raise KgError("entity names must be unique")
        if len({r.name for r in self.relations}) != len(self.relations):
            raise KgError("relation names must be unique")
        for e in self.entities:
            if not 0 <= e.category < len(self.categories):
                raise KgError(f"entity {e.name!r} has unknown category id {e.category}")
        for r in self.relations:
            inv = self.relations[r.inverse]
            if inv.inverse != r.id:
                raise KgError(f"inverse pairing of relation {r.name!r} is not symmetric")
            if inv.subject_category != r.object_category or inv.object_category != r.subject_category:
                raise SchemaError(f"inverse of {r.name!r} does not swap its categories")
        n = len(self.entities)
        for s, r, o in self.facts:
            if not (0 <= s < n and 0 <= o < n):
                raise KgError(f"fact {(s, r, o)} references a missing entity")
            rel = self.relations[r]
            if self.entities[s].category != rel.subject_category or self.entities[o].category != rel.object_category:
                raise SchemaError(
                    f"fact ({self.entities[s].name}, {rel.name}, {self.entities[o].name}) violates schema"
                )
            if (o, rel.inverse, s) not in self.facts:
                raise KgError(f"fact {(s, r, o)} is missing its inverse mirror")

    # -- lookups ------------------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_facts(self) -> int:
        return len(self.facts)

    def neighbors(self, entity: int, relation: int) -> tuple[int, ...]:
        """Objects o with (entity, relation, o) a fact, ascending by id."""
        return self._out.get(entity, {}).get(relation, ())

    def out_adjacency(self, entity: int) -> Mapping[int, tuple[int, ...]]:
        return self._out.get(entity, {})

    def adjacent_entities(self, entity: int) -> tuple[int, ...]:
        seen: set[int] = set()
        for objs in self._out.get(entity, {}).values():
            seen.update(objs)
        return tuple(sorted(seen))

    def has_fact(self, s: int, r: int, o: int) -> bool:
        return (s, r, o) in self.facts

    def inverse(self, relation: int) -> int:
        return self.relations[relation].inverse

    def category_of(self, entity: int) -> int:
        return self.entities[entity].category

    def category_members(self, category: int) -> tuple[int, ...]:
        return self._members.get(category, ())

    def entity_id(self, name: str) -> int:
        try:
            return self._name_to_entity[name]
        except KeyError:
            raise KgError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._name_to_relation[name]
        except KeyError:
            raise KgError(f"unknown relation {name!r}") from None

    def category_id(self, name: str) -> int:
        try:
            return self._name_to_category[name]
        except KeyError:
            raise KgError(f"unknown category {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name in self._name_to_entity

    def has_relation(self, name: str) -> bool:
        return name in self._name_to_relation

    # -- canonical orientation ----------------------------------------------

    def canonical_fact(self, fact: Fact) -> Fact:
        """One orientation per mirrored fact pair, for double-count-free tallies."""
        s, r, o = fact
        inv = self.relations[r].inverse
        if inv == r:  # symmetric relation: orient by endpoint ids
            return (s, r, o) if s <= o else (o, r, s)
        return (s, r, o) if r < inv else (o, inv, s)

    def canonical_facts(self) -> frozenset[Fact]:
        return frozenset(self.canonical_fact(f) for f in self.facts)


class KgBuilder:
    """Incremental, validating assembler for :class:`KnowledgeGraph`.

    Ids are assigned in insertion order, which makes file loads and synthetic
    generation reproducible byte-for-byte.
    """

    def __init__(self) -> None:
        self.categories: list[str] = []
        self._cat_index: dict[str, int] = {}
        self.relations: list[Relation] = []
        self._rel_index: dict[str, int] = {}
        self.entities: list[Entity] = []
        self._ent_index: dict[str, int] = {}
        self.facts: set[Fact] = set()
        self._subject_relation: set[tuple[int, int]] = set()

    def add_category(self, name: str) -> int:
        if name in self._cat_index:
            return self._cat_index[name]
        self.categories.append(name)
        self._cat_index[name] = len(self.categories) - 1
        return self._cat_index[name]

    def has_category(self, name: str) -> bool:
        return name in self._cat_index

    def add_relation(
        self,
        name: str,
        subject_category: str,
        object_category: str,
        inverse_name: str | None = None,
    ) -> int:
        """Declare a relation, materializing its inverse when absent.

        ``inverse_name == name`` declares a symmetric (self-inverse) relation,
        which then requires matching endpoint categories.
        """
        if name in self._rel_index:
            raise KgError(f"relation {name!r} already declared")
        subj = self._require_category(subject_category)
        obj = self._require_category(object_category)
        rid = len(self.relations)
        if inverse_name == name:
            if subj != obj:
                raise SchemaError(f"symmetric relation {name!r} must relate one category to itself")
            self.relations.append(Relation(rid, name, subj, obj, rid))
            self._rel_index[name] = rid
            return rid
        inv_name = inverse_name or name + INVERSE_SUFFIX
        if inv_name in self._rel_index:
            raise KgError(f"inverse name {inv_name!r} already taken")
        self.relations.append(Relation(rid, name, subj, obj, rid + 1))
        self.relations.append(Relation(rid + 1, inv_name, obj, subj, rid))
        self._rel_index[name] = rid
        self._rel_index[inv_name] = rid + 1
        return rid

    def _require_category(self, name: str) -> int:
        if name not in self._cat_index:
            raise KgError(f"unknown category {name!r}")
        return self._cat_index[name]

    def add_entity(self, name: str, category: str) -> int:
        if name in self._ent_index:
            existing = self.entities[self._ent_index[name]]
            if self.categories[existing.category] != category:
                raise KgError(f"entity {name!r} redeclared with different category")
            return existing.id
        cat = self._require_category(category)
        eid = len(self.entities)
        self.entities.append(Entity(eid, name, cat))
        self._ent_index[name] = eid
        return eid

    def has_entity(self, name: str) -> bool:
        return name in self._ent_index

    def entity_id(self, name: str) -> int:
        if name not in self._ent_index:
            raise KgError(f"unknown entity {name!r}")
        return self._ent_index[name]

    def relation_id(self, name: str) -> int:
        if name not in self._rel_index:
            raise KgError(f"unknown relation {name!r}")
        return self._rel_index[name]

    def add_fact(self, subject: int, relation: int, obj: int) -> None:
        rel = self.relations[relation]
        if self.entities[subject].category != rel.subject_category:
            raise SchemaError(
                f"subject {self.entities[subject].name!r} has category "
                f"{self.categories[self.entities[subject].category]!r}, "
                f"relation {rel.name!r} expects {self.categories[rel.subject_category]!r}"
            )
        if self.entities[obj].category != rel.object_category:
            raise SchemaError(
                f"object {self.entities[obj].name!r} has category "
                f"{self.categories[self.entities[obj].category]!r}, "
                f"relation {rel.name!r} expects {self.categories[rel.object_category]!r}"
            )
        self.facts.add((subject, relation, obj))
        self.facts.add((obj, rel.inverse, subject))
        self._subject_relation.add((subject, relation))
        self._subject_relation.add((obj, rel.inverse))

    def has_fact_for(self, subject: int, relation: int) -> bool:
        return (subject, relation) in self._subject_relation

    def build(self) -> KnowledgeGraph:
        return KnowledgeGraph(self.categories, self.entities, self.relations, self.facts)


# -- file ingestion ---------------------------------------------------------


def _read_rows(path: str | Path, n_cols_min: int, n_cols_max: int):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if not n_cols_min <= len(cols) <= n_cols_max:
                raise ParseError(path, line_no, f"expected {n_cols_min}-{n_cols_max} tab-separated columns, got {len(cols)}")
            if any(not c for c in cols):
                raise ParseError(path, line_no, "empty column")
            rows.append((line_no, cols))
    return rows


def load_kg(
    triples_path: str | Path,
    categories_path: str | Path,
    schema_path: str | Path,
) -> KnowledgeGraph:
    """Load a graph from its three tab-separated files.

    The schema file declares relations (and, implicitly, categories) as
    ``relation<TAB>subject_cat<TAB>object_cat[<TAB>inverse_name]``; the
    category file declares entities as ``entity<TAB>category``; the triple
    file holds one ``subject<TAB>relation<TAB>object`` fact per line.
    Ids follow file order; inverse facts are materialized automatically.
    """
    builder = KgBuilder()
    for line_no, cols in _read_rows(schema_path, 3, 4):
        name, subj, obj = cols[0], cols[1], cols[2]
        inverse_name = cols[3] if len(cols) == 4 else None
        builder.add_category(subj)
        builder.add_category(obj)
        if name in builder._rel_index:
            declared = builder.relations[builder._rel_index[name]]
            # a row may re-state a previously auto-declared inverse; verify it matches
            if (
                builder.categories[declared.subject_category] != subj
                or builder.categories[declared.object_category] != obj
                or (inverse_name and builder.relations[declared.inverse].name != inverse_name)
            ):
                raise ParseError(schema_path, line_no, f"relation {name!r} redeclared inconsistently")
            continue
        try:
            builder.add_relation(name, subj, obj, inverse_name)
        except KgError as exc:
            raise ParseError(schema_path, line_no, str(exc)) from exc
    for line_no, cols in _read_rows(categories_path, 2, 2):
        name, cat = cols
        if not builder.has_category(cat):
            raise ParseError(categories_path, line_no, f"unknown category {cat!r}")
        try:
            builder.add_entity(name, cat)
        except KgError as exc:
            raise ParseError(categories_path, line_no, str(exc)) from exc
    for line_no, cols in _read_rows(triples_path, 3, 3):
        s_name, r_name, o_name = cols
        for ent in (s_name, o_name):
            if not builder.has_entity(ent):
                raise ParseError(triples_path, line_no, f"undeclared entity {ent!r}")
        if r_name not in builder._rel_index:
            raise ParseError(triples_path, line_no, f"undeclared relation {r_name!r}")
        try:
            builder.add_fact(builder.entity_id(s_name), builder.relation_id(r_name), builder.entity_id(o_name))
        except SchemaError as exc:
            raise ParseError(triples_path, line_no, str(exc)) from exc
    return builder.build()


def load_kg_dir(directory: str | Path) -> KnowledgeGraph:
    d = Path(directory)
    return load_kg(d / TRIPLES_FILE, d / CATEGORIES_FILE, d / SCHEMA_FILE)


def save_kg(kg: KnowledgeGraph, directory: str | Path) -> None:
    """Write the three-file form of ``kg``; loading it back is id-identical."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / SCHEMA_FILE, "w", encoding="utf-8") as fh:
        for rel in kg.relations:
            inv = kg.relations[rel.inverse]
            fh.write(
                f"{rel.name}\t{kg.categories[rel.subject_category]}\t{kg.categories[rel.object_category]}\t{inv.name}\n"
            )
    with open(d / CATEGORIES_FILE, "w", encoding="utf-8") as fh:
        for ent in kg.entities:
            fh.write(f"{ent.name}\t{kg.categories[ent.category]}\n")
    with open(d / TRIPLES_FILE, "w", encoding="utf-8") as fh:
        for s, r, o in sorted(kg.canonical_facts()):
            fh.write(f"{kg.entities[s].name}\t{kg.relations[r].name}\t{kg.entities[o].name}\n")


# -- public/private splitting -----------------------------------------------


@dataclass(frozen=True)
class KgSplit:
    """A confidentiality split of ``kg`` into a public graph plus private region.

    ``private_entities`` and ``private_facts`` use the id space of the full
    graph; ``public_kg`` is a standalone re-indexed graph over the remaining
    entities (names are preserved and act as the cross-graph identity).
    """

    kg: KnowledgeGraph
    public_kg: KnowledgeGraph
    private_entities: frozenset[int]
    private_facts: frozenset[Fact]

    def is_private(self, entity: int) -> bool:
        return entity in self.private_entities

    def private_canonical_facts(self) -> frozenset[Fact]:
        return frozenset(self.kg.canonical_fact(f) for f in self.private_facts)


def _member_graph_neighbors(kg: KnowledgeGraph, member_set: set[int]) -> dict[int, tuple[int, ...]]:
    """Adjacency among category members, where sharing any graph neighbor counts."""
    adj_members_of: dict[int, set[int]] = {}
    for m in member_set:
        for x in kg.adjacent_entities(m):
            adj_members_of.setdefault(x, set()).add(m)
    out: dict[int, set[int]] = {m: set() for m in member_set}
    for m in member_set:
        for x in kg.adjacent_entities(m):
            if x in member_set:
                out[m].add(x)
            out[m].update(adj_members_of.get(x, ()))
        out[m].discard(m)
    return {m: tuple(sorted(s)) for m, s in out.items()}


def split_private(
    kg: KnowledgeGraph,
    category: str,
    mode: str,
    size: int,
    seed: int,
) -> KgSplit:
    """Carve a private sub-KG of ``size`` entities from one category.

    ``connected`` grows a breadth-first ball over the category's members,
    treating two members as adjacent when they link directly or share a
    neighbor; ``scattered`` samples members uniformly.  Same seed, same split.
    """
    if mode not in ("connected", "scattered"):
        raise SplitError(f"unknown split mode {mode!r}")
    cat = kg.category_id(category)
    members = kg.category_members(cat)
    if not members:
        raise SplitError(f"category {category!r} has no entities")
    if size > len(members):
        raise SplitError(f"requested {size} private entities, category {category!r} has {len(members)}")
    rng = np.random.default_rng(seed)
    if mode == "scattered":
        chosen = set(int(x) for x in rng.choice(len(members), size=size, replace=False))
        private = frozenset(members[i] for i in chosen)
    else:
        member_set = set(members)
        adjacency = _member_graph_neighbors(kg, member_set)
        start = members[int(rng.integers(len(members)))]
        ball = {start}
        queue = deque([start])
        while queue and len(ball) < size:
            m = queue.popleft()
            for nxt in adjacency[m]:
                if nxt not in ball:
                    ball.add(nxt)
                    queue.append(nxt)
                    if len(ball) == size:
                        break
        if len(ball) < size:
            raise SplitError(
                f"connected component around seed entity holds only {len(ball)} "
                f"members of {category!r}, cannot reach size {size}"
            )
        private = frozenset(ball)
    private_facts = frozenset(f for f in kg.facts if f[0] in private or f[2] in private)
    public_builder = KgBuilder()
    for name in kg.categories:
        public_builder.add_category(name)
    declared: set[int] = set()
    for rel in kg.relations:
        if rel.id in declared:
            continue
        inv = kg.relations[rel.inverse]
        public_builder.add_relation(
            rel.name,
            kg.categories[rel.subject_category],
            kg.categories[rel.object_category],
            inv.name,
        )
        declared.add(rel.id)
        declared.add(inv.id)
    old_to_new: dict[int, int] = {}
    for ent in kg.entities:
        if ent.id not in private:
            old_to_new[ent.id] = public_builder.add_entity(ent.name, kg.categories[ent.category])
    for s, r, o in kg.facts:
        if s not in private and o not in private:
            public_builder.add_fact(old_to_new[s], r, old_to_new[o])
    return KgSplit(
        kg=kg,
        public_kg=public_builder.build(),
        private_entities=private,
        private_facts=private_facts,
    )


# -- synthetic generation ---------------------------------------------------


@dataclass(frozen=True)
class RelationSpec:
    name: str
    subject_category: str
    object_category: str
    mean_out_degree: float
    inverse_name: str | None = None


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of a synthetic graph: category sizes plus per-relation degree means."""

    categories: tuple[tuple[str, int], ...]
    relations: tuple[RelationSpec, ...]

    def expected_base_facts(self) -> float:
        counts = dict(self.categories)
        return sum(counts[r.subject_category] * r.mean_out_degree for r in self.relations)


def synth_kg(spec: GeneratorSpec, seed: int) -> KnowledgeGraph:
    """Generate a schema-conformant graph, deterministic under ``seed``.

    Each subject draws a Poisson out-degree per relation and links to distinct
    uniform targets of the object category (self-loops skipped), so the total
    fact count concentrates near ``2 * spec.expected_base_facts()``.
    """
    builder = KgBuilder()
    for name, _count in spec.categories:
        builder.add_category(name)
    for rel in spec.relations:
        builder.add_relation(rel.name, rel.subject_category, rel.object_category, rel.inverse_name)
    width = max(4, len(str(max((c for _, c in spec.categories), default=0))))
    for cat_name, count in spec.categories:
        for i in range(count):
            builder.add_entity(f"{cat_name}_{i:0{width}d}", cat_name)
    rng = np.random.default_rng(seed)
    members = {
        cat_name: [builder.entity_id(f"{cat_name}_{i:0{width}d}") for i in range(count)]
        for cat_name, count in spec.categories
    }
    for rel in spec.relations:
        rid = builder.relation_id(rel.name)
        targets = members[rel.object_category]
        for subject in members[rel.subject_category]:
            degree = int(rng.poisson(rel.mean_out_degree))
            if degree <= 0:
                continue
            degree = min(degree, len(targets))
            picked = rng.choice(len(targets), size=degree, replace=False)
            for t in sorted(int(p) for p in picked):
                obj = targets[t]
                if obj == subject:
                    continue
                builder.add_fact(subject, rid, obj)
    return builder.build()


def load_generator_spec(path: str | Path) -> GeneratorSpec:
    """Parse a generator spec file with ``[categories]`` and ``[relations]`` sections."""
    categories: list[tuple[str, int]] = []
    relations: list[RelationSpec] = []
    section = None
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                if section not in ("categories", "relations"):
                    raise ParseError(path, line_no, f"unknown section {section!r}")
                continue
            cols = line.split()
            if section == "categories":
                if len(cols) != 2:
                    raise ParseError(path, line_no, "expected: <name> <count>")
                try:
                    categories.append((cols[0], int(cols[1])))
                except ValueError:
                    raise ParseError(path, line_no, f"bad count {cols[1]!r}") from None
            elif section == "relations":
                if len(cols) not in (4, 5):
                    raise ParseError(path, line_no, "expected: <name> <subject> <object> <mean_degree> [inverse]")
                try:
                    mean = float(cols[3])
                except ValueError:
                    raise ParseError(path, line_no, f"bad degree {cols[3]!r}") from None
                inverse = cols[4] if len(cols) == 5 else None
                relations.append(RelationSpec(cols[0], cols[1], cols[2], mean, inverse))
            else:
                raise ParseError(path, line_no, "content before any section header")
    spec = GeneratorSpec(tuple(categories), tuple(relations))
    declared = {name for name, _ in spec.categories}
    for rel in spec.relations:
        if rel.subject_category not in declared or rel.object_category not in declared:
            raise KgError(f"relation {rel.name!r} references an undeclared category")
    return spec


def desk_generator_spec(scale: float = 1.0) -> GeneratorSpec:
    """Default desk-scale shape: 5 categories, 8 relations, ~2k entities.

    Degree means are kept low enough that per-hop answer sets stay small;
    point embeddings cannot score-separate answers of very wide queries at
    desk dimensionality.
    """
    s = scale
    return GeneratorSpec(
        categories=(
            ("app", int(400 * s)),
            ("vendor", int(200 * s)),
            ("version", int(600 * s)),
            ("threat", int(500 * s)),
            ("fix", int(300 * s)),
        ),
        relations=(
            RelationSpec("made_by", "app", "vendor", 0.8),
            RelationSpec("has_version", "app", "version", 2.2),
            RelationSpec("affected_by", "version", "threat", 1.9),
            RelationSpec("mitigated_by", "threat", "fix", 1.4),
            RelationSpec("related_to", "threat", "threat", 1.1),
            RelationSpec("targeted_by", "app", "threat", 1.7),
            RelationSpec("published_by", "fix", "vendor", 0.8),
            RelationSpec("succeeded_by", "version", "version", 0.6),
        ),
    )
