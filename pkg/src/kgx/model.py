"""Trainable embedding reasoner: entity vectors, relation projectors, intersection.

Entities live in R^d.  Each relation owns a small feed-forward projector that
maps an embedding to the region of its relation-neighbors; branch embeddings
merge through a permutation-invariant intersection operator (elementwise
min-pool followed by one linear layer).  Answering ranks entities by L1
distance to the composed query embedding, squashed to a confidence score
``1 / (1 + distance)``.

Training minimizes a margin ranking loss over query-answer pairs sampled from
the graph (path, intersection, and intersection-projection templates) with
uniform negative sampling, optimized by an in-repo Adam implementation.
Everything is float64 and seed-deterministic.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kg import KgError, KnowledgeGraph
from .queries import ConjunctiveQuery, PathQuery

CHECKPOINT_MAGIC = b"KGXM"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch where it happened."""


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 200
    depth: int = 4
    learning_rate: float = 0.001
    batch_size: int = 512
    epochs: int = 50_000
    negatives: int = 8
    margin: float = 1.0
    # weight of the absolute positive-distance term; the margin alone fixes
    # only relative order, while confidence scores need answers at small
    # absolute distance to separate from non-answers across queries
    positive_pull: float = 0.2
    n_queries: int = 50_000
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "depth", "batch_size", "epochs", "negatives", "n_queries"):
            if getattr(self, name) < 0 or (name not in ("epochs",) and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.margin <= 0:
            raise ValueError("learning_rate and margin must be positive")

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        """Laptop-scale preset: small dimensions, seconds-not-hours training."""
        base = TrainConfig(
            dim=64,
            depth=2,
            learning_rate=0.003,
            epochs=60,
            n_queries=12_000,
            batch_size=512,
            negatives=12,
            positive_pull=0.5,
        )
        return replace(base, **overrides)

    @staticmethod
    def surrogate(**overrides) -> "TrainConfig":
        """Attacker-side preset: lighter than desk; ranking quality matters
        more than absolute score calibration, hence the gentler pull."""
        base = TrainConfig(
            dim=32,
            depth=2,
            learning_rate=0.003,
            epochs=25,
            n_queries=6_000,
            batch_size=512,
            negatives=12,
            positive_pull=0.2,
        )
        return replace(base, **overrides)

    @staticmethod
    def paper(**overrides) -> "TrainConfig":
        return replace(TrainConfig(), **overrides)


@dataclass(frozen=True)
class RankedAnswer:
    """Entities ordered by descending confidence; ties broken by ascending id."""

    entries: tuple[tuple[int, float], ...]

    def entity_ids(self) -> tuple[int, ...]:
        return tuple(e for e, _ in self.entries)


def score_from_distance(distance):
    return 1.0 / (1.0 + distance)


# -- parameterized operators --------------------------------------------------


class EmbeddingModel:
    """Entity table plus per-relation projectors and one intersection operator."""

    def __init__(self, n_entities: int, n_relations: int, dim: int, depth: int, rng: np.random.Generator):
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.dim = dim
        self.depth = depth
        scale = 1.0 / np.sqrt(dim)
        self.params: dict[str, np.ndarray] = {}
        self.params["ent"] = rng.normal(0.0, scale, size=(n_entities, dim))
        for r in range(n_relations):
            for layer in range(depth):
                self.params[f"proj:{r}:W{layer}"] = rng.normal(0.0, scale, size=(dim, dim))
                self.params[f"proj:{r}:b{layer}"] = np.zeros(dim)
        self.params["inter:W"] = rng.normal(0.0, scale, size=(dim, dim))
        self.params["inter:b"] = np.zeros(dim)
        self.loss_trace: list[float] = []

    # All forward passes accept (B, dim) batches.

    def entity_vectors(self, ids) -> np.ndarray:
        return self.params["ent"][np.asarray(ids, dtype=int)]

    def project(self, relation: int, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        if not 0 <= relation < self.n_relations:
            raise KgError(f"unknown relation id {relation}")
        h = x
        for layer in range(self.depth):
            w = self.params[f"proj:{relation}:W{layer}"]
            b = self.params[f"proj:{relation}:b{layer}"]
            z = h @ w.T + b
            if cache is not None:
                cache.append((relation, layer, h, z))
            h = z if layer == self.depth - 1 else np.tanh(z)
        return h

    def project_backward(self, cache: list, grad_out: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        d = grad_out
        for relation, layer, h_in, z in reversed(cache):
            dz = d if layer == self.depth - 1 else d * (1.0 - np.tanh(z) ** 2)
            _acc(grads, f"proj:{relation}:W{layer}", dz.T @ h_in)
            _acc(grads, f"proj:{relation}:b{layer}", dz.sum(axis=0))
            d = dz @ self.params[f"proj:{relation}:W{layer}"]
        return d

    def intersect(self, branches: Sequence[np.ndarray], cache: list | None = None) -> np.ndarray:
        stacked = np.stack(branches, axis=0)  # (m, B, dim)
        winner = np.argmin(stacked, axis=0)
        pooled = np.min(stacked, axis=0)
        w = self.params["inter:W"]
        out = pooled @ w.T + self.params["inter:b"]
        if cache is not None:
            cache.append((len(branches), winner, pooled))
        return out

    def intersect_backward(self, cache_entry, grad_out: np.ndarray, grads: dict[str, np.ndarray]) -> list[np.ndarray]:
        n_branches, winner, pooled = cache_entry
        _acc(grads, "inter:W", grad_out.T @ pooled)
        _acc(grads, "inter:b", grad_out.sum(axis=0))
        d_pooled = grad_out @ self.params["inter:W"]
        return [d_pooled * (winner == j) for j in range(n_branches)]

    def check_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())


def _acc(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    """Accumulate into a sparse gradient dict (only touched keys exist)."""
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


def embed_query(model: EmbeddingModel, query: ConjunctiveQuery | PathQuery) -> np.ndarray:
    """Compose the query embedding by walking the query tree from its anchors."""
    if isinstance(query, PathQuery):
        h = model.entity_vectors([query.anchor])
        for r in query.relations:
            h = model.project(r, h)
        return h[0]
    query.validate_structure()
    anchor_map = query.anchor_map
    incoming = query.in_edges()
    vectors: dict[str, np.ndarray] = {}
    for node in query.topological_nodes():
        if node in anchor_map:
            vectors[node] = model.entity_vectors([anchor_map[node]])
            continue
        branches = [model.project(r, vectors[u]) for u, r in incoming[node]]
        vectors[node] = branches[0] if len(branches) == 1 else model.intersect(branches)
    return vectors[query.target][0]


def _ranked_order(model: EmbeddingModel, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dists = np.abs(model.params["ent"] - vec).sum(axis=1)
    order = np.lexsort((np.arange(model.n_entities), dists))
    return order, dists


def answer_ranked(model: EmbeddingModel, query: ConjunctiveQuery | PathQuery, k: int) -> RankedAnswer:
    """Top-k entities nearest the query embedding; no filtering happens here."""
    if k < 1:
        raise ValueError("k must be at least 1")
    vec = embed_query(model, query)
    order, dists = _ranked_order(model, vec)
    top = order[:k]
    return RankedAnswer(tuple((int(e), float(score_from_distance(dists[e]))) for e in top))


def nearest_neighbor(model: EmbeddingModel, kg: KnowledgeGraph, entity: int, category: int) -> int:
    """Closest other member of ``category`` in embedding space, ties by id."""
    members = [m for m in kg.category_members(category) if m != entity]
    if not members:
        raise KgError(f"category {kg.categories[category]!r} has no other member than entity {entity}")
    vec = model.params["ent"][entity]
    member_arr = np.asarray(members, dtype=int)
    dists = np.abs(model.params["ent"][member_arr] - vec).sum(axis=1)
    best = np.lexsort((member_arr, dists))[0]
    return int(member_arr[best])


# -- training data ------------------------------------------------------------

# mix of the sampled compound templates; every directed fact additionally
# becomes a 1-hop query, so link-level coverage is complete
_TEMPLATE_MIX = (("path2", 0.40), ("path3", 0.15), ("inter", 0.25), ("interproj", 0.20))

# cap on distinct relation sequences per template (None = unlimited); batch
# packing keeps training fast even with many small groups
_MAX_SHAPES = {"path2": None, "path3": 48, "inter": 32, "interproj": 32}


@dataclass
class QueryGroup:
    """Training queries sharing one template and relation sequence.

    ``anchors`` holds one id array per anchor slot; ``positives`` the known
    answers.  Shared structure makes the forward pass one batched pipeline,
    and the shared target category supplies hard in-category negatives.
    """

    template: str
    relations: tuple[int, ...]
    anchors: tuple[np.ndarray, ...]
    positives: np.ndarray
    target_category: int

    def size(self) -> int:
        return len(self.positives)

    def to_query(self, row: int) -> ConjunctiveQuery:
        a = [int(col[row]) for col in self.anchors]
        if self.template.startswith("path"):
            nodes = ["a0"] + [f"v{i}" for i in range(1, len(self.relations))] + ["t"]
            edges = tuple((nodes[i], r, nodes[i + 1]) for i, r in enumerate(self.relations))
            return ConjunctiveQuery.make({"a0": a[0]}, "t", edges)
        if self.template == "inter":
            r1, r2 = self.relations
            return ConjunctiveQuery.make({"a0": a[0], "a1": a[1]}, "t", (("a0", r1, "t"), ("a1", r2, "t")))
        r1, r2, r3 = self.relations
        return ConjunctiveQuery.make(
            {"a0": a[0], "a1": a[1]}, "t", (("a0", r1, "m"), ("a1", r2, "m"), ("m", r3, "t"))
        )


def sample_training_queries(kg: KnowledgeGraph, n: int, rng: np.random.Generator) -> list[QueryGroup]:
    """Training queries: every directed fact as a 1-hop query, plus ``n``
    sampled compound queries over a capped pool of relation sequences."""
    facts = sorted(kg.facts)
    if not facts:
        raise KgError("cannot sample training queries from an empty graph")
    incident: dict[int, list[tuple[int, int]]] = {}
    for s, r, o in facts:
        incident.setdefault(s, []).append((r, o))
    branchable = sorted(e for e, lst in incident.items() if len(lst) >= 2)
    deep = sorted(e for e, lst in incident.items() if len(lst) >= 3)
    raw: dict[tuple[str, tuple[int, ...]], list[tuple[tuple[int, ...], int]]] = {}

    for s, r, o in facts:
        raw.setdefault(("path", (r,)), []).append(((s,), o))

    def extend(seq, node):
        options = incident.get(node)
        if not options:
            return None
        r, o = options[int(rng.integers(len(options)))]
        seq.append(r)
        return o

    shapes_seen: dict[str, set[tuple[int, ...]]] = {name: set() for name, _ in _TEMPLATE_MIX}

    def admit(template: str, rels: tuple[int, ...]) -> bool:
        cap = _MAX_SHAPES[template]
        seen = shapes_seen[template]
        if rels in seen:
            return True
        if cap is not None and len(seen) >= cap:
            return False
        seen.add(rels)
        return True

    counts = {name: int(round(frac * n)) for name, frac in _TEMPLATE_MIX}
    for name, want in counts.items():
        made = 0
        attempts = 0
        while made < want and attempts < want * 10:
            attempts += 1
            if name in ("path2", "path3"):
                hops = int(name[-1])
                s, r, o = facts[int(rng.integers(len(facts)))]
                seq = [r]
                node = o
                ok = True
                for _ in range(hops - 1):
                    node2 = extend(seq, node)
                    if node2 is None:
                        ok = False
                        break
                    node = node2
                if not ok or not admit(name, tuple(seq)):
                    continue
                key = ("path", tuple(seq))
                raw.setdefault(key, []).append(((s,), node))
            elif name == "inter":
                if not branchable:
                    break
                t = branchable[int(rng.integers(len(branchable)))]
                opts = incident[t]
                i, j = rng.choice(len(opts), size=2, replace=False)
                (r1, s1), (r2, s2) = opts[int(i)], opts[int(j)]
                b1, b2 = (kg.inverse(r1), s1), (kg.inverse(r2), s2)
                if b2 < b1:
                    b1, b2 = b2, b1
                if not admit(name, (b1[0], b2[0])):
                    continue
                key = ("inter", (b1[0], b2[0]))
                raw.setdefault(key, []).append(((b1[1], b2[1]), t))
            else:  # interproj
                if not deep:
                    break
                m = deep[int(rng.integers(len(deep)))]
                opts = incident[m]
                i, j, k3 = rng.choice(len(opts), size=3, replace=False)
                (r1, s1), (r2, s2) = opts[int(i)], opts[int(j)]
                r_out, t = opts[int(k3)]
                b1, b2 = (kg.inverse(r1), s1), (kg.inverse(r2), s2)
                if b2 < b1:
                    b1, b2 = b2, b1
                if not admit(name, (b1[0], b2[0], r_out)):
                    continue
                key = ("interproj", (b1[0], b2[0], r_out))
                raw.setdefault(key, []).append(((b1[1], b2[1]), t))
            made += 1
    groups: list[QueryGroup] = []
    for (template, rels), rows in sorted(raw.items()):
        n_anchor = 1 if template == "path" else 2
        anchors = tuple(
            np.asarray([row[0][i] for row in rows], dtype=int) for i in range(n_anchor)
        )
        template_name = template if template != "path" else f"path{len(rels)}"
        target_category = kg.relations[rels[-1]].object_category
        groups.append(
            QueryGroup(
                template=template_name,
                relations=rels,
                anchors=anchors,
                positives=np.asarray([row[1] for row in rows], dtype=int),
                target_category=target_category,
            )
        )
    return groups


# -- forward/backward over grouped batches -------------------------------------


def _group_forward(model: EmbeddingModel, group: QueryGroup, rows: np.ndarray, cache: dict | None = None):
    anchors = [col[rows] for col in group.anchors]
    if group.template.startswith("path"):
        proj_cache: list = [] if cache is not None else None
        h = model.entity_vectors(anchors[0])
        for r in group.relations:
            h = model.project(r, h, proj_cache)
        if cache is not None:
            cache["path"] = proj_cache
            cache["anchors"] = anchors
        return h
    if group.template == "inter":
        r1, r2 = group.relations
        c1: list = [] if cache is not None else None
        c2: list = [] if cache is not None else None
        ci: list = [] if cache is not None else None
        b1 = model.project(r1, model.entity_vectors(anchors[0]), c1)
        b2 = model.project(r2, model.entity_vectors(anchors[1]), c2)
        out = model.intersect([b1, b2], ci)
        if cache is not None:
            cache.update(b1=c1, b2=c2, inter=ci, anchors=anchors)
        return out
    r1, r2, r3 = group.relations
    c1 = [] if cache is not None else None
    c2 = [] if cache is not None else None
    ci = [] if cache is not None else None
    c3 = [] if cache is not None else None
    b1 = model.project(r1, model.entity_vectors(anchors[0]), c1)
    b2 = model.project(r2, model.entity_vectors(anchors[1]), c2)
    mid = model.intersect([b1, b2], ci)
    out = model.project(r3, mid, c3)
    if cache is not None:
        cache.update(b1=c1, b2=c2, inter=ci, tail=c3, anchors=anchors)
    return out


def _group_backward(model: EmbeddingModel, group: QueryGroup, cache: dict, d_out: np.ndarray, grads: dict):
    anchors = cache["anchors"]
    if group.template.startswith("path"):
        d_in = model.project_backward(cache["path"], d_out, grads)
        np.add.at(grads["ent"], anchors[0], d_in)
        return
    if group.template == "interproj":
        d_out = model.project_backward(cache["tail"], d_out, grads)
    d_b1, d_b2 = model.intersect_backward(cache["inter"][0], d_out, grads)
    d_a1 = model.project_backward(cache["b1"], d_b1, grads)
    d_a2 = model.project_backward(cache["b2"], d_b2, grads)
    np.add.at(grads["ent"], anchors[0], d_a1)
    np.add.at(grads["ent"], anchors[1], d_a2)


def _accumulate_margin_loss(
    model: EmbeddingModel,
    group: QueryGroup,
    rows: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    grads: dict[str, np.ndarray],
    scale: float,
    pull: float = 0.0,
) -> float:
    """Add loss gradients (times ``scale``) into ``grads``.

    The loss per (positive, negative) pair is the margin hinge; on top, each
    row contributes ``pull * d_pos`` so answers are drawn to small absolute
    distance.  Returns the summed loss so the caller can normalize.
    """
    cache: dict = {}
    q = _group_forward(model, group, rows, cache)
    ent = model.params["ent"]
    pos = group.positives[rows]
    pos_vecs = ent[pos]
    neg_vecs = ent[negatives]  # (B, J, dim)
    diff_pos = q - pos_vecs
    diff_neg = q[:, None, :] - neg_vecs
    d_pos = np.abs(diff_pos).sum(axis=1)
    d_neg = np.abs(diff_neg).sum(axis=2)
    n_j = negatives.shape[1]
    viol = margin + d_pos[:, None] - d_neg
    active = viol > 0
    total = float(viol[active].sum()) + pull * n_j * float(d_pos.sum())
    sign_pos = np.sign(diff_pos)
    sign_neg = np.sign(diff_neg)
    weight_pos = active.sum(axis=1) + pull * n_j
    d_q = scale * (weight_pos[:, None] * sign_pos - (active[:, :, None] * sign_neg).sum(axis=1))
    np.add.at(grads["ent"], pos, -scale * weight_pos[:, None] * sign_pos)
    np.add.at(
        grads["ent"],
        negatives.ravel(),
        (scale * active[:, :, None] * sign_neg).reshape(-1, model.dim),
    )
    _group_backward(model, group, cache, d_q, grads)
    return total


def margin_loss_and_grads(
    model: EmbeddingModel,
    group: QueryGroup,
    rows: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    pull: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over (positive, negative) pairs with sparse gradients."""
    grads: dict[str, np.ndarray] = {"ent": np.zeros_like(model.params["ent"])}
    n_pairs = len(rows) * negatives.shape[1]
    total = _accumulate_margin_loss(model, group, rows, negatives, margin, grads, 1.0 / n_pairs, pull)
    return total / n_pairs, grads


class Adam:
    """Adaptive-moment gradient descent over the model's parameter dict.

    Lazy variant: only parameters present in the gradient dict are stepped,
    and moments of untouched parameters stay frozen.  This keeps per-batch
    cost proportional to the relations the batch actually used.
    """

    def __init__(self, params: Mapping[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            params[key] -= self.lr * (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)  # type: ignore[return-value]


def training_queries_for(kg: KnowledgeGraph, cfg: TrainConfig) -> list[QueryGroup]:
    """The exact query set :func:`train` would fit on for this config."""
    _, rng_data, _ = _seed_streams(cfg.seed)
    return sample_training_queries(kg, cfg.n_queries, rng_data)


def _sample_negatives(
    kg: KnowledgeGraph,
    group: QueryGroup,
    rows: np.ndarray,
    n_negatives: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Negatives in three hardness tiers.

    A third are sibling answers (positives of other queries in the same
    group: same relation sequence, other anchors), which are exactly the
    close-by confusable entities score calibration must push away; a third
    are uniform over the target's category; the rest uniform over all
    entities.  Rare collisions with the true answer are re-rolled once.
    """
    n_ent = kg.n_entities
    pos = group.positives[rows]
    members = np.asarray(kg.category_members(group.target_category), dtype=int)
    n_sib = n_negatives // 3 if len(rows) > 1 else 0
    n_cat = n_negatives // 3 if len(members) > 1 else 0
    n_uni = n_negatives - n_sib - n_cat
    parts = []
    if n_sib:
        all_pos = group.positives
        parts.append(all_pos[rng.integers(0, len(all_pos), size=(len(rows), n_sib))])
    if n_cat:
        parts.append(members[rng.integers(0, len(members), size=(len(rows), n_cat))])
    if n_uni:
        parts.append(rng.integers(0, n_ent, size=(len(rows), n_uni)))
    negs = np.concatenate(parts, axis=1)
    clash = negs == pos[:, None]
    if clash.any():
        negs[clash] = rng.integers(0, n_ent, size=int(clash.sum()))
    return negs


def train(kg: KnowledgeGraph, cfg: TrainConfig) -> EmbeddingModel:
    """Fit the reasoner on queries sampled from ``kg``; deterministic under seed.

    Per optimizer step, row slices from several groups are packed together
    until the batch size is reached, which keeps the expensive entity-table
    update amortized over a full batch even when individual relation
    sequences are rare.
    """
    if kg.n_entities == 0 or not kg.facts:
        raise KgError("cannot train on an empty graph")
    rng_model, rng_data, rng = _seed_streams(cfg.seed)
    model = EmbeddingModel(kg.n_entities, kg.n_relations, cfg.dim, cfg.depth, rng_model)
    groups = sample_training_queries(kg, cfg.n_queries, rng_data)
    if not groups:
        raise KgError("no training queries could be sampled")
    optim = Adam(model.params, cfg.learning_rate)
    for epoch in range(cfg.epochs):
        pieces: list[tuple[int, np.ndarray]] = []
        for gi, group in enumerate(groups):
            order = rng.permutation(group.size())
            for start in range(0, group.size(), cfg.batch_size):
                pieces.append((gi, order[start : start + cfg.batch_size]))
        piece_order = rng.permutation(len(pieces))
        epoch_loss = 0.0
        epoch_pairs = 0
        idx = 0
        while idx < len(piece_order):
            step_pieces = []
            step_rows = 0
            while idx < len(piece_order) and step_rows < cfg.batch_size:
                piece = pieces[int(piece_order[idx])]
                step_pieces.append(piece)
                step_rows += len(piece[1])
                idx += 1
            n_pairs = step_rows * cfg.negatives
            grads: dict[str, np.ndarray] = {"ent": np.zeros_like(model.params["ent"])}
            step_loss = 0.0
            for gi, rows in step_pieces:
                group = groups[gi]
                negs = _sample_negatives(kg, group, rows, cfg.negatives, rng)
                step_loss += _accumulate_margin_loss(
                    model, group, rows, negs, cfg.margin, grads, 1.0 / n_pairs, cfg.positive_pull
                )
            optim.step(model.params, grads)
            ent = model.params["ent"]
            norms = np.linalg.norm(ent, axis=1)
            over = norms > 1.0
            if over.any():  # unit-ball constraint keeps distances on a fixed scale
                ent[over] /= norms[over][:, None]
            epoch_loss += step_loss
            epoch_pairs += n_pairs
        mean_loss = epoch_loss / max(1, epoch_pairs)
        model.loss_trace.append(mean_loss)
        if not np.isfinite(mean_loss) or not model.check_finite():
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch} (loss={mean_loss!r})")
    return model


def hits_at_k(model: EmbeddingModel, groups: Iterable[QueryGroup], k: int, chunk: int = 32) -> float:
    """Fraction of grouped queries whose known answer ranks in the top-k."""
    ent = model.params["ent"]
    total = 0
    hit = 0
    for group in groups:
        size = group.size()
        for start in range(0, size, chunk):
            rows = np.arange(start, min(start + chunk, size))
            q = _group_forward(model, group, rows)
            pos = group.positives[rows]
            dists = np.abs(q[:, None, :] - ent[None, :, :]).sum(axis=2)
            d_pos = dists[np.arange(len(rows)), pos]
            better = (dists < d_pos[:, None]).sum(axis=1)
            tied_earlier = ((dists == d_pos[:, None]) & (np.arange(model.n_entities)[None, :] < pos[:, None])).sum(axis=1)
            rank = better + tied_earlier
            hit += int((rank < k).sum())
            total += len(rows)
    return hit / total if total else 0.0


# -- checkpoint io -------------------------------------------------------------


def save_model(model: EmbeddingModel, path) -> None:
    """Versioned little-endian binary checkpoint (float32 body)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII", CHECKPOINT_VERSION, model.dim, model.depth, model.n_entities, model.n_relations
            )
        )
        def dump(arr):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

        dump(model.params["ent"])
        for r in range(model.n_relations):
            for layer in range(model.depth):
                dump(model.params[f"proj:{r}:W{layer}"])
                dump(model.params[f"proj:{r}:b{layer}"])
        dump(model.params["inter:W"])
        dump(model.params["inter:b"])


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        version, dim, depth, n_entities, n_relations = struct.unpack("<IIIII", fh.read(20))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        model = EmbeddingModel(n_entities, n_relations, dim, depth, np.random.default_rng(0))

        def pull(shape):
            count = int(np.prod(shape))
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError("truncated checkpoint")
            return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

        model.params["ent"] = pull((n_entities, dim))
        for r in range(n_relations):
            for layer in range(depth):
                model.params[f"proj:{r}:W{layer}"] = pull((dim, dim))
                model.params[f"proj:{r}:b{layer}"] = pull((dim,))
        model.params["inter:W"] = pull((dim, dim))
        model.params["inter:b"] = pull((dim,))
        if fh.read(1):
            raise ValueError("trailing bytes in checkpoint")
    return model
