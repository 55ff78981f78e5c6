"""Victim-facing reasoning API: filtering, defenses, budgets, HTTP adapter.

The service owns the graph, the private split, and a ranking backend (the
trained embedding model, or the exact reasoner for ground-truth setups).  Its
single choke point, :meth:`KgrService.submit_json`, resolves a name-based
query payload, answers it, strips every private entity, applies the
configured defense policy, and charges the session budget.  The HTTP app is
a thin adapter over that method, so in-process and networked callers get
byte-identical behavior.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .kg import KgError, KgSplit, KnowledgeGraph
from .model import EmbeddingModel, RankedAnswer, answer_ranked, embed_query, score_from_distance
from .queries import ConjunctiveQuery, PathQuery, QueryStructureError, exact_answer, query_from_json


class QuotaExhaustedError(Exception):
    """Session has no queries left; maps to HTTP 429."""


class BadQueryError(ValueError):
    """Structurally malformed query; maps to HTTP 400 and is never charged."""


@dataclass(frozen=True)
class DefensePolicy:
    """Response-shaping knobs: truncation, concealment, shuffling, noise."""

    top_k: int = 10
    reveal_scores: bool = True
    shuffle_ranking: bool = False
    laplace_epsilon: float | None = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.shuffle_ranking and self.reveal_scores:
            raise ValueError("shuffled rankings require concealed scores")
        if self.laplace_epsilon is not None and self.laplace_epsilon <= 0:
            raise ValueError("laplace_epsilon must be positive")


class BudgetLedger:
    """Per-session query meter with linearizable decrement."""

    def __init__(self, initial: int):
        if initial < 0:
            raise ValueError("budget cannot be negative")
        self.initial = initial
        self.remaining = initial
        self.issued = 0
        self._lock = threading.Lock()

    def charge(self) -> int:
        with self._lock:
            if self.remaining <= 0:
                raise QuotaExhaustedError("query budget exhausted")
            self.remaining -= 1
            self.issued += 1
            return self.remaining


@dataclass(frozen=True)
class ApiResponse:
    """Filtered, policy-shaped answer list plus the remaining budget."""

    entries: tuple[tuple[int, float | None], ...]
    budget_remaining: int

    def entity_ids(self) -> tuple[int, ...]:
        return tuple(e for e, _ in self.entries)


def laplace_perturb(score: float, epsilon: float, rng: np.random.Generator) -> float:
    """Score plus Laplace(1/epsilon) noise, clamped back into [0, 1]."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return float(np.clip(score + rng.laplace(0.0, 1.0 / epsilon), 0.0, 1.0))


class RankingBackend(Protocol):
    def answer(self, query: ConjunctiveQuery | PathQuery) -> RankedAnswer: ...


class ModelBackend:
    """Embedding-model ranking over the full entity set."""

    def __init__(self, model: EmbeddingModel):
        self.model = model

    def answer(self, query):
        return answer_ranked(self.model, query, self.model.n_entities)


class ExactBackend:
    """Ground-truth reasoner; members score 1.0, ordered by entity id."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg

    def answer(self, query):
        members = sorted(exact_answer(self.kg, query))
        return RankedAnswer(tuple((e, 1.0) for e in members))


class _Session:
    def __init__(self, budget: int, seed: int):
        self.ledger = BudgetLedger(budget)
        self.rng = np.random.default_rng(seed)


class KgrService:
    """The reasoning API over one graph, one split, one policy."""

    def __init__(
        self,
        kg: KnowledgeGraph,
        split: KgSplit | None,
        backend: RankingBackend,
        policy: DefensePolicy,
        budget_per_session: int,
        seed: int = 0,
    ):
        self.kg = kg
        self.split = split
        self.backend = backend
        self.policy = policy
        self.budget_per_session = budget_per_session
        self.seed = seed
        self._private = split.private_entities if split is not None else frozenset()
        self._private_names = frozenset(kg.entities[e].name for e in self._private)
        self._sessions: dict[str, _Session] = {}
        self._sessions_lock = threading.Lock()

    # -- sessions -------------------------------------------------------------

    def _session(self, token: str) -> _Session:
        with self._sessions_lock:
            sess = self._sessions.get(token)
            if sess is None:
                digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
                sess = _Session(self.budget_per_session, int.from_bytes(digest[:8], "little"))
                self._sessions[token] = sess
            return sess

    def budget_remaining(self, token: str) -> int:
        return self._session(token).ledger.remaining

    def budget_issued(self, token: str) -> int:
        return self._session(token).ledger.issued

    # -- metadata ---------------------------------------------------------------

    def meta(self) -> dict:
        """Public schema: relation vocabulary and category list, never entities."""
        return {
            "categories": list(self.kg.categories),
            "relations": [
                {
                    "name": rel.name,
                    "subject_category": self.kg.categories[rel.subject_category],
                    "object_category": self.kg.categories[rel.object_category],
                    "inverse": self.kg.relations[rel.inverse].name,
                }
                for rel in self.kg.relations
            ],
        }

    # -- querying -----------------------------------------------------------------

    def submit_query(self, token: str, query: ConjunctiveQuery | PathQuery) -> ApiResponse:
        """Answer a resolved query under the defense policy; charges one unit."""
        session = self._session(token)
        remaining = session.ledger.charge()
        ranked = self.backend.answer(query)
        entries = [(e, s) for e, s in ranked.entries if e not in self._private]
        if self.policy.laplace_epsilon is not None and entries:
            scores = np.asarray([s for _, s in entries])
            noisy = np.clip(
                scores + session.rng.laplace(0.0, 1.0 / self.policy.laplace_epsilon, size=len(entries)),
                0.0,
                1.0,
            )
            ids = np.asarray([e for e, _ in entries])
            order = np.lexsort((ids, -noisy))
            entries = [(int(ids[i]), float(noisy[i])) for i in order]
        entries = entries[: self.policy.top_k]
        if self.policy.shuffle_ranking and len(entries) > 1:
            perm = session.rng.permutation(len(entries))
            entries = [entries[int(i)] for i in perm]
        if not self.policy.reveal_scores:
            entries = [(e, None) for e, _ in entries]
        return ApiResponse(entries=tuple(entries), budget_remaining=remaining)

    def submit_json(self, token: str, payload: dict) -> dict:
        """Resolve and answer a name-based query payload.

        Structural problems raise :class:`BadQueryError` without charging.
        Parsed queries naming unknown entities or relations are charged and
        answered with an empty list; private entity names count as unknown,
        so their existence is not observable through this surface.
        """
        try:
            query = query_from_json(self.kg, payload)
            private_reference = any(
                name in self._private_names for name in (payload.get("anchors") or {}).values()
            )
        except QueryStructureError as exc:
            raise BadQueryError(str(exc)) from exc
        except KgError:
            query = None
            private_reference = True
        if query is not None and not private_reference:
            response = self.submit_query(token, query)
        else:
            remaining = self._session(token).ledger.charge()
            response = ApiResponse(entries=(), budget_remaining=remaining)
        return self._response_json(response)

    def _response_json(self, response: ApiResponse) -> dict:
        answers = []
        for e, s in response.entries:
            item: dict = {"entity": self.kg.entities[e].name}
            if s is not None:
                item["score"] = s
            answers.append(item)
        return {"answers": answers, "budget_remaining": response.budget_remaining}


def make_utility_answerer(service: KgrService, token: str):
    """Adapter used by evaluation: query ids in, (id, score) entries out."""

    def answer(query: ConjunctiveQuery | PathQuery) -> tuple[tuple[int, float | None], ...]:
        return service.submit_query(token, query).entries

    return answer


# -- HTTP adapter ---------------------------------------------------------------


def create_app(service: KgrService):
    """FastAPI app exposing POST /v1/query and GET /v1/meta."""
    from fastapi import FastAPI, Header, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="kgx reasoning api")

    @app.get("/v1/meta")
    def meta():
        return service.meta()

    @app.post("/v1/query")
    async def query(request: Request, x_session_token: str | None = Header(default=None)):
        if not x_session_token:
            return JSONResponse({"error": "missing_session_token"}, status_code=400)
        try:
            payload = await request.json()
        except Exception:
            return JSONResponse({"error": "invalid_json"}, status_code=400)
        try:
            return service.submit_json(x_session_token, payload)
        except BadQueryError as exc:
            return JSONResponse({"error": "bad_query", "detail": str(exc)}, status_code=400)
        except QuotaExhaustedError:
            return JSONResponse({"error": "quota_exhausted"}, status_code=429)

    return app
