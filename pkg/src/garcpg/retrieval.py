"""Exact cosine search over a knowledge base and the post-retrieval fusion step."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .embedder import EmbeddingVector, cosine_similarity
from .errors import DimensionMismatch, EmptyKnowledgeBase, FingerprintMismatch, ValidationError
from .query import DiagnosticOutput
from .snippet_kb import Category, KnowledgeBase, Snippet


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 5
    tau: float = 0.30
    dedup_threshold: float = 0.95
    context: Category | None = None
    context_boost: float = 1.1

    def __post_init__(self) -> None:
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ValidationError("k must be a positive integer")
        if not math.isfinite(self.tau):
            raise ValidationError("tau must be finite")
        if not self.dedup_threshold >= 0:
            raise ValidationError("dedup_threshold must be >= 0")
        if not self.context_boost >= 1.0:
            raise ValidationError("context_boost must be >= 1")
        if self.context is not None:
            object.__setattr__(self, "context", Category(self.context))

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "tau": self.tau,
            "dedup_threshold": self.dedup_threshold,
            "context": self.context.value if self.context else None,
            "context_boost": self.context_boost,
        }


@dataclass(frozen=True)
class ScoredSnippet:
    snippet_id: int
    score: float
    rank: int


@dataclass(frozen=True)
class Recommendation:
    scored: ScoredSnippet
    snippet: Snippet

    @property
    def provenance(self) -> str:
        return self.snippet.provenance


@dataclass(frozen=True)
class SystemOutput:
    diagnosis: DiagnosticOutput
    recommendations: tuple[Recommendation, ...]
    config_echo: dict

    def to_json(self) -> dict:
        return {
            "diagnosis": self.diagnosis.to_json(),
            "recommendations": [
                {
                    "rank": r.scored.rank,
                    "score": r.scored.score,
                    "snippet_id": r.snippet.id,
                    "chapter": r.snippet.text.chapter,
                    "section": r.snippet.text.section,
                    "content": r.snippet.text.content,
                    "category": r.snippet.category.value,
                    "provenance": r.provenance,
                    "extras": [[k, v] for k, v in r.snippet.extras],
                }
                for r in self.recommendations
            ],
            "config": self.config_echo,
        }

    def render(self) -> str:
        """Canonical JSON text; the CLI and the HTTP service both emit exactly this."""
        return json.dumps(self.to_json(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _rerank(items: Sequence[ScoredSnippet]) -> list[ScoredSnippet]:
    return [replace(s, rank=i) for i, s in enumerate(items, 1)]


def match_topk(q: EmbeddingVector, kb: KnowledgeBase, cfg: RetrievalConfig) -> list[ScoredSnippet]:
    """Snippets with cosine >= tau, best first (ties by ascending id), at most k."""
    if not kb.snippets:
        raise EmptyKnowledgeBase("knowledge base has no snippets")
    if q.fingerprint != kb.embedder_fingerprint:
        raise FingerprintMismatch(
            f"query embedder {q.fingerprint} does not match knowledge base {kb.embedder_fingerprint}"
        )
    if q.dim != kb.dimension:
        raise DimensionMismatch(f"query dimension {q.dim} != knowledge base {kb.dimension}")
    mat = kb.matrix
    qa = q.array
    # Row-wise multiply-and-sum reduces every row identically, so identical
    # vectors get bit-identical scores and the id tie-break is honoured.
    dots = (mat * qa).sum(axis=1)
    scores = dots / (np.linalg.norm(mat, axis=1) * np.linalg.norm(qa))
    ids = kb.id_array
    keep = np.nonzero(scores >= cfg.tau)[0]
    order = keep[np.lexsort((ids[keep], -scores[keep]))][: cfg.k]
    return [ScoredSnippet(int(ids[i]), float(scores[i]), r) for r, i in enumerate(order, 1)]


def deduplicate(candidates: Sequence[ScoredSnippet], kb: KnowledgeBase, theta_dup: float) -> list[ScoredSnippet]:
    """Greedy top-down scan dropping candidates too similar to one already kept."""
    kept: list[ScoredSnippet] = []
    kept_vecs: list[tuple[float, ...]] = []
    for c in candidates:
        vec = kb.get(c.snippet_id).embedding
        if all(cosine_similarity(vec, other) < theta_dup for other in kept_vecs):
            kept.append(c)
            kept_vecs.append(vec)
    return _rerank(kept)


def context_rerank(
    candidates: Sequence[ScoredSnippet],
    kb: KnowledgeBase,
    context: Category | None,
    boost: float,
) -> list[ScoredSnippet]:
    """Reorder by score, multiplied by ``boost`` for snippets in the ``context`` category.

    The stored score stays the raw cosine.
    """
    if boost < 1.0:
        raise ValidationError("boost must be >= 1")
    if context is None or boost == 1.0:
        return _rerank(candidates)
    context = Category(context)

    def effective(c: ScoredSnippet) -> float:
        return c.score * boost if kb.get(c.snippet_id).category is context else c.score

    return _rerank(sorted(candidates, key=lambda c: (-effective(c), c.snippet_id)))


def fuse(
    d: DiagnosticOutput,
    candidates: Sequence[ScoredSnippet],
    kb: KnowledgeBase,
    cfg: RetrievalConfig,
    config_echo: dict | None = None,
) -> SystemOutput:
    """Deduplicate, rerank by context and attach the stored snippets unmodified."""
    ranked = context_rerank(deduplicate(candidates, kb, cfg.dedup_threshold), kb,
                            cfg.context, cfg.context_boost)
    recs = tuple(Recommendation(s, kb.get(s.snippet_id)) for s in ranked)
    echo = config_echo if config_echo is not None else {"retrieval": cfg.to_json()}
    return SystemOutput(d, recs, echo)
