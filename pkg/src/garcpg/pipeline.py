"""End-to-end query path: compose, embed, match, fuse."""

from __future__ import annotations

from dataclasses import dataclass, field

from .embedder import Embedder
from .errors import FingerprintMismatch
from .query import Case, WeightingConfig, compose_case, embed_query
from .retrieval import RetrievalConfig, SystemOutput, fuse, match_topk
from .snippet_kb import KnowledgeBase


@dataclass(frozen=True)
class PipelineConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)

    def to_json(self) -> dict:
        return {"retrieval": self.retrieval.to_json(), "weighting": self.weighting.to_json()}


def check_fingerprint(kb: KnowledgeBase, embedder: Embedder) -> None:
    if kb.embedder_fingerprint is None:
        raise FingerprintMismatch("knowledge base has not been embedded")
    if embedder.fingerprint != kb.embedder_fingerprint:
        raise FingerprintMismatch(
            f"embedder {embedder.fingerprint.name}/{embedder.fingerprint.params_digest[:12]} does not "
            f"match knowledge base {kb.embedder_fingerprint.name}/{kb.embedder_fingerprint.params_digest[:12]}"
        )


def answer_case(case: Case, kb: KnowledgeBase, embedder: Embedder, cfg: PipelineConfig) -> SystemOutput:
    composed = compose_case(case, cfg.weighting)
    q = embed_query(composed, embedder)
    candidates = match_topk(q, kb, cfg.retrieval)
    echo = {**cfg.to_json(), "embedder": kb.embedder_fingerprint.to_dict() if kb.embedder_fingerprint else None}
    return fuse(case.diagnosis, candidates, kb, cfg.retrieval, config_echo=echo)
