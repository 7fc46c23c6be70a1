"""Retrieval evaluation: correctness criteria, ranked metrics, corpus runs and ablations."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .embedder import Embedder, tokenize
from .errors import GarError, SchemaError, ScorerFailure, ValidationError
from .pipeline import PipelineConfig, answer_case
from .query import Case, EhrRecord, case_from_json, case_to_json
from .snippet_kb import KnowledgeBase

log = logging.getLogger(__name__)

K_GRID = (1, 3, 5, 10)
DEFAULT_THETA = 0.72

Scorer = Callable[[str, str], float]

# Abbreviations and unit tokens after which a period does not end a sentence.
_NO_SPLIT_TOKENS = frozenset({
    "vs", "approx", "fig", "figs", "no", "nos", "dr", "al", "cf", "etc", "ref", "vol",
    "hr", "hrs", "wk", "wks", "mo", "mos", "yr", "yrs",
})
_DOTTED_ABBREV_RE = re.compile(r"^(?:[A-Za-z]\.)+[A-Za-z]$")
_BOUNDARY_RE = re.compile(r"[.!?](?=\s|$)")


def _guarded(text: str, pos: int) -> bool:
    """True when the period at ``pos`` belongs to an abbreviation or unit token."""
    start = pos
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    word = text[start:pos].lstrip("([\"'")
    if len(word) == 1 and word.isalpha() and word.isupper():
        return True
    if _DOTTED_ABBREV_RE.match(word):
        return True
    return word.lower() in _NO_SPLIT_TOKENS


def sentence_split(text: str) -> list[str]:
    sentences = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        if m.group() == "." and _guarded(text, m.start()):
            continue
        sentences.append(text[start:m.end()])
        start = m.end()
    sentences.append(text[start:])
    return [s for s in (" ".join(part.split()) for part in sentences) if s]


def exact_sentence_overlap(candidate: str, reference: str) -> bool:
    return bool(set(sentence_split(candidate)) & set(sentence_split(reference)))


def token_f1_score(candidate: str, reference: str) -> float:
    cand, ref = Counter(tokenize(candidate)), Counter(tokenize(reference))
    if not cand or not ref:
        return 0.0
    common = sum((cand & ref).values())
    if common == 0:
        return 0.0
    p = common / sum(cand.values())
    r = common / sum(ref.values())
    return 2 * p * r / (p + r)


def semantic_match(candidate: str, reference: str, scorer: Scorer = token_f1_score,
                   theta: float = DEFAULT_THETA) -> bool:
    if not 0.0 < theta <= 1.0:
        raise ValidationError("theta must lie in (0, 1]")
    return scorer(candidate, reference) >= theta


class RemoteScorer:
    """``POST {endpoint}/score`` with ``{"pairs": [[cand, ref], ...]}`` returning ``{"scores": [...]}``."""

    def __init__(self, endpoint: str, timeout: float = 30.0) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        if not pairs:
            return []
        try:
            resp = httpx.post(f"{self.endpoint}/score", json={"pairs": [list(p) for p in pairs]},
                              timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise ScorerFailure(f"scorer unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ScorerFailure(f"scorer returned HTTP {resp.status_code}")
        try:
            scores = [float(s) for s in resp.json()["scores"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ScorerFailure(f"malformed scorer response: {exc}") from exc
        if len(scores) != len(pairs):
            raise ScorerFailure(f"scorer returned {len(scores)} scores for {len(pairs)} pairs")
        return scores

    def __call__(self, candidate: str, reference: str) -> float:
        return self.score_pairs([(candidate, reference)])[0]


class CriterionMode(str, Enum):
    EXACT_SENTENCE_OVERLAP = "exact_sentence_overlap"
    SEMANTIC_THRESHOLD = "semantic_threshold"


@dataclass(frozen=True)
class CorrectnessCriterion:
    mode: CriterionMode = CriterionMode.EXACT_SENTENCE_OVERLAP
    theta: float = DEFAULT_THETA
    scorer: Scorer = field(default=token_f1_score, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", CriterionMode(self.mode))
        if self.mode is CriterionMode.SEMANTIC_THRESHOLD and not 0.0 < self.theta <= 1.0:
            raise ValidationError("theta must lie in (0, 1]")

    def judge(self, candidate: str, reference: str) -> bool:
        if self.mode is CriterionMode.EXACT_SENTENCE_OVERLAP:
            return exact_sentence_overlap(candidate, reference)
        return semantic_match(candidate, reference, self.scorer, self.theta)

    def judge_any(self, candidate: str, references: Sequence[str]) -> bool:
        if not references:
            return False
        if self.mode is CriterionMode.SEMANTIC_THRESHOLD and isinstance(self.scorer, RemoteScorer):
            scores = self.scorer.score_pairs([(candidate, r) for r in references])
            return any(s >= self.theta for s in scores)
        return any(self.judge(candidate, r) for r in references)

    def to_json(self) -> dict:
        out: dict = {"mode": self.mode.value}
        if self.mode is CriterionMode.SEMANTIC_THRESHOLD:
            out["theta"] = self.theta
            out["scorer"] = self.scorer.endpoint if isinstance(self.scorer, RemoteScorer) else "token_f1"
        return out


def parse_criterion_spec(spec: str) -> CorrectnessCriterion:
    """``exact`` or ``semantic[:theta=0.72][:url=http://host:port]``."""
    kind, _, rest = spec.partition(":")
    if kind == "exact" and not rest:
        return CorrectnessCriterion(CriterionMode.EXACT_SENTENCE_OVERLAP)
    if kind != "semantic":
        raise ValidationError(f"unknown criterion {spec!r}")
    theta = DEFAULT_THETA
    scorer: Scorer = token_f1_score
    # url values contain ':' themselves, so take everything after url= verbatim.
    if "url=" in rest:
        rest, _, url = rest.partition("url=")
        scorer = RemoteScorer(url)
        rest = rest.rstrip(":")
    for item in filter(None, rest.split(":")):
        key, sep, value = item.partition("=")
        if key != "theta" or not sep:
            raise ValidationError(f"bad criterion parameter {item!r}")
        theta = float(value)
    return CorrectnessCriterion(CriterionMode.SEMANTIC_THRESHOLD, theta, scorer)


# -- ranked metrics --------------------------------------------------------

def precision_at_k(flags: Sequence[bool], k: int) -> float:
    if k < 1:
        raise ValidationError("K must be >= 1")
    return sum(1 for f in flags[:k] if f) / k


def hits_at_k(per_query_flags: Sequence[Sequence[bool]], k: int) -> float:
    if not per_query_flags:
        raise ValidationError("at least one query is required")
    if k < 1:
        raise ValidationError("K must be >= 1")
    return sum(1 for flags in per_query_flags if any(flags[:k])) / len(per_query_flags)


def mean_precision_at_k(per_query_flags: Sequence[Sequence[bool]], k: int) -> float:
    """Corpus mean of Precision@K, computed as one exact ratio."""
    if not per_query_flags:
        raise ValidationError("at least one query is required")
    if k < 1:
        raise ValidationError("K must be >= 1")
    return sum(sum(1 for f in flags[:k] if f) for flags in per_query_flags) / (k * len(per_query_flags))


def first_relevant_rank(flags: Sequence[bool]) -> int | None:
    for i, f in enumerate(flags, 1):
        if f:
            return i
    return None


def mrr(ranks: Sequence[int | None]) -> float:
    """Mean reciprocal first-relevant rank; a query with no relevant result adds 0."""
    if not ranks:
        raise ValidationError("at least one query is required")
    total = sum((Fraction(1, r) for r in ranks if r), Fraction(0))
    return float(total / len(ranks))


# -- ground truth and corpus evaluation -----------------------------------

@dataclass(frozen=True)
class GroundTruthCase:
    case_id: str
    case: Case
    relevant_ids: tuple[int, ...] = ()
    relevant_texts: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.relevant_ids and not self.relevant_texts:
            raise ValidationError(f"case {self.case_id}: no relevant snippets")

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "query": case_to_json(self.case),
            "relevant_ids": list(self.relevant_ids),
            "relevant_texts": list(self.relevant_texts),
        }


def ground_truth_from_json(data: dict) -> GroundTruthCase:
    if not isinstance(data, dict):
        raise SchemaError("ground-truth line must be an object")
    allowed = {"case_id", "query", "relevant_ids", "relevant_texts"}
    if not {"case_id", "query"} <= data.keys() or data.keys() - allowed:
        raise SchemaError(f"ground-truth case needs case_id and query, got {sorted(data)}")
    ids = data.get("relevant_ids", [])
    texts = data.get("relevant_texts", [])
    if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
        raise SchemaError("relevant_ids must be a list of integers")
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise SchemaError("relevant_texts must be a list of strings")
    try:
        return GroundTruthCase(str(data["case_id"]), case_from_json(data["query"]), tuple(ids), tuple(texts))
    except ValidationError as exc:
        raise SchemaError(str(exc)) from exc


def load_ground_truth(path: str | Path) -> list[GroundTruthCase]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(ground_truth_from_json(json.loads(line)))
        except (json.JSONDecodeError, SchemaError) as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return out


def dump_ground_truth(cases: Iterable[GroundTruthCase]) -> str:
    return "".join(json.dumps(c.to_json(), ensure_ascii=False) + "\n" for c in cases)


@dataclass
class MetricsReport:
    precision_at: dict[int, float]
    hits_at: dict[int, float]
    mrr: float
    ranks: dict[str, int | None]
    n: int
    errors: dict[str, str] = field(default_factory=dict)
    label: str = "full"

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "n": self.n,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "hits_at": {str(k): v for k, v in self.hits_at.items()},
            "mrr": self.mrr,
            "ranks": self.ranks,
            "errors": self.errors,
        }


def label_results(gt: GroundTruthCase, retrieved: Sequence[tuple[int, str]],
                  criterion: CorrectnessCriterion) -> list[bool]:
    """Correctness flag per retrieved (snippet id, content), id match taking precedence."""
    relevant = set(gt.relevant_ids)
    return [sid in relevant or criterion.judge_any(content, gt.relevant_texts)
            for sid, content in retrieved]


def evaluate_corpus(
    cases: Sequence[GroundTruthCase],
    kb: KnowledgeBase,
    embedder: Embedder,
    cfg: PipelineConfig,
    criterion: CorrectnessCriterion | None = None,
    k_grid: Sequence[int] = K_GRID,
    label: str = "full",
) -> MetricsReport:
    criterion = criterion or CorrectnessCriterion()
    flags_by_case: dict[str, list[bool]] = {}
    errors: dict[str, str] = {}
    for gt in cases:
        try:
            missing = [i for i in gt.relevant_ids if i not in kb]
            if missing:
                raise SchemaError(f"relevant ids {missing} are not in the knowledge base")
            out = answer_case(gt.case, kb, embedder, cfg)
            retrieved = [(r.snippet.id, r.snippet.text.content) for r in out.recommendations]
            flags_by_case[gt.case_id] = label_results(gt, retrieved, criterion)
        except GarError as exc:
            log.warning("case %s failed: %s", gt.case_id, exc)
            errors[gt.case_id] = str(exc)

    order = sorted(flags_by_case)
    per_query = [flags_by_case[c] for c in order]
    ranks = {c: first_relevant_rank(flags_by_case[c]) for c in order}
    if not per_query:
        return MetricsReport({k: 0.0 for k in k_grid}, {k: 0.0 for k in k_grid}, 0.0, {}, 0, errors, label)
    return MetricsReport(
        precision_at={k: mean_precision_at_k(per_query, k) for k in k_grid},
        hits_at={k: hits_at_k(per_query, k) for k in k_grid},
        mrr=mrr([ranks[c] for c in order]),
        ranks=ranks,
        n=len(per_query),
        errors=errors,
        label=label,
    )


ABLATION_ARMS = ("diagnosis_only", "diagnosis_current", "full")


def ablate_case(case: Case, arm: str) -> Case:
    if arm == "diagnosis_only":
        return replace(case, current=EhrRecord.current(case.current.timestamp, ""), history=())
    if arm == "diagnosis_current":
        return replace(case, history=())
    if arm == "full":
        return case
    raise ValidationError(f"unknown ablation arm {arm!r}")


def run_ablation(
    cases: Sequence[GroundTruthCase],
    kb: KnowledgeBase,
    embedder: Embedder,
    cfg: PipelineConfig,
    criterion: CorrectnessCriterion | None = None,
    k_grid: Sequence[int] = K_GRID,
) -> list[MetricsReport]:
    """One report per arm: diagnosis only, plus current record, plus history."""
    rows = []
    for arm in ABLATION_ARMS:
        arm_cases = [replace(gt, case=ablate_case(gt.case, arm)) for gt in cases]
        rows.append(evaluate_corpus(arm_cases, kb, embedder, cfg, criterion, k_grid, label=arm))
    return rows


def format_table(rows: Sequence[MetricsReport]) -> str:
    if not rows:
        return "(no rows)\n"
    ks = list(rows[0].precision_at)
    header = ["config", "N", *(f"P@{k}" for k in ks), *(f"Hits@{k}" for k in ks), "MRR", "errors"]
    body = [
        [r.label, str(r.n), *(f"{r.precision_at[k]:.4f}" for k in ks),
         *(f"{r.hits_at[k]:.4f}" for k in ks), f"{r.mrr:.4f}", str(len(r.errors))]
        for r in rows
    ]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda line: "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                                 for i, (cell, w) in enumerate(zip(line, widths)))
    return "\n".join(fmt(line) for line in [header, *body]) + "\n"


def report_json(rows: Sequence[MetricsReport], config: Mapping) -> str:
    return json.dumps({"rows": [r.to_json() for r in rows], "config": dict(config)},
                      indent=2, sort_keys=True) + "\n"
