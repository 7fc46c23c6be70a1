"""Annotated guideline documents to snippets, relevance filtering, extraction scoring.

Document format::

    disease_domain: Hypertension
    title: 2023 ESH Guidelines for the management of arterial hypertension
    year: 2023
    organization: European Society of Hypertension

    # BP MEASUREMENT AND MONITORING
    ## Office BP measurements
    [[snippet category=measurement_monitoring CoR=I LoE=A]]
    Office BP is recommended for diagnosis of hypertension.
    [[/snippet]]

Attribute values containing spaces are double-quoted. Only ``#`` (chapter)
and ``##`` (section) headings are recognised.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .embedder import tokenize
from .errors import EmptyReference, ParseError, ValidationError
from .snippet_kb import (
    CLINICAL_CATEGORIES,
    CONTENT_KINDS,
    Category,
    Snippet,
    SnippetMetadata,
    StructuredText,
)

BLOCK_OPEN_RE = re.compile(r"^\[\[snippet(?P<attrs>(?:\s[^\]]*)?)\]\]\s*$")
BLOCK_CLOSE = "[[/snippet]]"
HEADING_RE = re.compile(r"^(?P<hashes>#+)\s+(?P<title>.+?)\s*$")
EXTRA_ATTRS = ("url", "caption", "CoR", "LoE")
KNOWN_ATTRS = ("category", "kind", *EXTRA_ATTRS)
FRONT_MATTER_KEYS = ("disease_domain", "title", "year", "organization")

DEFAULT_CATEGORY_KEYWORDS: dict[Category, tuple[str, ...]] = {
    Category.CLASSIFICATION_DIAGNOSTIC: (
        "diagnosis", "classification", "definition", "criteria", "grade", "stage",
    ),
    Category.MEASUREMENT_MONITORING: (
        "measurement", "monitoring", "blood pressure", "follow-up", "home", "ambulatory",
    ),
    Category.INTERVENTION_TREATMENT: (
        "treatment", "therapy", "drug", "target", "lifestyle", "initiation",
    ),
}


@dataclass(frozen=True)
class GuidelineDocument:
    source_id: str
    metadata: SnippetMetadata
    body: str
    # Line number of the first body line within the source file.
    body_offset: int = 1

    @property
    def snippet_count(self) -> int:
        return sum(1 for line in self.body.splitlines() if BLOCK_OPEN_RE.match(line.strip()))


@dataclass(frozen=True)
class ExtractionConfig:
    relevance_threshold: float = 0.5
    category_keywords: dict[Category, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_CATEGORY_KEYWORDS)
    )

    def __post_init__(self) -> None:
        # Thresholds above 1 are accepted and reject everything.
        if not self.relevance_threshold >= 0.0:
            raise ValidationError("relevance_threshold must be >= 0")
        for cat in CLINICAL_CATEGORIES:
            if not self.category_keywords.get(cat):
                raise ValidationError(f"no keywords configured for {cat.value}")


@dataclass(frozen=True)
class ExtractionReport:
    precision_pct: float
    hit_rate_pct: float
    coverage_pct: float
    matched: int
    matched_references: int
    candidate_total: int
    reference_total: int

    def as_row(self) -> tuple[float, float, float]:
        return (self.precision_pct, self.hit_rate_pct, self.coverage_pct)


def read_guideline_document(text: str, source_id: str) -> GuidelineDocument:
    """Split the metadata front matter off an annotated guideline file."""
    lines = text.splitlines()
    fields: dict[str, str] = {}
    i = 0
    while i < len(lines):
        stripped = lines[i].strip()
        if stripped.startswith("#") or stripped.startswith("[["):
            break
        if stripped:
            key, sep, value = stripped.partition(":")
            key = key.strip()
            if not sep or key not in FRONT_MATTER_KEYS:
                raise ParseError(f"unexpected front-matter line {stripped!r}", i + 1, source_id)
            if key in fields:
                raise ParseError(f"duplicate front-matter key {key!r}", i + 1, source_id)
            fields[key] = value.strip()
        i += 1
    missing = [k for k in FRONT_MATTER_KEYS if k not in fields]
    if missing:
        raise ParseError(f"front matter missing {', '.join(missing)}", 1, source_id)
    try:
        metadata = SnippetMetadata(
            fields["disease_domain"], fields["title"], int(fields["year"]), fields["organization"]
        )
    except (ValueError, ValidationError) as exc:
        raise ParseError(f"bad front matter: {exc}", 1, source_id) from exc
    return GuidelineDocument(source_id, metadata, "\n".join(lines[i:]), body_offset=i + 1)


def load_guideline_document(path: str | Path) -> GuidelineDocument:
    path = Path(path)
    return read_guideline_document(path.read_text(encoding="utf-8"), str(path))


def _parse_attrs(raw: str, lineno: int, source: str) -> dict[str, str]:
    try:
        parts = shlex.split(raw)
    except ValueError as exc:
        raise ParseError(f"bad snippet attributes: {exc}", lineno, source) from exc
    attrs: dict[str, str] = {}
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep:
            raise ParseError(f"attribute {part!r} has no value", lineno, source)
        if key not in KNOWN_ATTRS:
            raise ParseError(f"unknown attribute {key!r}", lineno, source)
        if key in attrs:
            raise ParseError(f"duplicate attribute {key!r}", lineno, source)
        attrs[key] = value
    return attrs


def parse_annotated_document(doc: GuidelineDocument, base_id: int = 1) -> list[Snippet]:
    """One snippet per ``[[snippet]]`` block, ids assigned from ``base_id`` in document order."""
    src = doc.source_id
    chapter = section = ""
    snippets: list[Snippet] = []
    open_line: int | None = None
    open_attrs: dict[str, str] = {}
    buf: list[str] = []

    for idx, line in enumerate(doc.body.splitlines()):
        lineno = doc.body_offset + idx
        stripped = line.strip()

        if open_line is not None:
            if stripped == BLOCK_CLOSE:
                snippets.append(_build_snippet(doc, base_id + len(snippets), chapter, section,
                                               open_attrs, buf, open_line))
                open_line, buf = None, []
            elif BLOCK_OPEN_RE.match(stripped):
                raise ParseError("nested snippet block", lineno, src)
            elif HEADING_RE.match(stripped):
                raise ParseError("heading inside a snippet block", lineno, src)
            else:
                buf.append(line)
            continue

        if not stripped:
            continue
        if stripped == BLOCK_CLOSE:
            raise ParseError("closing tag without an open snippet block", lineno, src)
        m = BLOCK_OPEN_RE.match(stripped)
        if m:
            open_line = lineno
            open_attrs = _parse_attrs(m.group("attrs") or "", lineno, src)
            continue
        h = HEADING_RE.match(stripped)
        if h:
            level = len(h.group("hashes"))
            if level == 1:
                chapter, section = h.group("title"), ""
            elif level == 2:
                if not chapter:
                    raise ParseError("section heading before any chapter heading", lineno, src)
                section = h.group("title")
            else:
                raise ParseError(f"heading level {level} is not supported", lineno, src)
            continue
        # Free prose outside blocks is unannotated and not extracted.

    if open_line is not None:
        raise ParseError("snippet block is never closed", open_line, src)
    return snippets


def _build_snippet(
    doc: GuidelineDocument,
    sid: int,
    chapter: str,
    section: str,
    attrs: dict[str, str],
    buf: list[str],
    lineno: int,
) -> Snippet:
    src = doc.source_id
    content = "\n".join(line.strip() for line in buf).strip()
    if not content:
        raise ParseError("empty snippet block", lineno, src)
    kind = attrs.get("kind", "text")
    if kind not in CONTENT_KINDS:
        raise ParseError(f"unknown kind {kind!r}", lineno, src)
    category = Category.OTHER
    if "category" in attrs:
        try:
            category = Category(attrs["category"])
        except ValueError:
            raise ParseError(f"unknown category {attrs['category']!r}", lineno, src) from None
    extras = [(k, v) for k, v in attrs.items() if k in EXTRA_ATTRS]
    if "category" in attrs:
        extras.append(("category", category.value))
    try:
        return Snippet(
            id=sid,
            metadata=doc.metadata,
            text=StructuredText(chapter, section, content, kind),
            category=category,
            extras=tuple(extras),
        )
    except ValidationError as exc:
        raise ParseError(str(exc), lineno, src) from exc


def _contains_phrase(tokens: Sequence[str], phrase: Sequence[str]) -> bool:
    n = len(phrase)
    return n > 0 and any(tuple(tokens[i:i + n]) == tuple(phrase) for i in range(len(tokens) - n + 1))


def relevance_score(m: SnippetMetadata, t: StructuredText, cfg: ExtractionConfig,
                    category: Category | None = None) -> float:
    """1.0 for an explicit clinical-category annotation, else the best keyword-hit fraction."""
    if category is not None and Category(category) in CLINICAL_CATEGORIES:
        return 1.0
    tokens = tokenize(" ".join((t.chapter, t.section, t.content)))
    best = 0.0
    for keywords in cfg.category_keywords.values():
        if not keywords:
            continue
        hits = sum(1 for kw in keywords if _contains_phrase(tokens, tokenize(kw)))
        best = max(best, hits / len(keywords))
    return min(1.0, best)


def snippet_relevance(s: Snippet, cfg: ExtractionConfig) -> float:
    annotated = s.category if s.extra("category") is not None else None
    return relevance_score(s.metadata, s.text, cfg, annotated)


def filter_relevant(snippets: Iterable[Snippet], cfg: ExtractionConfig) -> list[Snippet]:
    return [s for s in snippets if snippet_relevance(s, cfg) >= cfg.relevance_threshold]


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def _is_subspan(candidate: str, reference: str) -> bool:
    return bool(candidate) and candidate in reference


def extraction_metrics(candidate: Sequence[Snippet], reference: Sequence[Snippet]) -> ExtractionReport:
    """Precision, hit rate and coverage (all in percent) of candidates against reference snippets.

    A candidate matches a reference when its whitespace-collapsed content
    equals, or is a contiguous substring of, the reference content.
    """
    if not reference:
        raise EmptyReference("reference snippet list is empty")
    cands = [normalize_ws(s.text.content) for s in candidate]
    refs = [normalize_ws(s.text.content) for s in reference]
    matched_refs = [False] * len(refs)
    matched = 0
    for c in cands:
        hit = False
        for j, r in enumerate(refs):
            if _is_subspan(c, r):
                matched_refs[j] = True
                hit = True
        matched += hit
    n_c, n_r = len(cands), len(refs)
    n_mr = sum(matched_refs)
    return ExtractionReport(
        precision_pct=100.0 * matched / n_c if n_c else 0.0,
        hit_rate_pct=100.0 * n_mr / n_r,
        coverage_pct=100.0 * n_c / n_r,
        matched=matched,
        matched_references=n_mr,
        candidate_total=n_c,
        reference_total=n_r,
    )
