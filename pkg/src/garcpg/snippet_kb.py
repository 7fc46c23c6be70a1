"""Guideline snippet data model and the persisted knowledge base.

A knowledge base on disk is a directory holding ``snippets.jsonl`` (one
snippet per line) and ``manifest.json`` (dimension plus the fingerprint of
the embedder that produced the stored vectors).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedder import UNIT_NORM_TOL, Embedder, EmbedderFingerprint
from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyKnowledgeBase,
    FingerprintMismatch,
    GarError,
    SchemaError,
    ValidationError,
)

SNIPPETS_FILE = "snippets.jsonl"
MANIFEST_FILE = "manifest.json"


class Category(str, Enum):
    CLASSIFICATION_DIAGNOSTIC = "classification_diagnostic"
    MEASUREMENT_MONITORING = "measurement_monitoring"
    INTERVENTION_TREATMENT = "intervention_treatment"
    OTHER = "other"


# The three knowledge categories clinicians flagged as worth extracting.
CLINICAL_CATEGORIES = (
    Category.CLASSIFICATION_DIAGNOSTIC,
    Category.MEASUREMENT_MONITORING,
    Category.INTERVENTION_TREATMENT,
)

CONTENT_KINDS = ("text", "table", "figure")
LOCATOR_KEYS = ("url", "caption")


@dataclass(frozen=True)
class SnippetMetadata:
    disease_domain: str
    title: str
    year: int
    organization: str

    def __post_init__(self) -> None:
        for name in ("disease_domain", "title", "organization"):
            if not str(getattr(self, name)).strip():
                raise ValidationError(f"metadata field {name!r} is empty")
        if isinstance(self.year, bool) or not isinstance(self.year, int):
            raise ValidationError("metadata year must be an integer")
        if not 1900 <= self.year <= 2100:
            raise ValidationError(f"metadata year {self.year} outside [1900, 2100]")
        if ":" in self.organization:
            raise ValidationError("organization may not contain ':'")
        if ": " in self.disease_domain:
            raise ValidationError("disease_domain may not contain ': '")


def metadata_canonical_string(m: SnippetMetadata) -> str:
    """``"domain: title:year:organization"``, the provenance line shown to clinicians."""
    return f"{m.disease_domain}: {m.title}:{m.year}:{m.organization}"


def parse_metadata_string(s: str) -> SnippetMetadata:
    # Titles may contain colons, so year and organization come off the right.
    head, sep1, org = s.rpartition(":")
    head, sep2, year = head.rpartition(":")
    domain, sep3, title = head.partition(": ")
    if not (sep1 and sep2 and sep3):
        raise ValidationError(f"not a canonical metadata string: {s!r}")
    try:
        year_int = int(year)
    except ValueError:
        raise ValidationError(f"bad year in metadata string: {year!r}") from None
    return SnippetMetadata(domain, title, year_int, org)


@dataclass(frozen=True)
class StructuredText:
    chapter: str
    section: str
    content: str
    content_kind: str = "text"

    def __post_init__(self) -> None:
        if not self.content.strip():
            raise ValidationError("snippet content is empty")
        if self.content_kind not in CONTENT_KINDS:
            raise ValidationError(f"unknown content_kind {self.content_kind!r}")

    def flatten(self) -> str:
        """Text that gets vectorized: chapter, section and content joined by ': '."""
        return ": ".join(p for p in (self.chapter, self.section, self.content) if p)


@dataclass(frozen=True)
class Snippet:
    id: int
    metadata: SnippetMetadata
    text: StructuredText
    category: Category = Category.OTHER
    extras: tuple[tuple[str, str], ...] = ()
    embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id < 0:
            raise ValidationError(f"snippet id must be a non-negative integer, got {self.id!r}")
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "extras", tuple((str(k), str(v)) for k, v in self.extras))
        tagged = self.extra("category")
        if tagged is not None and tagged != self.category.value:
            raise ValidationError(
                f"snippet {self.id}: category {self.category.value!r} disagrees with extras {tagged!r}"
            )
        if self.text.content_kind != "text" and not any(k in LOCATOR_KEYS for k, _ in self.extras):
            raise ValidationError(f"snippet {self.id}: {self.text.content_kind} content needs a url or caption")
        if self.embedding is not None:
            emb = tuple(float(x) for x in self.embedding)
            norm = math.sqrt(math.fsum(x * x for x in emb))
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                raise ValidationError(f"snippet {self.id}: embedding norm {norm} is not 1")
            object.__setattr__(self, "embedding", emb)

    def extra(self, key: str) -> str | None:
        for k, v in self.extras:
            if k == key:
                return v
        return None

    @property
    def provenance(self) -> str:
        return metadata_canonical_string(self.metadata)


@dataclass
class KnowledgeBase:
    """Snippet pool plus the fingerprint of the embedder behind its vectors.

    Treat an instance as an immutable snapshot; ``add_snippet`` and
    ``embed_all`` return new instances.
    """

    snippets: list[Snippet] = field(default_factory=list)
    embedder_fingerprint: EmbedderFingerprint | None = None
    dimension: int | None = None

    def __post_init__(self) -> None:
        validate_kb(self)

    def __len__(self) -> int:
        return len(self.snippets)

    @cached_property
    def _by_id(self) -> dict[int, Snippet]:
        return {s.id: s for s in self.snippets}

    def get(self, snippet_id: int) -> Snippet:
        return self._by_id[snippet_id]

    def __contains__(self, snippet_id: object) -> bool:
        return snippet_id in self._by_id

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.snippets]

    @property
    def fully_embedded(self) -> bool:
        return bool(self.snippets) and all(s.embedding is not None for s in self.snippets)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Row-per-snippet vector matrix, in snippet order."""
        if not self.snippets:
            raise EmptyKnowledgeBase("knowledge base has no snippets")
        if not self.fully_embedded:
            raise GarError("knowledge base is not fully embedded")
        return np.asarray([s.embedding for s in self.snippets], dtype=np.float64)

    @cached_property
    def id_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


def validate_kb(kb: KnowledgeBase) -> None:
    seen: set[int] = set()
    for s in kb.snippets:
        if s.id in seen:
            raise DuplicateId(f"snippet id {s.id} appears twice")
        seen.add(s.id)
        if s.embedding is not None:
            if kb.dimension is None:
                raise DimensionMismatch(f"snippet {s.id} is embedded but the knowledge base has no dimension")
            if len(s.embedding) != kb.dimension:
                raise DimensionMismatch(
                    f"snippet {s.id} has dimension {len(s.embedding)}, knowledge base {kb.dimension}"
                )
    if kb.dimension is not None and kb.dimension < 1:
        raise ValidationError("dimension must be positive")
    if kb.embedder_fingerprint is not None and kb.dimension != kb.embedder_fingerprint.dimension:
        raise DimensionMismatch("fingerprint dimension disagrees with knowledge base dimension")


def add_snippet(kb: KnowledgeBase, s: Snippet) -> KnowledgeBase:
    if s.id in kb:
        raise DuplicateId(f"snippet id {s.id} already present")
    if s.embedding is not None and kb.dimension is not None and len(s.embedding) != kb.dimension:
        raise DimensionMismatch(f"snippet dimension {len(s.embedding)} != knowledge base {kb.dimension}")
    dim = kb.dimension
    if dim is None and s.embedding is not None:
        dim = len(s.embedding)
    return KnowledgeBase([*kb.snippets, s], kb.embedder_fingerprint, dim)


def embed_all(kb: KnowledgeBase, embedder: Embedder) -> KnowledgeBase:
    """Vectorize every snippet's flattened text with ``embedder``."""
    if not kb.snippets:
        raise EmptyKnowledgeBase("nothing to embed")
    vectors = embedder.embed_batch([s.text.flatten() for s in kb.snippets])
    fp = embedder.fingerprint
    embedded = [replace(s, embedding=v.values) for s, v in zip(kb.snippets, vectors)]
    return KnowledgeBase(embedded, fp, fp.dimension)


def merge_kbs(a: KnowledgeBase, b: KnowledgeBase) -> KnowledgeBase:
    if a.embedder_fingerprint and b.embedder_fingerprint and a.embedder_fingerprint != b.embedder_fingerprint:
        raise FingerprintMismatch("cannot merge knowledge bases embedded by different embedders")
    out = a
    for s in b.snippets:
        out = add_snippet(out, s)
    fp = a.embedder_fingerprint or b.embedder_fingerprint
    return KnowledgeBase(out.snippets, fp, out.dimension)


# -- serialization ---------------------------------------------------------

_SNIPPET_KEYS = {"id", "metadata", "text", "category", "extras", "embedding"}
_REQUIRED_KEYS = _SNIPPET_KEYS - {"embedding"}
_METADATA_KEYS = {"disease_domain", "title", "year", "organization"}
_TEXT_KEYS = {"chapter", "section", "content", "content_kind"}


def snippet_to_dict(s: Snippet) -> dict:
    d = {
        "id": s.id,
        "metadata": {
            "disease_domain": s.metadata.disease_domain,
            "title": s.metadata.title,
            "year": s.metadata.year,
            "organization": s.metadata.organization,
        },
        "text": {
            "chapter": s.text.chapter,
            "section": s.text.section,
            "content": s.text.content,
            "content_kind": s.text.content_kind,
        },
        "category": s.category.value,
        "extras": [[k, v] for k, v in s.extras],
    }
    if s.embedding is not None:
        d["embedding"] = list(s.embedding)
    return d


def _check_keys(obj, expected: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    missing = required - obj.keys()
    unknown = obj.keys() - expected
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")


def snippet_from_dict(d: dict, where: str = "snippet") -> Snippet:
    _check_keys(d, _SNIPPET_KEYS, _REQUIRED_KEYS, where)
    _check_keys(d["metadata"], _METADATA_KEYS, _METADATA_KEYS, f"{where}.metadata")
    _check_keys(d["text"], _TEXT_KEYS, _TEXT_KEYS, f"{where}.text")
    extras = d["extras"]
    if not isinstance(extras, list) or not all(
        isinstance(p, list) and len(p) == 2 and all(isinstance(x, str) for x in p) for p in extras
    ):
        raise SchemaError(f"{where}.extras: expected a list of [key, value] string pairs")
    emb = d.get("embedding")
    if emb is not None and (
        not isinstance(emb, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in emb)
    ):
        raise SchemaError(f"{where}.embedding: expected an array of numbers")
    md, tx = d["metadata"], d["text"]
    try:
        return Snippet(
            id=d["id"],
            metadata=SnippetMetadata(md["disease_domain"], md["title"], md["year"], md["organization"]),
            text=StructuredText(tx["chapter"], tx["section"], tx["content"], tx["content_kind"]),
            category=Category(d["category"]),
            extras=tuple((k, v) for k, v in extras),
            embedding=tuple(float(x) for x in emb) if emb is not None else None,
        )
    except (ValidationError, ValueError, TypeError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _dumps(obj) -> str:
    # repr-based float output round-trips float64 exactly.
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def dump_snippets_jsonl(snippets: Iterable[Snippet]) -> str:
    return "".join(_dumps(snippet_to_dict(s)) + "\n" for s in snippets)


def read_snippets_jsonl(path: str | Path) -> list[Snippet]:
    out = []
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise GarError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        out.append(snippet_from_dict(obj, f"{path.name}:{lineno}"))
    return out


def manifest_dict(kb: KnowledgeBase) -> dict:
    return {
        "dimension": kb.dimension,
        "embedder": kb.embedder_fingerprint.to_dict() if kb.embedder_fingerprint else None,
    }


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    """Write ``kb`` as a canonical snippet file plus manifest under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    corpus = dump_snippets_jsonl(kb.snippets)
    manifest = json.dumps(manifest_dict(kb), indent=2, sort_keys=True) + "\n"
    _atomic_write(path / SNIPPETS_FILE, corpus)
    _atomic_write(path / MANIFEST_FILE, manifest)


def load_kb(path: str | Path) -> KnowledgeBase:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
    except OSError as exc:
        raise GarError(f"cannot read manifest in {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path / MANIFEST_FILE}: invalid JSON: {exc}") from exc
    _check_keys(manifest, {"dimension", "embedder"}, {"dimension", "embedder"}, MANIFEST_FILE)
    fp_raw = manifest["embedder"]
    fp = None
    if fp_raw is not None:
        _check_keys(fp_raw, {"name", "dimension", "params_digest"}, {"name", "dimension", "params_digest"},
                    f"{MANIFEST_FILE}.embedder")
        fp = EmbedderFingerprint.from_dict(fp_raw)
    snippets = read_snippets_jsonl(path / SNIPPETS_FILE)
    dim = manifest["dimension"]
    if dim is not None and (not isinstance(dim, int) or isinstance(dim, bool)):
        raise SchemaError("manifest dimension must be an integer or null")
    if fp is not None and not all(s.embedding is not None for s in snippets):
        raise SchemaError("manifest records an embedder but some snippets have no embedding")
    return KnowledgeBase(snippets, fp, dim)


def kb_from_snippets(
    snippets: Sequence[Snippet], fingerprint: EmbedderFingerprint | None = None
) -> KnowledgeBase:
    dim = next((len(s.embedding) for s in snippets if s.embedding is not None), None)
    return KnowledgeBase(list(snippets), fingerprint, dim)
