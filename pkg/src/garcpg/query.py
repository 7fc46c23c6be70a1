"""Query composition: diagnosis plus current and historical records, weighted.

The current admission carries ``current_weight`` of the mass; historical
records share the remainder by normalized exponential time decay (or by a
fixed weight vector). With no usable history the current part takes all of
the mass.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .embedder import Embedder, EmbeddingVector, weighted_combine
from .errors import (
    EmptyHistory,
    MissingCurrent,
    SchemaError,
    ValidationError,
    WeightConfigMismatch,
)

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class DiagnosticOutput:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((str(c), str(l)) for c, l in self.entries))
        if not self.entries:
            raise ValidationError("diagnostic output needs at least one entry")
        for code, _ in self.entries:
            if not code.strip():
                raise ValidationError("ICD code is empty")

    def render(self) -> str:
        return "; ".join(f"{code} {label}".strip() for code, label in self.entries)

    def to_json(self) -> list[dict]:
        return [{"icd": c, "label": l} for c, l in self.entries]


class RecordKind(str, Enum):
    CURRENT = "current"
    HISTORICAL = "historical"


@dataclass(frozen=True)
class EhrRecord:
    kind: RecordKind
    timestamp: dt.date
    text_current: str | None = None
    text_historical: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RecordKind(self.kind))
        if self.kind is RecordKind.CURRENT:
            if self.text_current is None or self.text_historical is not None:
                raise ValidationError("current record carries text_current only")
        elif self.text_historical is None or self.text_current is not None:
            raise ValidationError("historical record carries text_historical only")

    @property
    def text(self) -> str:
        return self.text_current if self.kind is RecordKind.CURRENT else self.text_historical  # type: ignore[return-value]

    @classmethod
    def current(cls, date: dt.date, text: str) -> "EhrRecord":
        return cls(RecordKind.CURRENT, date, text_current=text)

    @classmethod
    def historical(cls, date: dt.date, diagnosis: str = "", outpatient_notes: str = "",
                   discharge_summary: str = "") -> "EhrRecord":
        # Historical records keep only diagnosis, outpatient notes and discharge summary.
        text = "\n".join((diagnosis, outpatient_notes, discharge_summary))
        return cls(RecordKind.HISTORICAL, date, text_historical=text)


class WeightMode(str, Enum):
    TIME_DECAY = "time_decay"
    FIXED = "fixed"


@dataclass(frozen=True)
class WeightingConfig:
    mode: WeightMode = WeightMode.FIXED
    decay_lambda: float = 0.01
    current_weight: float = 0.6
    fixed_weights: tuple[float, ...] | None = (0.6, 0.25, 0.15)
    history_window: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", WeightMode(self.mode))
        if self.history_window < 0:
            raise ValidationError("history_window must be >= 0")
        if self.mode is WeightMode.FIXED:
            if not self.fixed_weights:
                raise ValidationError("fixed mode needs fixed_weights")
            w = tuple(float(x) for x in self.fixed_weights)
            if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > WEIGHT_SUM_TOL:
                raise ValidationError(f"fixed weights {w} must be non-negative and sum to 1")
            object.__setattr__(self, "fixed_weights", w)
        else:
            if not self.decay_lambda > 0:
                raise ValidationError("time decay needs lambda > 0")
            if not 0.0 < self.current_weight <= 1.0:
                raise ValidationError("current_weight must lie in (0, 1]")

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "lambda": self.decay_lambda,
            "current_weight": self.current_weight,
            "fixed_weights": list(self.fixed_weights) if self.fixed_weights else None,
            "history_window": self.history_window,
        }


class PartRole(str, Enum):
    DIAGNOSIS_PLUS_CURRENT = "diagnosis_plus_current"
    HISTORICAL = "historical"


@dataclass(frozen=True)
class QueryPart:
    role: PartRole
    text: str
    weight: float
    delta_t_days: int


@dataclass(frozen=True)
class ComposedQuery:
    parts: tuple[QueryPart, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.parts or self.parts[0].role is not PartRole.DIAGNOSIS_PLUS_CURRENT:
            raise ValidationError("first query part must be diagnosis_plus_current")
        total = math.fsum(p.weight for p in self.parts)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValidationError(f"query part weights sum to {total}")

    @property
    def weights(self) -> list[float]:
        return [p.weight for p in self.parts]


def time_decay_weights(delta_t: Sequence[float], decay_lambda: float) -> list[float]:
    """exp(-lambda*dt_i) normalized to sum to one."""
    if not delta_t:
        raise EmptyHistory("no historical intervals")
    if not decay_lambda > 0:
        raise ValidationError("lambda must be positive")
    if any(d < 0 for d in delta_t):
        raise ValidationError("time intervals must be non-negative")
    base = min(delta_t)
    # Shifting by the smallest interval keeps the largest term at exp(0) = 1.
    raw = [math.exp(-decay_lambda * (d - base)) for d in delta_t]
    total = math.fsum(raw)
    return [r / total for r in raw]


def compose_query(
    d0: DiagnosticOutput,
    current: EhrRecord | None,
    history: Sequence[EhrRecord],
    cfg: WeightingConfig,
) -> ComposedQuery:
    if current is None or current.kind is not RecordKind.CURRENT:
        raise MissingCurrent("a current admission record is required")
    current_text = current.text.strip()
    diag_text = d0.render().strip()
    if not current_text and not diag_text:
        raise MissingCurrent("both diagnosis and current record are empty")
    part0_text = f"{diag_text}\n{current_text}" if current_text else diag_text

    for rec in history:
        if rec.kind is not RecordKind.HISTORICAL:
            raise ValidationError("history may only hold historical records")
        if rec.timestamp > current.timestamp:
            raise ValidationError("historical record is dated after the current admission")
    # Stable sort keeps input order among equal dates.
    ordered = sorted(history, key=lambda r: r.timestamp, reverse=True)[: cfg.history_window]
    # Records with no text contribute nothing to the query.
    usable = [r for r in ordered if r.text.strip()]
    deltas = [(current.timestamp - r.timestamp).days for r in usable]

    if cfg.mode is WeightMode.FIXED:
        assert cfg.fixed_weights is not None
        needed = 1 + len(usable)
        if len(cfg.fixed_weights) < needed:
            raise WeightConfigMismatch(
                f"{len(cfg.fixed_weights)} fixed weights for {needed} query parts"
            )
        used = cfg.fixed_weights[:needed]
        total = math.fsum(used)
        if total <= 0:
            raise WeightConfigMismatch("fixed weights for the available parts are all zero")
        weights = [w / total for w in used]
    elif usable:
        hist = time_decay_weights(deltas, cfg.decay_lambda)
        weights = [cfg.current_weight, *((1.0 - cfg.current_weight) * w for w in hist)]
    else:
        weights = [1.0]

    parts = [QueryPart(PartRole.DIAGNOSIS_PLUS_CURRENT, part0_text, weights[0], 0)]
    parts += [
        QueryPart(PartRole.HISTORICAL, r.text, w, d)
        for r, w, d in zip(usable, weights[1:], deltas)
    ]
    return ComposedQuery(tuple(parts))


def embed_query(cq: ComposedQuery, embedder: Embedder) -> EmbeddingVector:
    vectors = embedder.embed_batch([p.text for p in cq.parts])
    return weighted_combine(cq.weights, vectors)


# -- case file -------------------------------------------------------------

@dataclass(frozen=True)
class Case:
    diagnosis: DiagnosticOutput
    current: EhrRecord
    history: tuple[EhrRecord, ...] = ()


def _parse_date(value, where: str) -> dt.date:
    if not isinstance(value, str):
        raise SchemaError(f"{where}: date must be a YYYY-MM-DD string")
    try:
        return dt.date.fromisoformat(value)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _expect(obj, keys: set[str], optional: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    missing = keys - obj.keys()
    unknown = obj.keys() - keys - optional
    if missing:
        raise SchemaError(f"{where}: missing {sorted(missing)}")
    if unknown:
        raise SchemaError(f"{where}: unknown {sorted(unknown)}")


def _str(obj: dict, key: str, where: str) -> str:
    v = obj.get(key, "")
    if not isinstance(v, str):
        raise SchemaError(f"{where}.{key}: expected a string")
    return v


def case_from_json(data: dict, *, extra_keys: Sequence[str] = ()) -> Case:
    """Validate and convert a case document (``diagnosis``/``current``/``history``)."""
    _expect(data, {"diagnosis", "current"}, {"history", *extra_keys}, "case")
    diag = data["diagnosis"]
    if not isinstance(diag, list) or not diag:
        raise SchemaError("case.diagnosis: expected a non-empty list")
    entries = []
    for i, e in enumerate(diag):
        _expect(e, {"icd", "label"}, set(), f"case.diagnosis[{i}]")
        entries.append((_str(e, "icd", "diagnosis"), _str(e, "label", "diagnosis")))
    cur = data["current"]
    _expect(cur, {"date", "text"}, set(), "case.current")
    history = data.get("history", [])
    if not isinstance(history, list):
        raise SchemaError("case.history: expected a list")
    hist_records = []
    for i, h in enumerate(history):
        where = f"case.history[{i}]"
        _expect(h, {"date"}, {"diagnosis", "outpatient_notes", "discharge_summary"}, where)
        hist_records.append(EhrRecord.historical(
            _parse_date(h["date"], where),
            _str(h, "diagnosis", where),
            _str(h, "outpatient_notes", where),
            _str(h, "discharge_summary", where),
        ))
    try:
        return Case(
            DiagnosticOutput(tuple(entries)),
            EhrRecord.current(_parse_date(cur["date"], "case.current"), _str(cur, "text", "case.current")),
            tuple(hist_records),
        )
    except ValidationError as exc:
        raise SchemaError(str(exc)) from exc


def case_to_json(case: Case) -> dict:
    hist = []
    for r in case.history:
        diagnosis, notes, summary = (r.text.split("\n", 2) + ["", ""])[:3]
        hist.append({
            "date": r.timestamp.isoformat(),
            "diagnosis": diagnosis,
            "outpatient_notes": notes,
            "discharge_summary": summary,
        })
    return {
        "diagnosis": case.diagnosis.to_json(),
        "current": {"date": case.current.timestamp.isoformat(), "text": case.current.text},
        "history": hist,
    }


def compose_case(case: Case, cfg: WeightingConfig) -> ComposedQuery:
    return compose_query(case.diagnosis, case.current, case.history, cfg)
