"""Exception hierarchy shared by every garcpg module."""

from __future__ import annotations


class GarError(Exception):
    """Base class for all garcpg errors."""


class ValidationError(GarError, ValueError):
    """A value violates a documented invariant."""


class DuplicateId(GarError):
    pass


class DimensionMismatch(GarError, ValueError):
    pass


class ZeroVector(GarError, ValueError):
    pass


class LengthMismatch(GarError, ValueError):
    pass


class DegenerateCombination(GarError, ValueError):
    pass


class EmptyInput(GarError, ValueError):
    pass


class EmbedderFailure(GarError):
    """The embedder could not produce vectors."""


class TransportError(EmbedderFailure):
    pass


class ProtocolError(EmbedderFailure):
    pass


class DimensionDrift(EmbedderFailure):
    pass


class SchemaError(GarError, ValueError):
    """A persisted or wire-format document is missing fields or carries unknown ones."""


class FingerprintMismatch(GarError):
    pass


class EmptyKnowledgeBase(GarError):
    pass


class ParseError(GarError):
    def __init__(self, message: str, line: int, source: str | None = None) -> None:
        self.line = line
        self.source = source
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {message}")


class EmptyReference(GarError, ValueError):
    pass


class EmptyHistory(GarError, ValueError):
    pass


class MissingCurrent(GarError, ValueError):
    pass


class WeightConfigMismatch(GarError, ValueError):
    pass


class ScorerFailure(GarError):
    pass
