"""Text vectorizers and the vector arithmetic used by retrieval.

Every embedder exposes ``fingerprint``, ``dimension``, ``embed(text)`` and
``embed_batch(texts)``. Vectors leave an embedder L2-normalized and tagged
with the fingerprint of the configuration that produced them, so query and
knowledge-base vectors can be checked for a shared semantic space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    DegenerateCombination,
    DimensionDrift,
    DimensionMismatch,
    EmbedderFailure,
    EmptyInput,
    LengthMismatch,
    ProtocolError,
    TransportError,
    ValidationError,
    ZeroVector,
)

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class EmbedderFingerprint:
    name: str
    dimension: int
    params_digest: str

    def to_dict(self) -> dict:
        return {"name": self.name, "dimension": self.dimension, "params_digest": self.params_digest}

    @classmethod
    def from_dict(cls, data: dict) -> "EmbedderFingerprint":
        return cls(str(data["name"]), int(data["dimension"]), str(data["params_digest"]))


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    fingerprint: EmbedderFingerprint | None = None

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @classmethod
    def from_array(cls, arr, fingerprint: EmbedderFingerprint | None = None) -> "EmbeddingVector":
        return cls(tuple(float(x) for x in np.asarray(arr, dtype=np.float64)), fingerprint)


class Embedder(Protocol):
    @property
    def fingerprint(self) -> EmbedderFingerprint: ...

    @property
    def dimension(self) -> int: ...

    def embed(self, text: str) -> EmbeddingVector: ...

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def _as_array(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.array
    return np.asarray(v, dtype=np.float64)


def normalize(v) -> np.ndarray:
    arr = _as_array(v)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise ZeroVector("cannot normalize a zero or non-finite vector")
    return arr / norm


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; symmetric by construction."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"dimension {x.shape[0]} vs {y.shape[0]}")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ZeroVector("cosine undefined for a zero vector")
    sim = float(np.dot(x, y)) / (nx * ny)
    return min(1.0, max(-1.0, sim))


def weighted_combine(weights: Sequence[float], vectors: Sequence) -> EmbeddingVector:
    """Unit-normalized weighted sum of unit-normalized component vectors.

    The fingerprint of the first component is carried over when all
    components agree on it.
    """
    if len(weights) != len(vectors):
        raise LengthMismatch(f"{len(weights)} weights for {len(vectors)} vectors")
    if not weights:
        raise LengthMismatch("at least one vector is required")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and non-negative")
    if float(w.sum()) <= 0.0:
        raise ValidationError("weights must not sum to zero")
    dims = {_as_array(v).shape for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch("vectors differ in dimension")

    total = np.zeros(next(iter(dims)), dtype=np.float64)
    for wi, v in zip(w, vectors):
        total += wi * normalize(v)
    # Weight scale drops out after normalization.
    total /= float(w.sum())
    norm = float(np.linalg.norm(total))
    if norm < 1e-9:
        raise DegenerateCombination("weighted sum cancels to the zero vector")

    fps = {v.fingerprint for v in vectors if isinstance(v, EmbeddingVector)}
    fp = fps.pop() if len(fps) == 1 else None
    return EmbeddingVector.from_array(total / norm, fp)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _feature_hash(feature: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hash_features(text: str) -> list[str]:
    """Unigram and adjacent-bigram features of ``text``, in order."""
    tokens = tokenize(text)
    feats = [f"u:{t}" for t in tokens]
    feats.extend(f"b:{a} {b}" for a, b in zip(tokens, tokens[1:]))
    return feats


def hash_embed(text: str, dim: int, seed: int) -> EmbeddingVector:
    """Signed feature-hashing embedding over unigrams and bigrams."""
    return HashEmbedder(dim, seed).embed(text)


class HashEmbedder:
    """Deterministic reference embedder; stateless after construction."""

    name = "signed-feature-hash-v1"

    def __init__(self, dim: int = 256, seed: int = 7) -> None:
        if dim < 16:
            raise ValidationError("hash embedder dimension must be >= 16")
        if seed < 0 or seed >= 2**64:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")
        self.dim = int(dim)
        self.seed = int(seed)
        params = json.dumps({"algo": self.name, "dim": self.dim, "seed": self.seed}, sort_keys=True)
        self._fingerprint = EmbedderFingerprint(
            "hash", self.dim, hashlib.sha256(params.encode()).hexdigest()
        )

    @property
    def fingerprint(self) -> EmbedderFingerprint:
        return self._fingerprint

    @property
    def dimension(self) -> int:
        return self.dim

    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise EmptyInput("text is empty")
        feats = hash_features(text)
        if not feats:
            raise EmptyInput(f"no tokens in {text!r}")
        acc = np.zeros(self.dim, dtype=np.float64)
        for feat in feats:
            h = _feature_hash(feat, self.seed)
            acc[h % self.dim] += -1.0 if (h >> 63) & 1 else 1.0
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            # Every feature cancelled against another; fall back to unsigned counts.
            for feat in feats:
                acc[_feature_hash(feat, self.seed) % self.dim] += 1.0
            norm = float(np.linalg.norm(acc))
        return EmbeddingVector.from_array(acc / norm, self._fingerprint)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """Client for the batched ``POST {endpoint}/embed`` protocol.

    The fingerprint is derived from the model name and dimension the service
    reports; it is fixed by the first successful response (or by the
    constructor arguments) and later responses must agree with it.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 10.0,
        retries: int = 2,
        backoff: float = 0.1,
        model: str | None = None,
        dimension: int | None = None,
        client: httpx.Client | None = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._client = client
        self._fingerprint: EmbedderFingerprint | None = None
        if model is not None and dimension is not None:
            self._fingerprint = self._make_fingerprint(model, dimension)

    @staticmethod
    def _make_fingerprint(model: str, dimension: int) -> EmbedderFingerprint:
        params = json.dumps({"model": model, "dimension": dimension}, sort_keys=True)
        return EmbedderFingerprint(model, int(dimension), hashlib.sha256(params.encode()).hexdigest())

    @property
    def fingerprint(self) -> EmbedderFingerprint:
        if self._fingerprint is None:
            self.embed_batch(["fingerprint probe"])
        assert self._fingerprint is not None
        return self._fingerprint

    @property
    def dimension(self) -> int:
        return self.fingerprint.dimension

    def embed(self, text: str) -> EmbeddingVector:
        return self.embed_batch([text])[0]

    def _post(self, texts: list[str]) -> httpx.Response:
        url = f"{self.endpoint}/embed"
        delay = self.backoff
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                if self._client is not None:
                    return self._client.post(url, json={"texts": texts}, timeout=self.timeout)
                return httpx.post(url, json={"texts": texts}, timeout=self.timeout)
            except httpx.TransportError as exc:
                last = exc
                log.warning("embed request to %s failed (attempt %d): %s", url, attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(delay)
                    delay *= 2
        raise TransportError(f"embedding service unreachable at {url}: {last}") from last

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = list(texts)
        if not texts:
            raise EmptyInput("batch is empty")
        for t in texts:
            if not t or not t.strip():
                raise EmptyInput("text is empty")
        resp = self._post(texts)
        if resp.status_code != 200:
            raise EmbedderFailure(f"embedding service returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            model = str(body["model"])
            dim = int(body["dimension"])
            rows = body["embeddings"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from exc
        if not isinstance(rows, list) or len(rows) != len(texts):
            n = len(rows) if isinstance(rows, list) else "non-list"
            raise ProtocolError(f"expected {len(texts)} embeddings, got {n}")

        fp = self._make_fingerprint(model, dim)
        if self._fingerprint is not None and fp != self._fingerprint:
            raise DimensionDrift(
                f"service reports {model}/{dim}, expected "
                f"{self._fingerprint.name}/{self._fingerprint.dimension}"
            )
        out = []
        for row in rows:
            if not isinstance(row, list) or len(row) != dim:
                raise DimensionDrift(f"embedding length differs from reported dimension {dim}")
            try:
                arr = normalize(np.asarray(row, dtype=np.float64))
            except (ZeroVector, ValueError, TypeError) as exc:
                raise ProtocolError(f"unusable embedding row: {exc}") from exc
            out.append(EmbeddingVector.from_array(arr, fp))
        self._fingerprint = fp
        return out


def parse_embedder_spec(spec: str) -> Embedder:
    """Build an embedder from ``hash:dim=256:seed=7`` or ``remote:url=http://...``."""
    kind, _, rest = spec.partition(":")
    params: dict[str, str] = {}
    if kind == "remote":
        if not rest.startswith("url="):
            raise ValidationError("remote embedder spec must be remote:url=<endpoint>")
        return RemoteEmbedder(rest[len("url="):])
    if kind != "hash":
        raise ValidationError(f"unknown embedder kind {kind!r}")
    for item in filter(None, rest.split(":")):
        key, sep, value = item.partition("=")
        if not sep or key not in ("dim", "seed"):
            raise ValidationError(f"bad hash embedder parameter {item!r}")
        params[key] = value
    try:
        return HashEmbedder(int(params.get("dim", 256)), int(params.get("seed", 7)))
    except ValueError as exc:
        raise ValidationError(f"bad hash embedder spec {spec!r}: {exc}") from exc
