from __future__ import annotations

import hashlib
import json
import math
import subprocess
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garcpg.embedder import (
    EmbeddingVector,
    HashEmbedder,
    RemoteEmbedder,
    cosine_similarity,
    hash_embed,
    parse_embedder_spec,
    weighted_combine,
)
from garcpg.errors import (
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


def oracle_hash_vector(text: str, dim: int, seed: int) -> list[float]:
    """Independent re-derivation of the signed feature hash, in pure Python."""
    words, cur = [], ""
    for ch in text.lower() + " ":
        if ch.isalnum():
            cur += ch
        elif cur:
            words.append(cur)
            cur = ""
    feats = ["u:" + w for w in words] + ["b:" + a + " " + b for a, b in zip(words, words[1:])]
    acc = [0.0] * dim
    for f in feats:
        h = int.from_bytes(hashlib.blake2b(f.encode(), digest_size=8, key=seed.to_bytes(8, "little")).digest(), "little")
        acc[h % dim] += -1.0 if h >> 63 else 1.0
    n = math.sqrt(sum(x * x for x in acc))
    return [x / n for x in acc]


def test_hash_embed_matches_independent_hasher():
    for text in ["alpha beta", "Office BP is recommended for diagnosis of hypertension.", "x"]:
        got = hash_embed(text, 64, 7).values
        assert got == pytest.approx(oracle_hash_vector(text, 64, 7), abs=1e-15)


def test_hash_embed_normalizes_case_and_whitespace():
    assert hash_embed("a b", 256, 7) == hash_embed("a  B", 256, 7)


def test_disjoint_vocabularies_near_orthogonal():
    a, b = oracle_hash_vector("alpha beta", 4096, 7), oracle_hash_vector("gamma delta", 4096, 7)
    # Six features per text over 4096 buckets: the oracle shows no shared bucket.
    assert sum(x * y for x, y in zip(a, b)) == 0.0
    sim = cosine_similarity(hash_embed("alpha beta", 4096, 7), hash_embed("gamma delta", 4096, 7))
    assert -0.2 <= sim <= 0.2


@pytest.mark.parametrize("text", ["", "   ", "!!!", "--- ..."])
def test_hash_embed_empty_input(text):
    with pytest.raises(EmptyInput):
        hash_embed(text, 256, 7)


def test_hash_embedder_rejects_small_dim():
    with pytest.raises(ValidationError):
        HashEmbedder(8, 1)


def test_embed_deterministic_and_tagged(embedder):
    a, b = embedder.embed("BP targets"), embedder.embed("BP targets")
    assert a == b
    assert a.fingerprint == embedder.fingerprint
    assert a.dim == 256


@settings(max_examples=1000, deadline=None)
@given(st.text(min_size=1, max_size=80).filter(lambda t: any(c.isalnum() for c in t)))
def test_embed_unit_norm(text):
    v = hash_embed(text, 128, 3)
    if not v.values:
        return
    assert abs(np.linalg.norm(v.array) - 1.0) <= 1e-6


def test_hash_embed_stable_across_processes():
    code = "from garcpg.embedder import hash_embed; print(repr(hash_embed('office bp targets', 32, 11).values))"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert eval(out) == hash_embed("office bp targets", 32, 11).values


def test_fingerprint_depends_on_config():
    assert HashEmbedder(256, 7).fingerprint == HashEmbedder(256, 7).fingerprint
    assert HashEmbedder(256, 7).fingerprint != HashEmbedder(256, 8).fingerprint
    assert HashEmbedder(256, 7).fingerprint != HashEmbedder(128, 7).fingerprint


def test_cosine_examples():
    v = [0.3, -0.2, 0.9]
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    a = np.array([1, 2, 2]) / 3
    b = np.array([2, 1, 2]) / 3
    assert cosine_similarity(a, b) == pytest.approx(8 / 9, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


vectors = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=12)


@given(vectors, vectors, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, c):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert cosine_similarity([c * x for x in a], b) == pytest.approx(s, abs=1e-12)


def test_weighted_combine_examples():
    v = EmbeddingVector.from_array(np.array([0.6, 0.8]))
    assert np.allclose(weighted_combine([1.0], [v]).array, v.array, atol=1e-15)
    assert np.allclose(weighted_combine([0.5, 0.5], [v, v]).array, v.array, atol=1e-15)
    out = weighted_combine([0.6, 0.4], [[1.0, 0.0], [0.0, 1.0]])
    # 0.6/sqrt(0.52), 0.4/sqrt(0.52) from a 30-digit mpmath evaluation.
    assert out.values == pytest.approx((0.832050294337843683, 0.554700196225229122), abs=1e-12)


def test_weighted_combine_errors():
    with pytest.raises(LengthMismatch):
        weighted_combine([0.5], [[1, 0], [0, 1]])
    with pytest.raises(DegenerateCombination):
        weighted_combine([0.5, 0.5], [[1, 0], [-1, 0]])
    with pytest.raises(ValidationError):
        weighted_combine([0.0, 0.0], [[1, 0], [0, 1]])


@given(st.lists(st.floats(0.01, 10), min_size=3, max_size=3), st.floats(0.01, 100))
def test_weighted_combine_scale_invariant(weights, c):
    vs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.3, 0.9]]
    a = weighted_combine(weights, vs).array
    b = weighted_combine([c * w for w in weights], vs).array
    assert np.max(np.abs(a - b)) <= 1e-12


def test_weighted_combine_keeps_common_fingerprint(embedder):
    out = weighted_combine([0.7, 0.3], [embedder.embed("a"), embedder.embed("b")])
    assert out.fingerprint == embedder.fingerprint


def test_parse_embedder_spec():
    e = parse_embedder_spec("hash:dim=64:seed=3")
    assert (e.dim, e.seed) == (64, 3)
    assert isinstance(parse_embedder_spec("remote:url=http://localhost:1"), RemoteEmbedder)
    with pytest.raises(ValidationError):
        parse_embedder_spec("bert:dim=4")
    with pytest.raises(ValidationError):
        parse_embedder_spec("hash:size=4")


# -- remote protocol --------------------------------------------------------

class StubEmbedService:
    """Minimal embedding server; ``reply`` maps the parsed request to (status, body)."""

    def __init__(self, reply):
        self.reply = reply
        self.requests: list[dict] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append({"path": self.path, "body": body})
                status, payload = stub.reply(body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *a):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True).start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_factory():
    servers = []

    def make(reply):
        s = StubEmbedService(reply)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


def test_remote_embed_normalizes_in_order(stub_factory):
    fixed = {"first": [3.0, 4.0, 0.0, 0.0], "second": [0.0, 0.0, 2.0, 0.0]}
    stub = stub_factory(lambda b: (200, {"model": "stub", "dimension": 4,
                                         "embeddings": [fixed[t] for t in b["texts"]]}))
    client = RemoteEmbedder(stub.url)
    out = client.embed_batch(["first", "second"])
    assert stub.requests[0] == {"path": "/embed", "body": {"texts": ["first", "second"]}}
    assert out[0].values == pytest.approx((0.6, 0.8, 0.0, 0.0))
    assert out[1].values == (0.0, 0.0, 1.0, 0.0)
    assert client.fingerprint.name == "stub" and client.dimension == 4
    assert out[0].fingerprint == client.fingerprint


def test_remote_embed_count_mismatch(stub_factory):
    stub = stub_factory(lambda b: (200, {"model": "stub", "dimension": 2, "embeddings": [[1, 0]] * 3}))
    with pytest.raises(ProtocolError):
        RemoteEmbedder(stub.url).embed_batch(["a", "b"])


def test_remote_embed_malformed(stub_factory):
    stub = stub_factory(lambda b: (200, {"vectors": []}))
    with pytest.raises(ProtocolError):
        RemoteEmbedder(stub.url).embed_batch(["a"])


def test_remote_embed_non_200(stub_factory):
    stub = stub_factory(lambda b: (503, {"error": "busy"}))
    with pytest.raises(EmbedderFailure):
        RemoteEmbedder(stub.url).embed_batch(["a"])


def test_remote_embed_dimension_drift(stub_factory):
    dims = iter([2, 3])

    def reply(body):
        d = next(dims)
        return 200, {"model": "stub", "dimension": d, "embeddings": [[1.0] * d for _ in body["texts"]]}

    client = RemoteEmbedder(stub_factory(reply).url)
    client.embed_batch(["a"])
    with pytest.raises(DimensionDrift):
        client.embed_batch(["a"])


def test_remote_embed_unreachable():
    client = RemoteEmbedder("http://127.0.0.1:9", retries=2, backoff=0.01, timeout=0.5)
    with pytest.raises(TransportError):
        client.embed_batch(["a"])
