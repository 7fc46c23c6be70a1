from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ESH, make_snippet
from garcpg.embedder import EmbedderFingerprint, HashEmbedder
from garcpg.errors import DimensionMismatch, DuplicateId, FingerprintMismatch, SchemaError, ValidationError
from garcpg.snippet_kb import (
    MANIFEST_FILE,
    SNIPPETS_FILE,
    Category,
    KnowledgeBase,
    SnippetMetadata,
    StructuredText,
    add_snippet,
    embed_all,
    kb_from_snippets,
    load_kb,
    merge_kbs,
    metadata_canonical_string,
    parse_metadata_string,
    save_kb,
)


def test_canonical_string_matches_guideline_layout():
    assert metadata_canonical_string(ESH) == (
        "Hypertension: 2023 ESH Guidelines for the management of arterial hypertension:2023:"
        "European Society of Hypertension"
    )
    assert metadata_canonical_string(SnippetMetadata("X", "Y", 2000, "Z")) == "X: Y:2000:Z"


def test_parse_title_with_colon():
    m = SnippetMetadata("Hypertension", "Hypertension in adults: diagnosis and management", 2023, "NICE")
    assert parse_metadata_string(metadata_canonical_string(m)) == m


no_colon = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters=":"), min_size=1, max_size=20)


@given(
    domain=no_colon.filter(lambda s: s.strip()),
    title=st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=30).filter(lambda s: s.strip()),
    year=st.integers(1900, 2100),
    org=no_colon.filter(lambda s: s.strip()),
)
def test_metadata_round_trip(domain, title, year, org):
    m = SnippetMetadata(domain, title, year, org)
    assert parse_metadata_string(metadata_canonical_string(m)) == m


@pytest.mark.parametrize("kwargs", [
    dict(disease_domain="", title="t", year=2000, organization="o"),
    dict(disease_domain="d", title="t", year=1800, organization="o"),
    dict(disease_domain="d", title="t", year=2000, organization="a:b"),
])
def test_metadata_invariants(kwargs):
    with pytest.raises(ValidationError):
        SnippetMetadata(**kwargs)


def test_table_snippet_needs_locator():
    with pytest.raises(ValidationError):
        make_snippet(1, "Table 1. Grades", content_kind="table")
    s = make_snippet(1, "Table 1. Grades", content_kind="table", extras=(("url", "http://x"),))
    assert s.extra("url") == "http://x"


def test_category_must_agree_with_extras():
    with pytest.raises(ValidationError):
        make_snippet(1, "c", Category.OTHER, extras=(("category", "intervention_treatment"),))


def test_flatten_joins_structured_text():
    t = StructuredText("BP MEASUREMENT AND MONITORING", "Office BP measurements", "Office BP is recommended.")
    assert t.flatten() == "BP MEASUREMENT AND MONITORING: Office BP measurements: Office BP is recommended."


def test_add_snippet():
    kb = add_snippet(KnowledgeBase(), make_snippet(1, "a"))
    assert len(kb) == 1
    with pytest.raises(DuplicateId):
        add_snippet(kb, make_snippet(1, "b"))
    kb64 = KnowledgeBase([], None, 64)
    vec = tuple(np.eye(32)[0])
    with pytest.raises(DimensionMismatch):
        add_snippet(kb64, make_snippet(2, "c", embedding=vec))


def test_embed_all(embedder):
    kb = kb_from_snippets([make_snippet(1, "alpha"), make_snippet(2, "beta gamma"), make_snippet(3, "alpha")])
    out = embed_all(kb, embedder)
    assert out.embedder_fingerprint == embedder.fingerprint and out.dimension == 256
    for s in out.snippets:
        assert abs(np.linalg.norm(s.embedding) - 1) <= 1e-6
        assert s.embedding == embedder.embed(s.text.flatten()).values
    assert out.snippets[0].embedding == out.snippets[2].embedding
    assert embed_all(kb, embedder) == out
    assert kb.snippets[0].embedding is None  # input untouched


def random_kb(n: int, seed: int = 0, embedded: bool = True) -> KnowledgeBase:
    rng = random.Random(seed)
    words = "office bp targets treatment grade hypertension monitoring drug lifestyle cuff".split()
    snippets = [
        make_snippet(i * 3 + 1, " ".join(rng.choices(words, k=rng.randint(3, 12))),
                     rng.choice(list(Category)), extras=(("CoR", rng.choice("I II III".split())),))
        for i in range(n)
    ]
    kb = kb_from_snippets(snippets)
    return embed_all(kb, HashEmbedder(64, seed)) if embedded else kb


def test_round_trip_351_snippets(tmp_path):
    kb = random_kb(351)
    save_kb(kb, tmp_path)
    loaded = load_kb(tmp_path)
    assert loaded == kb
    assert loaded.embedder_fingerprint == kb.embedder_fingerprint
    assert all(a.embedding == b.embedding for a, b in zip(loaded.snippets, kb.snippets))


def test_round_trip_unembedded(tmp_path):
    kb = random_kb(5, embedded=False)
    save_kb(kb, tmp_path)
    assert load_kb(tmp_path) == kb


def test_load_then_save_is_byte_identical(tmp_path):
    save_kb(random_kb(20, seed=3), tmp_path / "a")
    save_kb(load_kb(tmp_path / "a"), tmp_path / "b")
    for name in (SNIPPETS_FILE, MANIFEST_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def _rewrite_first_line(path, mutate):
    lines = (path / SNIPPETS_FILE).read_text().splitlines()
    obj = json.loads(lines[0])
    mutate(obj)
    lines[0] = json.dumps(obj)
    (path / SNIPPETS_FILE).write_text("\n".join(lines) + "\n")


def test_load_missing_metadata_is_schema_error(tmp_path):
    save_kb(random_kb(3), tmp_path)
    _rewrite_first_line(tmp_path, lambda o: o.pop("metadata"))
    with pytest.raises(SchemaError):
        load_kb(tmp_path)


def test_load_unknown_field_is_schema_error(tmp_path):
    save_kb(random_kb(3), tmp_path)
    _rewrite_first_line(tmp_path, lambda o: o.update(score=1))
    with pytest.raises(SchemaError):
        load_kb(tmp_path)


def test_load_rejects_duplicate_ids(tmp_path):
    save_kb(random_kb(3), tmp_path)
    _rewrite_first_line(tmp_path, lambda o: o.update(id=4))  # second snippet has id 4
    with pytest.raises(DuplicateId):
        load_kb(tmp_path)


def test_merge_requires_same_fingerprint():
    a = random_kb(2, seed=1)
    b = embed_all(kb_from_snippets([make_snippet(100, "x")]), HashEmbedder(64, 2))
    with pytest.raises(FingerprintMismatch):
        merge_kbs(a, b)
    c = embed_all(kb_from_snippets([make_snippet(100, "x")]), HashEmbedder(64, 1))
    assert len(merge_kbs(a, c)) == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_round_trip_property(tmp_path_factory, n, seed):
    path = tmp_path_factory.mktemp("kb")
    kb = random_kb(n, seed)
    save_kb(kb, path)
    assert load_kb(path) == kb


def test_fingerprint_dimension_must_match_kb():
    with pytest.raises(DimensionMismatch):
        KnowledgeBase([], EmbedderFingerprint("hash", 32, "00"), 64)
