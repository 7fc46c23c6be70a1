"""Planted synthetic corpora for end-to-end and ablation checks.

Each target snippet owns a handful of made-up rare tokens that appear in
no other snippet; its case repeats those tokens in the query, so under the
hash embedder the target is the only snippet sharing unigrams and bigrams
with the query beyond a small common vocabulary.

Run ``python -m garcpg.synthetic OUTDIR`` to write a planted knowledge base
(unembedded), its ground-truth file and one case file.
"""

from __future__ import annotations

import datetime as dt
import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .evalharness import GroundTruthCase, dump_ground_truth
from .query import Case, DiagnosticOutput, EhrRecord, case_to_json
from .retrieval import RetrievalConfig
from .pipeline import PipelineConfig
from .snippet_kb import (
    CLINICAL_CATEGORIES,
    KnowledgeBase,
    Snippet,
    SnippetMetadata,
    StructuredText,
    kb_from_snippets,
    save_kb,
)

METADATA = SnippetMetadata(
    "Hypertension", "Synthetic guideline for retrieval testing", 2024, "Test Consortium"
)
DIAGNOSIS = DiagnosticOutput((("I10", "Essential (primary) hypertension"),))
COMMON_WORDS = ("blood", "pressure", "recommended", "patients", "assessment", "clinical")
# Filler for queries; never used in snippet text.
GENERIC_WORDS = ("admitted", "ward", "review", "stable", "overnight", "observation")
CURRENT_DATE = dt.date(2024, 3, 1)


def _rare_token(rng: random.Random, used: set[str]) -> str:
    consonants, vowels = "bdfgklmnprstvz", "aeiou"
    while True:
        tok = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(3)) + rng.choice("qxj")
        if tok not in used:
            used.add(tok)
            return tok


@dataclass
class PlantedFixture:
    snippets: list[Snippet]
    cases: list[GroundTruthCase]
    config: PipelineConfig = field(default_factory=PipelineConfig)
    # Case ids whose discriminative tokens live only in the history.
    history_sensitive: list[str] = field(default_factory=list)

    @property
    def kb(self) -> KnowledgeBase:
        return kb_from_snippets(self.snippets)


def _snippets(rng: random.Random, n: int, tokens_per: int = 8) -> tuple[list[Snippet], list[list[str]]]:
    used: set[str] = set()
    snippets, rare = [], []
    for i in range(n):
        toks = [_rare_token(rng, used) for _ in range(tokens_per)]
        common = rng.sample(COMMON_WORDS, 3)
        content = " ".join(toks) + " " + " ".join(common) + "."
        cat = CLINICAL_CATEGORIES[i % 3]
        snippets.append(Snippet(
            id=i + 1,
            metadata=METADATA,
            text=StructuredText(f"CHAPTER {chr(ord('A') + i % 4)}", f"Section {i % 5}", content),
            category=cat,
            extras=(("CoR", "I"), ("LoE", "A"), ("category", cat.value)),
        ))
        rare.append(toks)
    return snippets, rare


def _history(date: dt.date, text: str) -> EhrRecord:
    return EhrRecord.historical(date, diagnosis="Hypertension", outpatient_notes=text)


def planted_corpus(seed: int = 2024, n_cases: int = 20, n_snippets: int = 60) -> PlantedFixture:
    """``n_cases`` cases whose targets are snippets 1..n_cases; the rest are distractors."""
    rng = random.Random(seed)
    snippets, rare = _snippets(rng, n_snippets)
    cases = []
    for i in range(n_cases):
        current = " ".join(rare[i]) + " " + " ".join(rng.sample(GENERIC_WORDS, 2))
        case = Case(
            DIAGNOSIS,
            EhrRecord.current(CURRENT_DATE, current),
            (_history(CURRENT_DATE - dt.timedelta(days=30 + i), "stable on review"),),
        )
        cases.append(GroundTruthCase(f"case-{i + 1:02d}", case, relevant_ids=(snippets[i].id,)))
    return PlantedFixture(snippets, cases)


def ablation_fixture(seed: int = 7, n_each: int = 10, n_snippets: int = 40) -> PlantedFixture:
    """Half the cases carry their signal in the current record, half only in history.

    The diagnosis is identical across cases, so a diagnosis-only query
    cannot tell cases apart.
    """
    rng = random.Random(seed)
    snippets, rare = _snippets(rng, n_snippets)
    cases, hist_ids = [], []
    for i in range(2 * n_each):
        signal = " ".join(rare[i])
        filler = " ".join(rng.sample(GENERIC_WORDS, 3))
        recent = CURRENT_DATE - dt.timedelta(days=20)
        older = CURRENT_DATE - dt.timedelta(days=200)
        if i < n_each:
            current, history = f"{signal} {filler}", (_history(recent, filler), _history(older, filler))
            cid = f"ehr-{i + 1:02d}"
        else:
            current, history = filler, (_history(recent, signal), _history(older, filler))
            cid = f"hist-{i + 1 - n_each:02d}"
            hist_ids.append(cid)
        case = Case(DIAGNOSIS, EhrRecord.current(CURRENT_DATE, current), history)
        cases.append(GroundTruthCase(cid, case, relevant_ids=(snippets[i].id,)))
    # History carries a minority of the query mass, so accept weaker matches.
    cfg = PipelineConfig(retrieval=RetrievalConfig(k=10, tau=0.05))
    return PlantedFixture(snippets, cases, cfg, hist_ids)


def write_fixture(out: str | Path, fixture: PlantedFixture | None = None) -> None:
    fixture = fixture or planted_corpus()
    out = Path(out)
    save_kb(fixture.kb, out / "kb")
    (out / "ground_truth.jsonl").write_text(dump_ground_truth(fixture.cases), encoding="utf-8")
    (out / "case.json").write_text(json.dumps(case_to_json(fixture.cases[0].case), indent=2) + "\n",
                                   encoding="utf-8")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python -m garcpg.synthetic OUTDIR")
    write_fixture(sys.argv[1])
