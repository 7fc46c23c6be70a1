"""Command-line entry point: ``garcpg {ingest,embed,query,eval,ablate,serve}``.

Exit codes: 0 success, 1 operational failure (parse errors, embedder or
fingerprint problems), 2 data problems (bad case files, errored cases).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .embedder import Embedder, parse_embedder_spec
from .errors import EmbedderFailure, FingerprintMismatch, GarError, ParseError, SchemaError, ValidationError
from .evalharness import (
    CorrectnessCriterion,
    evaluate_corpus,
    format_table,
    load_ground_truth,
    parse_criterion_spec,
    report_json,
    run_ablation,
)
from .ingest import ExtractionConfig, filter_relevant, load_guideline_document, parse_annotated_document
from .pipeline import PipelineConfig, answer_case, check_fingerprint
from .query import WeightingConfig, WeightMode, case_from_json
from .retrieval import RetrievalConfig
from .snippet_kb import Category, KnowledgeBase, embed_all, kb_from_snippets, load_kb, save_kb

log = logging.getLogger("garcpg")

EXIT_OK, EXIT_OPERATIONAL, EXIT_DATA = 0, 1, 2

DEFAULTS = {
    "kb": None,
    "embedder": "hash:dim=256:seed=7",
    "k": 5,
    "tau": 0.30,
    "dedup": 0.95,
    "context": None,
    "boost": 1.1,
    "lambda": None,
    "current_weight": 0.6,
    "weights": None,
    "history_window": 2,
    "criterion": "exact",
}


@dataclass(frozen=True)
class RunConfig:
    kb_path: str | None
    embedder_spec: str
    pipeline: PipelineConfig
    criterion_spec: str

    def embedder(self) -> Embedder:
        return parse_embedder_spec(self.embedder_spec)

    def criterion(self) -> CorrectnessCriterion:
        return parse_criterion_spec(self.criterion_spec)

    def to_json(self) -> dict:
        return {
            "kb": self.kb_path,
            "embedder": self.embedder_spec,
            **self.pipeline.to_json(),
            "criterion": self.criterion().to_json(),
        }


def _parse_weights(value) -> tuple[float, ...]:
    if isinstance(value, str):
        return tuple(float(x) for x in value.split(","))
    return tuple(float(x) for x in value)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then ``--config`` file values, then explicit flags."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        merged.update(file_cfg)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value

    weights = merged["weights"]
    lam = merged["lambda"]
    if weights is not None and lam is not None:
        raise ValidationError("--weights (fixed mode) and --lambda (time decay) are exclusive")
    if lam is not None:
        weighting = WeightingConfig(WeightMode.TIME_DECAY, decay_lambda=float(lam),
                                    current_weight=float(merged["current_weight"]), fixed_weights=None,
                                    history_window=int(merged["history_window"]))
    else:
        fixed = _parse_weights(weights) if weights is not None else (0.6, 0.25, 0.15)
        weighting = WeightingConfig(WeightMode.FIXED, fixed_weights=fixed,
                                    history_window=int(merged["history_window"]))
    retrieval = RetrievalConfig(
        k=int(merged["k"]),
        tau=float(merged["tau"]),
        dedup_threshold=float(merged["dedup"]),
        context=Category(merged["context"]) if merged["context"] else None,
        context_boost=float(merged["boost"]),
    )
    cfg = RunConfig(merged["kb"], str(merged["embedder"]), PipelineConfig(retrieval, weighting),
                    str(merged["criterion"]))
    cfg.criterion()  # validate early
    return cfg


def _err(msg: str) -> None:
    print(f"garcpg: {msg}", file=sys.stderr)


def _load_embedded_kb(cfg: RunConfig) -> tuple[KnowledgeBase, Embedder]:
    if not cfg.kb_path:
        raise ValidationError("--kb is required")
    kb = load_kb(cfg.kb_path)
    embedder = cfg.embedder()
    check_fingerprint(kb, embedder)
    return kb, embedder


def cmd_ingest(args: argparse.Namespace) -> int:
    if not args.docs:
        _err("usage: garcpg ingest DOC [DOC ...] --out KB_DIR")
        return EXIT_OPERATIONAL
    ecfg = ExtractionConfig(relevance_threshold=args.relevance_threshold)
    snippets = []
    next_id = args.base_id
    for path in args.docs:
        try:
            doc = load_guideline_document(path)
            parsed = parse_annotated_document(doc, base_id=next_id)
        except ParseError as exc:
            _err(f"parse error: {exc}")
            return EXIT_OPERATIONAL
        except OSError as exc:
            _err(f"cannot read {path}: {exc}")
            return EXIT_OPERATIONAL
        kept = filter_relevant(parsed, ecfg)
        print(f"{path}: {len(parsed)} snippets, {len(kept)} kept")
        snippets.extend(kept)
        next_id += len(parsed)
    save_kb(kb_from_snippets(snippets), args.out)
    print(f"wrote {len(snippets)} snippets to {args.out}")
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    if not cfg.kb_path:
        _err("--kb is required")
        return EXIT_OPERATIONAL
    try:
        kb = load_kb(cfg.kb_path)
        embedded = embed_all(kb, cfg.embedder())
    except EmbedderFailure as exc:
        _err(f"embedding failed, knowledge base left unchanged: {exc}")
        return EXIT_OPERATIONAL
    save_kb(embedded, cfg.kb_path)
    fp = embedded.embedder_fingerprint
    print(f"embedded {len(embedded)} snippets with {fp.name} (dim {fp.dimension})")
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    try:
        kb, embedder = _load_embedded_kb(cfg)
    except FingerprintMismatch as exc:
        _err(f"fingerprint mismatch: {exc}")
        return EXIT_OPERATIONAL
    try:
        data = json.loads(Path(args.case).read_text(encoding="utf-8"))
        case = case_from_json(data)
    except (OSError, json.JSONDecodeError, SchemaError) as exc:
        _err(f"bad case file {args.case}: {exc}")
        return EXIT_DATA
    sys.stdout.write(answer_case(case, kb, embedder, cfg.pipeline).render())
    return EXIT_OK


def _write_report(rows, cfg: RunConfig, out: str | None) -> None:
    table = format_table(rows)
    sys.stdout.write(table)
    if out:
        Path(out).write_text(report_json(rows, cfg.to_json()), encoding="utf-8")
        Path(out).with_suffix(".txt").write_text(table, encoding="utf-8")


def _run_eval(args: argparse.Namespace, ablate: bool) -> int:
    cfg = build_run_config(args)
    try:
        kb, embedder = _load_embedded_kb(cfg)
    except FingerprintMismatch as exc:
        _err(f"fingerprint mismatch: {exc}")
        return EXIT_OPERATIONAL
    try:
        cases = load_ground_truth(args.cases)
    except (OSError, SchemaError) as exc:
        _err(f"bad ground-truth file: {exc}")
        return EXIT_DATA
    if not cases:
        _err(f"no cases in {args.cases}; report is empty")
        _write_report([], cfg, args.out)
        return EXIT_DATA
    criterion = cfg.criterion()
    if ablate:
        rows = run_ablation(cases, kb, embedder, cfg.pipeline, criterion)
    else:
        rows = [evaluate_corpus(cases, kb, embedder, cfg.pipeline, criterion)]
    _write_report(rows, cfg, args.out)
    n_errors = sum(len(r.errors) for r in rows)
    if n_errors:
        _err(f"{n_errors} case evaluations failed")
        return EXIT_DATA
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    return _run_eval(args, ablate=False)


def cmd_ablate(args: argparse.Namespace) -> int:
    return _run_eval(args, ablate=True)


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import QueryService, make_server

    cfg = build_run_config(args)
    try:
        kb, embedder = _load_embedded_kb(cfg)
    except FingerprintMismatch as exc:
        _err(f"fingerprint mismatch: {exc}")
        return EXIT_OPERATIONAL
    host, _, port = args.bind.rpartition(":")
    server = make_server(QueryService(kb, embedder, cfg.pipeline), host or "127.0.0.1", int(port))
    print(f"serving {len(kb)} snippets on http://{host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser, eval_defaults: bool = False) -> None:
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--kb", help="knowledge-base directory")
    p.add_argument("--embedder", help="hash:dim=N:seed=S or remote:url=URL")
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--dedup", type=float)
    p.add_argument("--context", choices=[c.value for c in Category])
    p.add_argument("--boost", type=float)
    p.add_argument("--lambda", dest="lambda", type=float, help="time-decay rate per day")
    p.add_argument("--current-weight", dest="current_weight", type=float)
    p.add_argument("--weights", help="fixed weights w0,w1,w2")
    p.add_argument("--history-window", dest="history_window", type=int)
    p.add_argument("--criterion", help="exact | semantic[:theta=0.72][:url=URL]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="garcpg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse annotated guideline documents into a knowledge base")
    p.add_argument("docs", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--base-id", type=int, default=1)
    p.add_argument("--relevance-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_ingest)

    for name, func, help_ in (
        ("embed", cmd_embed, "embed every snippet of a knowledge base"),
        ("query", cmd_query, "answer one case file"),
        ("eval", cmd_eval, "evaluate a ground-truth file"),
        ("ablate", cmd_ablate, "three-arm ablation over a ground-truth file"),
        ("serve", cmd_serve, "HTTP query service"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        p.set_defaults(func=func)
        if name == "query":
            p.add_argument("--case", required=True)
        elif name in ("eval", "ablate"):
            p.add_argument("--cases", required=True, help="ground-truth JSONL")
            p.add_argument("--out", help="write the JSON report here (table alongside as .txt)")
        elif name == "serve":
            p.add_argument("--bind", default="127.0.0.1:8080")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        _err(str(exc))
        return EXIT_OPERATIONAL
    except SchemaError as exc:
        _err(str(exc))
        return EXIT_DATA
    except GarError as exc:
        _err(str(exc))
        return EXIT_OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
