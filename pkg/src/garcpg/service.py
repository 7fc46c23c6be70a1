"""Read-only HTTP query service over a loaded knowledge-base snapshot.

Endpoints: ``POST /v1/query`` (case document in, SystemOutput JSON out) and
``GET /v1/health``.
"""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .embedder import Embedder, parse_embedder_spec
from .errors import FingerprintMismatch, GarError, SchemaError, ValidationError
from .pipeline import PipelineConfig, answer_case, check_fingerprint
from .query import case_from_json
from .snippet_kb import KnowledgeBase

log = logging.getLogger(__name__)


class QueryService:
    def __init__(self, kb: KnowledgeBase, embedder: Embedder, cfg: PipelineConfig) -> None:
        check_fingerprint(kb, embedder)
        self.kb = kb
        self.embedder = embedder
        self.cfg = cfg

    def health(self) -> dict:
        fp = self.kb.embedder_fingerprint
        return {
            "status": "ok",
            "snippets": len(self.kb),
            "dimension": self.kb.dimension,
            "embedder": fp.to_dict() if fp else None,
        }

    def query(self, body: bytes) -> tuple[int, str]:
        """Returns (HTTP status, response text)."""
        try:
            data = json.loads(body.decode("utf-8"))
            if not isinstance(data, dict):
                raise SchemaError("request body must be a JSON object")
            case = case_from_json(data, extra_keys=("embedder",))
        except (UnicodeDecodeError, json.JSONDecodeError, SchemaError) as exc:
            return 400, _error(str(exc))
        if "embedder" in data:
            try:
                requested = parse_embedder_spec(str(data["embedder"]))
                if requested.fingerprint != self.kb.embedder_fingerprint:
                    return 409, _error("requested embedder does not match the knowledge base")
            except ValidationError as exc:
                return 400, _error(str(exc))
            except GarError as exc:
                return 409, _error(str(exc))
        try:
            out = answer_case(case, self.kb, self.embedder, self.cfg)
        except FingerprintMismatch as exc:
            return 409, _error(str(exc))
        except ValidationError as exc:
            return 400, _error(str(exc))
        except Exception as exc:  # noqa: BLE001 - reported as a 500
            log.exception("query failed")
            return 500, _error(f"internal error: {exc}")
        return 200, out.render()


def _error(message: str) -> str:
    return json.dumps({"error": message}) + "\n"


def make_server(service: QueryService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, text: str) -> None:
            payload = text.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self) -> None:  # noqa: N802
            if self.path == "/v1/health":
                self._send(200, json.dumps(service.health(), sort_keys=True) + "\n")
            else:
                self._send(404, _error("not found"))

        def do_POST(self) -> None:  # noqa: N802
            if self.path != "/v1/query":
                self._send(404, _error("not found"))
                return
            length = int(self.headers.get("Content-Length") or 0)
            self._send(*service.query(self.rfile.read(length)))

        def log_message(self, fmt: str, *args) -> None:
            log.info("%s - %s", self.address_string(), fmt % args)

    return ThreadingHTTPServer((host, port), Handler)
