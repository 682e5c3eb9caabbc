"""HTTP + JSON front of the study service (stdlib http.server, versioned
under /v1, errors as {code, message})."""

from __future__ import annotations

import json
import re
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .study import (
    EmptyStudy,
    InvalidFlag,
    NoJudgments,
    ScoreOutOfRange,
    StudyCase,
    StudyError,
    StudyService,
    UnknownCase,
    UnknownRater,
    encode_png,
)

_NOT_FOUND = (UnknownCase, UnknownRater)


def _status_for(exc: Exception) -> int:
    if isinstance(exc, _NOT_FOUND):
        return 404
    if isinstance(exc, (ScoreOutOfRange, InvalidFlag, EmptyStudy, NoJudgments,
                        StudyError, KeyError, TypeError, ValueError)):
        return 400
    return 500


class StudyRequestHandler(BaseHTTPRequestHandler):
    service: StudyService  # injected by make_server

    def log_message(self, fmt, *args):
        pass  # quiet by default; the CLI wires logging separately

    # ---- plumbing -----------------------------------------------------------

    def _send(self, status: int, payload, content_type="application/json"):
        body = payload if isinstance(payload, bytes) else \
            json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, exc: Exception):
        self._send(_status_for(exc), {"code": type(exc).__name__, "message": str(exc)})

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if length == 0:
            return {}
        return json.loads(self.rfile.read(length).decode("utf-8"))

    def do_OPTIONS(self):
        self._send(204, b"", content_type="text/plain")

    # ---- routes -------------------------------------------------------------

    def do_POST(self):
        try:
            path = urlparse(self.path).path
            body = self._body()
            if path == "/v1/sessions":
                cases = [StudyCase(case_id=c["case_id"], image_id=c.get("image_id", ""),
                                   reference=c["reference"], generated=c["generated"],
                                   overlays=c.get("overlays", {}))
                         for c in body.get("cases", [])]
                session = self.service.create_session(
                    cases, body.get("raters", []), int(body.get("seed", 0)))
                self._send(200, {"session_id": session.session_id,
                                 "raters": session.raters,
                                 "n_cases": len(session.cases)})
            elif path == "/v1/judgments/parallel":
                session = self.service.get(body["session_id"])
                ack = session.submit_parallel(body["rater_id"], body["case_id"],
                                              body["score_a"], body["score_b"])
                self._send(200, ack)
            elif path == "/v1/judgments/independent":
                session = self.service.get(body["session_id"])
                ack = session.submit_independent(
                    body["rater_id"], body["case_id"], body.get("groups", {}),
                    body.get("nonexistent_comparison", False),
                    body.get("nonexistent_lateral", False))
                self._send(200, ack)
            else:
                self._send(404, {"code": "NotFound", "message": path})
        except Exception as exc:  # surfaced as {code, message}
            self._error(exc)

    def do_GET(self):
        try:
            parsed = urlparse(self.path)
            path = parsed.path
            query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
            m = re.fullmatch(r"/v1/sessions/([^/]+)/next", path)
            if m:
                session = self.service.get(m.group(1))
                payload = session.next_case(query.get("rater", ""),
                                            query.get("protocol", "parallel"))
                self._send(200, payload if payload is not None else {"done": True})
                return
            m = re.fullmatch(r"/v1/sessions/([^/]+)/aggregate", path)
            if m:
                session = self.service.get(m.group(1))
                self._send(200, session.aggregate().to_json())
                return
            m = re.fullmatch(r"/v1/cases/([^/]+)/image", path)
            if m:
                _, case = self.service.find_case(m.group(1))
                if case.image_id not in self.service.images:
                    raise UnknownCase(f"no image for {case.image_id!r}")
                png = encode_png(self.service.images[case.image_id])
                self._send(200, png, content_type="image/png")
                return
            m = re.fullmatch(r"/v1/cases/([^/]+)/overlays", path)
            if m:
                _, case = self.service.find_case(m.group(1))
                self._send(200, case.overlays)
                return
            self._send(404, {"code": "NotFound", "message": path})
        except Exception as exc:
            self._error(exc)


def make_server(service: StudyService, host: str = "127.0.0.1",
                port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (StudyRequestHandler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)
