import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class StubServer:
    """Tiny local HTTP server. ``routes[(method, path)]`` is a callable
    ``(body_bytes, headers) -> (status, content_type, payload)``; dict/list payloads
    are sent as JSON. Every request is recorded in ``hits``."""

    def __init__(self):
        self.routes = {}
        self.hits = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def _serve(self, method):
                n = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(n) if n else b""
                stub.hits.append((method, self.path, dict(self.headers)))
                route = stub.routes.get((method, self.path))
                if route is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                status, ctype, payload = route(body, self.headers)
                if isinstance(payload, (dict, list)):
                    payload = json.dumps(payload).encode()
                elif isinstance(payload, str):
                    payload = payload.encode()
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self):
                self._serve("GET")

            def do_POST(self):
                self._serve("POST")

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}"

    def json_route(self, path, fn, method="POST"):
        def route(body, headers):
            data = json.loads(body) if body else None
            out = fn(data)
            if isinstance(out, tuple):
                return out[0], "application/json", out[1]
            return 200, "application/json", out
        self.routes[(method, path)] = route

    def count(self, path) -> int:
        return sum(1 for _, p, _ in self.hits if p == path)

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub():
    server = StubServer()
    yield server
    server.close()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
