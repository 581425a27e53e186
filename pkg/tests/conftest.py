import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from autorubric.judge import Gateway, OracleBackend, OracleConfig
from autorubric.preference import Candidate, Label, PreferenceDataset, PreferencePair, synthetic_feature_dataset

WEIGHTS = (1.0, 0.5, -0.3, 2.0)


def feature_pair(pid, f1, f2, label=Label.FIRST, prompt="p"):
    return PreferencePair(
        id=pid,
        prompt=prompt,
        first=Candidate(f"{pid}-a", feature_vector=tuple(f1)),
        second=Candidate(f"{pid}-b", feature_vector=tuple(f2)),
        label=label,
    )


def no_sleep(_):
    pass


def oracle_gateway(weights=WEIGHTS, **kw):
    seed = kw.pop("seed", 0)
    return Gateway(OracleBackend(OracleConfig(tuple(weights), seed=seed, **kw)), sleep=no_sleep)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synthetic(rng):
    return synthetic_feature_dataset(30, WEIGHTS, rng)


class StubServer:
    """Local chat-completions stub. ``script`` is a list of (status, body) served in order;
    the last entry repeats. Requests are recorded."""

    def __init__(self):
        self.script = [(200, {"choices": [{"message": {"content": "hello"}}]})]
        self.requests = []
        self.delay_s = 0.0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                stub.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                idx = min(len(stub.requests) - 1, len(stub.script) - 1)
                status, payload = stub.script[idx]
                if callable(payload):
                    payload = payload(body)
                if stub.delay_s:
                    import time

                    time.sleep(stub.delay_s)
                data = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def reply(self, text, status=200):
        return (status, {"choices": [{"message": {"role": "assistant", "content": text}}]})

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    s = StubServer()
    yield s
    s.close()


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
