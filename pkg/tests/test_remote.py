"""Remote HTTP backends against a local stub server."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from trialmatch.gateway import (
    BackendConfig,
    BackendKind,
    BackendUnavailable,
    EnumSchema,
    GatewayRequest,
    PromptSection,
    TaskTag,
    complete_structured,
)
from trialmatch.vecindex import ProviderBadResponse, ProviderUnavailable, RemoteEmbedder


class StubHandler(BaseHTTPRequestHandler):
    responses: list[tuple[int, dict]] = []
    requests: list[dict] = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        StubHandler.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
        status, payload = StubHandler.responses.pop(0) if StubHandler.responses else (500, {})
        blob = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    StubHandler.responses = []
    StubHandler.requests = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    thread.join(timeout=5)


ENUM = EnumSchema(("eligible", "ineligible", "unknown"))


def request_for(schema=ENUM):
    return GatewayRequest(
        task_tag=TaskTag.EVALUATE_CRITERION,
        sections=(PromptSection("instruction", "decide"),),
        schema=schema,
    )


class TestRemoteHttpBackend:
    def make_backend(self, endpoint):
        return BackendConfig(kind=BackendKind.REMOTE_HTTP, endpoint=endpoint, model="demo", max_retries=1)

    def test_chat_completion_round_trip(self, stub_server, monkeypatch):
        monkeypatch.setenv("TRIALMATCH_LLM_TOKEN", "sekrit")
        StubHandler.responses = [(200, {"choices": [{"message": {"content": '"eligible"'}}]})]
        value = complete_structured(request_for(), self.make_backend(stub_server))
        assert value == "eligible"
        sent = StubHandler.requests[0]
        assert sent["auth"] == "Bearer sekrit"
        assert sent["body"]["model"] == "demo"
        assert "decide" in sent["body"]["messages"][0]["content"]

    def test_invalid_then_valid_retries_over_http(self, stub_server):
        StubHandler.responses = [
            (200, {"choices": [{"message": {"content": "maybe"}}]}),
            (200, {"choices": [{"message": {"content": "unknown"}}]}),
        ]
        value = complete_structured(request_for(), self.make_backend(stub_server))
        assert value == "unknown"
        assert len(StubHandler.requests) == 2

    def test_http_error_is_backend_unavailable(self, stub_server):
        StubHandler.responses = [(503, {})]
        with pytest.raises(BackendUnavailable):
            complete_structured(request_for(), self.make_backend(stub_server))

    def test_malformed_shape_is_backend_unavailable(self, stub_server):
        StubHandler.responses = [(200, {"unexpected": True})]
        with pytest.raises(BackendUnavailable):
            complete_structured(request_for(), self.make_backend(stub_server))

    def test_unreachable_endpoint(self):
        backend = self.make_backend("http://127.0.0.1:1/never")
        backend.timeout_seconds = 0.5
        with pytest.raises(BackendUnavailable):
            complete_structured(request_for(), backend)


class TestRemoteEmbedder:
    def test_batch_round_trip_with_token(self, stub_server):
        StubHandler.responses = [(200, {"embeddings": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]})]
        embedder = RemoteEmbedder(endpoint=stub_server, dim=3, token="abc")
        vectors = embedder.embed_batch(["a", "b"])
        assert [list(v) for v in vectors] == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        sent = StubHandler.requests[0]
        assert sent["body"] == {"texts": ["a", "b"]}
        assert sent["auth"] == "Bearer abc"

    def test_bare_list_response_accepted(self, stub_server):
        StubHandler.responses = [(200, [[0.5, 0.5]])]
        embedder = RemoteEmbedder(endpoint=stub_server, dim=2)
        assert list(embedder.embed("x")) == [0.5, 0.5]

    def test_length_mismatch_is_bad_response(self, stub_server):
        StubHandler.responses = [(200, {"embeddings": [[1.0, 0.0]]})]
        embedder = RemoteEmbedder(endpoint=stub_server, dim=2)
        with pytest.raises(ProviderBadResponse):
            embedder.embed_batch(["a", "b"])

    def test_wrong_dim_is_bad_response(self, stub_server):
        StubHandler.responses = [(200, {"embeddings": [[1.0, 0.0, 0.0]]})]
        embedder = RemoteEmbedder(endpoint=stub_server, dim=2)
        with pytest.raises(ProviderBadResponse):
            embedder.embed("a")

    def test_http_error_is_unavailable(self, stub_server):
        StubHandler.responses = [(500, {})]
        embedder = RemoteEmbedder(endpoint=stub_server, dim=2)
        with pytest.raises(ProviderUnavailable):
            embedder.embed("a")

    def test_unreachable_endpoint(self):
        embedder = RemoteEmbedder(endpoint="http://127.0.0.1:1/never", dim=2, timeout=0.5)
        with pytest.raises(ProviderUnavailable):
            embedder.embed("a")
