import json
import logging
import os
import threading
import unittest
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Optional
from unittest import mock

from backends.base import GenerationRequest
from backends.remote import ChatCompletionsBackend
from config import BackendConfig
from errors import BackendRefusal, TransportError
from utils.http import HttpClient, HttpResponse


class _StubHandler(BaseHTTPRequestHandler):
    # Per-server queue of (status, body) replies; the last one repeats.
    replies: list[tuple[int, str]] = []
    seen: list[dict[str, Any]] = []

    def do_POST(self) -> None:  # noqa: N802
        length = int(self.headers.get("Content-Length") or 0)
        body = json.loads(self.rfile.read(length).decode("utf-8"))
        self.seen.append({"body": body, "auth": self.headers.get("Authorization")})
        status, text = self.replies[0] if len(self.replies) == 1 else self.replies.pop(0)
        data = text.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args: Any) -> None:
        return


def _config(url: str, **overrides: Any) -> BackendConfig:
    values = dict(
        kind="remote",
        endpoint_url=url,
        model_name="seed-13b",
        api_key_env="COVRAG_TEST_KEY",
        timeout_seconds=5.0,
        retry_attempts=2,
        backoff_seconds=(0.0,),
        max_in_flight=2,
        user_agent="covrag-tests",
    )
    values.update(overrides)
    return BackendConfig(**values)


class TestChatCompletionsBackend(unittest.TestCase):
    def setUp(self) -> None:
        handler = type("Handler", (_StubHandler,), {"replies": [], "seen": []})
        self.handler = handler
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        self.logger = logging.getLogger("covrag.tests")

    def tearDown(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def _backend(self, **overrides: Any) -> ChatCompletionsBackend:
        return ChatCompletionsBackend.from_config(_config(self.url, **overrides), logger=self.logger)

    def test_generate_posts_request_and_reads_first_choice(self) -> None:
        self.handler.replies.append((200, json.dumps({"choices": [{"message": {"content": "Beorn[1]\nQuestion: x"}}]})))
        with mock.patch.dict(os.environ, {"COVRAG_TEST_KEY": "secret"}):
            out = self._backend().generate(
                GenerationRequest(prompt="who turns into a bear", max_tokens=64, stop_sequences=("\nQuestion:",))
            )
        self.assertEqual(out, "Beorn[1]")
        seen = self.handler.seen[0]
        self.assertEqual(seen["auth"], "Bearer secret")
        self.assertEqual(seen["body"]["model"], "seed-13b")
        self.assertEqual(seen["body"]["messages"], [{"role": "user", "content": "who turns into a bear"}])
        self.assertEqual(seen["body"]["max_tokens"], 64)
        self.assertEqual(seen["body"]["temperature"], 0.0)
        self.assertEqual(seen["body"]["stop"], ["\nQuestion:"])

    def test_missing_key_sends_no_authorization(self) -> None:
        self.handler.replies.append((200, json.dumps({"choices": [{"text": "plain"}]})))
        with mock.patch.dict(os.environ, {}, clear=False):
            os.environ.pop("COVRAG_TEST_KEY", None)
            out = self._backend().generate(GenerationRequest(prompt="p"))
        self.assertEqual(out, "plain")
        self.assertIsNone(self.handler.seen[0]["auth"])
        self.assertNotIn("stop", self.handler.seen[0]["body"])

    def test_http_error_is_a_refusal_and_not_retried(self) -> None:
        self.handler.replies.append((400, '{"error": "context length exceeded"}'))
        with self.assertRaises(BackendRefusal) as ctx:
            self._backend().generate(GenerationRequest(prompt="p"))
        self.assertEqual(ctx.exception.status, 400)
        self.assertIn("context length", ctx.exception.body)
        self.assertEqual(len(self.handler.seen), 1)

    def test_reply_without_choices_is_a_refusal(self) -> None:
        self.handler.replies.append((200, json.dumps({"choices": []})))
        with self.assertRaises(BackendRefusal):
            self._backend().generate(GenerationRequest(prompt="p"))

    def test_non_json_reply_is_a_refusal(self) -> None:
        self.handler.replies.append((200, "<html>gateway</html>"))
        with self.assertRaises(BackendRefusal):
            self._backend().generate(GenerationRequest(prompt="p"))

    def test_missing_endpoint_rejected(self) -> None:
        with self.assertRaises(ValueError):
            ChatCompletionsBackend.from_config(_config(""), logger=self.logger)


class _FlakyClient(HttpClient):
    """Fails the first `failures` sends with a transport error, then answers."""

    def __init__(self, failures: int, **kwargs: Any):
        super().__init__(**kwargs)
        object.__setattr__(self, "failures", failures)
        object.__setattr__(self, "calls", 0)

    def _send(self, method: str, url: str, *, params: Optional[dict] = None, payload: Optional[dict] = None, headers: Optional[dict] = None) -> HttpResponse:
        object.__setattr__(self, "calls", self.calls + 1)
        if self.calls <= self.failures:
            raise TransportError("connection reset")
        return HttpResponse(status=200, reason="OK", url=url, text=json.dumps({"choices": [{"message": {"content": "ok"}}]}))


class TestRetries(unittest.TestCase):
    def _backend(self, client: HttpClient) -> ChatCompletionsBackend:
        return ChatCompletionsBackend(_config("http://127.0.0.1:9/v1"), http=client, logger=logging.getLogger("covrag.tests"))

    def test_transport_error_retried_within_budget(self) -> None:
        client = _FlakyClient(1, timeout_seconds=1, user_agent="t", retry_attempts=2, backoff_seconds=(0.0,))
        self.assertEqual(self._backend(client).generate(GenerationRequest(prompt="p")), "ok")
        self.assertEqual(client.calls, 2)

    def test_transport_error_surfaces_after_budget(self) -> None:
        client = _FlakyClient(5, timeout_seconds=1, user_agent="t", retry_attempts=3, backoff_seconds=(0.0, 0.0))
        with self.assertRaises(TransportError):
            self._backend(client).generate(GenerationRequest(prompt="p"))
        self.assertEqual(client.calls, 3)
