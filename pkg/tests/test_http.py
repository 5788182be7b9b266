import threading
import unittest
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import requests

from errors import HttpStatusError, InvalidUrl, NetworkDisabledError
from utils.http import HttpClient, network_denied


class _PageHandler(BaseHTTPRequestHandler):
    def do_GET(self) -> None:  # noqa: N802
        if self.path.startswith("/big"):
            data = b"a" * 5000
            status = 200
        elif self.path.startswith("/missing"):
            data = b"no such page"
            status = 404
        else:
            data = "café ok".encode("utf-8")
            status = 200
        self.send_response(status)
        self.send_header("Content-Type", "text/html")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args: Any) -> None:
        return


class TestHttpClient(unittest.TestCase):
    def setUp(self) -> None:
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _PageHandler)
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        self.base = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.client = HttpClient(timeout_seconds=5, user_agent="covrag-tests", retry_attempts=1, backoff_seconds=())

    def tearDown(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def test_text_defaults_to_utf8_without_charset(self) -> None:
        self.assertEqual(self.client.get_text(self.base + "/page"), "café ok")

    def test_body_is_capped(self) -> None:
        client = HttpClient(timeout_seconds=5, user_agent="t", retry_attempts=1, backoff_seconds=(), max_body_bytes=1000)
        resp = client.request("GET", self.base + "/big")
        self.assertEqual(len(resp.text), 1000)
        self.assertTrue(resp.truncated)

    def test_status_error_carries_status_and_body(self) -> None:
        with self.assertRaises(HttpStatusError) as ctx:
            self.client.get_text(self.base + "/missing")
        self.assertEqual(ctx.exception.status, 404)
        self.assertEqual(ctx.exception.body, "no such page")
        self.assertIn("404", str(ctx.exception))

    def test_network_denied_blocks_requests(self) -> None:
        with network_denied():
            with self.assertRaises(NetworkDisabledError):
                self.client.get_text(self.base + "/page")
        self.assertEqual(self.client.get_text(self.base + "/page"), "café ok")


class _SessionCountingClient(HttpClient):
    def __init__(self) -> None:
        super().__init__(timeout_seconds=1, user_agent="t", retry_attempts=3, backoff_seconds=())
        object.__setattr__(self, "sessions", [])

    def _session(self) -> requests.Session:
        self.sessions.append(1)
        return super()._session()


class TestUnsendableUrls(unittest.TestCase):
    def test_unsupported_scheme_is_invalid_url(self) -> None:
        client = _SessionCountingClient()
        with network_denied():
            with self.assertRaises(InvalidUrl) as ctx:
                client.get_text("ftp://files.example/x")
        self.assertIn("ftp://files.example/x", str(ctx.exception))
        self.assertEqual(len(client.sessions), 1)

    def test_missing_scheme_is_invalid_url(self) -> None:
        client = _SessionCountingClient()
        with network_denied():
            with self.assertRaises(InvalidUrl):
                client.get_text("files.example/no-scheme")
        self.assertEqual(len(client.sessions), 1)
