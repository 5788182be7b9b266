from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Iterator, Optional

import requests
from requests.adapters import HTTPAdapter
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_chain, wait_fixed, wait_none

from errors import HttpStatusError, InvalidUrl, NetworkDisabledError, TransportError


DEFAULT_MAX_BODY_BYTES = 1024 * 1024


@dataclass(frozen=True)
class HttpResponse:
    status: int
    reason: str
    url: str
    text: str
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def json(self) -> Any:
        return json.loads(self.text)


@dataclass(frozen=True)
class HttpClient:
    timeout_seconds: float
    user_agent: str
    retry_attempts: int = 2
    backoff_seconds: tuple[float, ...] = (0.5, 1.0)
    max_body_bytes: int = DEFAULT_MAX_BODY_BYTES
    max_redirects: int = 3

    def _session(self) -> requests.Session:
        s = requests.Session()
        s.headers.update({"User-Agent": self.user_agent, "Accept": "*/*"})
        s.max_redirects = self.max_redirects
        return s

    def _retrying(self) -> Retrying:
        wait = wait_chain(*[wait_fixed(x) for x in self.backoff_seconds]) if self.backoff_seconds else wait_none()
        return Retrying(
            stop=stop_after_attempt(max(1, self.retry_attempts)),
            wait=wait,
            retry=retry_if_exception_type(TransportError),
            reraise=True,
        )

    def _send(
        self,
        method: str,
        url: str,
        *,
        params: Optional[dict[str, Any]] = None,
        payload: Optional[dict[str, Any]] = None,
        headers: Optional[dict[str, str]] = None,
    ) -> HttpResponse:
        """One transport attempt. Network failures surface as TransportError; HTTP status is not checked here."""
        try:
            with self._session() as s:
                resp = s.request(
                    method,
                    url,
                    params=params,
                    json=payload,
                    headers=headers,
                    timeout=self.timeout_seconds,
                    stream=True,
                )
                try:
                    text, truncated = _read_capped(resp, self.max_body_bytes)
                finally:
                    resp.close()
                return HttpResponse(
                    status=int(resp.status_code),
                    reason=str(resp.reason or ""),
                    url=str(resp.url),
                    text=text,
                    truncated=truncated,
                )
        except (requests.ConnectionError, requests.Timeout, requests.exceptions.ChunkedEncodingError) as e:
            raise TransportError(f"{method} {url}: {type(e).__name__}: {e}") from e
        except requests.TooManyRedirects as e:
            raise TransportError(f"{method} {url}: more than {self.max_redirects} redirects") from e
        except (requests.exceptions.InvalidSchema, requests.exceptions.MissingSchema, requests.exceptions.InvalidURL) as e:
            raise InvalidUrl(f"{method} {url}: {type(e).__name__}: {e}") from e
        except requests.RequestException as e:
            raise TransportError(f"{method} {url}: {type(e).__name__}: {e}") from e

    def request(
        self,
        method: str,
        url: str,
        *,
        params: Optional[dict[str, Any]] = None,
        payload: Optional[dict[str, Any]] = None,
        headers: Optional[dict[str, str]] = None,
    ) -> HttpResponse:
        resp = self._retrying()(self._send, method, url, params=params, payload=payload, headers=headers)
        if not resp.ok:
            raise HttpStatusError(_http_error_details(resp), status=resp.status, body=resp.text)
        return resp

    def get_text(self, url: str, *, params: Optional[dict[str, Any]] = None, headers: Optional[dict[str, str]] = None) -> str:
        return self.request("GET", url, params=params, headers=headers).text

    def get_json(self, url: str, *, params: Optional[dict[str, Any]] = None, headers: Optional[dict[str, str]] = None) -> Any:
        return self.request("GET", url, params=params, headers=headers).json()

    def post_json(self, url: str, *, payload: dict[str, Any], headers: Optional[dict[str, str]] = None) -> dict[str, Any]:
        hdrs = {"Content-Type": "application/json"}
        if headers:
            hdrs.update(headers)
        return self.request("POST", url, payload=payload, headers=hdrs).json()


def _read_capped(resp: requests.Response, limit: int) -> tuple[str, bool]:
    chunks: list[bytes] = []
    size = 0
    truncated = False
    for chunk in resp.iter_content(chunk_size=16384):
        if not chunk:
            continue
        if size + len(chunk) > limit:
            chunks.append(chunk[: limit - size])
            truncated = True
            break
        chunks.append(chunk)
        size += len(chunk)
    raw = b"".join(chunks)
    # requests assumes latin-1 for text/* without a charset; most pages are utf-8.
    declared = "charset=" in resp.headers.get("Content-Type", "").lower()
    encoding = (resp.encoding if declared else None) or "utf-8"
    return raw.decode(encoding, errors="replace"), truncated


def _http_error_details(resp: HttpResponse) -> str:
    snippet = (resp.text or "").strip().replace("\n", " ")
    if len(snippet) > 500:
        snippet = snippet[:500] + "…"
    base = f"{resp.status} {resp.reason} for url: {resp.url}"
    return f"{base} body={snippet}" if snippet else base


@contextmanager
def network_denied() -> Iterator[None]:
    """Make every requests adapter send raise NetworkDisabledError until the block exits."""
    original = HTTPAdapter.send

    def _deny(self: HTTPAdapter, request: requests.PreparedRequest, *args: Any, **kwargs: Any) -> requests.Response:
        raise NetworkDisabledError(f"network access denied: {request.method} {request.url}")

    HTTPAdapter.send = _deny  # type: ignore[method-assign]
    try:
        yield
    finally:
        HTTPAdapter.send = original  # type: ignore[method-assign]
