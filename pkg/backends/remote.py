from __future__ import annotations

import logging
import os
import threading
from typing import TYPE_CHECKING, Any

from backends.base import GenerationBackend, GenerationRequest, trim_stop
from errors import BackendRefusal, HttpStatusError
from utils.http import HttpClient

if TYPE_CHECKING:
    from config import BackendConfig


class ChatCompletionsBackend(GenerationBackend):
    """Client for a chat-completions compatible endpoint (POST model/messages/max_tokens/temperature/stop)."""

    def __init__(self, config: "BackendConfig", *, http: HttpClient, logger: logging.Logger):
        super().__init__(logger=logger)
        if not config.endpoint_url:
            raise ValueError("backend.endpoint_url is required for the remote backend")
        self.config = config
        self.http = http
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    @classmethod
    def from_config(cls, config: "BackendConfig", *, logger: logging.Logger) -> "ChatCompletionsBackend":
        http = HttpClient(
            timeout_seconds=config.timeout_seconds,
            user_agent=config.user_agent,
            retry_attempts=config.retry_attempts,
            backoff_seconds=config.backoff_seconds,
        )
        return cls(config, http=http, logger=logger)

    def _headers(self) -> dict[str, str]:
        if not self.config.api_key_env:
            return {}
        key = os.environ.get(self.config.api_key_env, "").strip()
        if not key:
            self.logger.warning("Environment variable %s is empty; sending no Authorization header", self.config.api_key_env)
            return {}
        return {"Authorization": f"Bearer {key}"}

    def generate(self, request: GenerationRequest) -> str:
        payload: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)

        with self._slots:
            try:
                data = self.http.post_json(self.config.endpoint_url, payload=payload, headers=self._headers())
            except HttpStatusError as e:
                raise BackendRefusal(str(e), status=e.status, body=e.body) from e
            except ValueError as e:
                raise BackendRefusal(f"non-JSON reply from {self.config.endpoint_url}: {e}") from e

        text = _first_choice_content(data)
        if text is None:
            raise BackendRefusal(f"reply from {self.config.endpoint_url} has no choices[0].message.content")
        return trim_stop(text, request.stop_sequences)


def _first_choice_content(data: Any) -> str | None:
    if not isinstance(data, dict):
        return None
    choices = data.get("choices")
    if not isinstance(choices, list) or not choices:
        return None
    first = choices[0]
    if not isinstance(first, dict):
        return None
    message = first.get("message")
    if isinstance(message, dict) and isinstance(message.get("content"), str):
        return message["content"]
    # Plain completions endpoints put the text on the choice.
    if isinstance(first.get("text"), str):
        return first["text"]
    return None
