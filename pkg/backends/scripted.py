from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional

from backends.base import GenerationBackend, GenerationRequest, trim_stop
from errors import ScriptMiss, ScriptParseError


MatchKind = Literal["exact_prompt_hash", "question_substring"]
_MATCH_KINDS: set[str] = {"exact_prompt_hash", "question_substring"}


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ScriptEntry:
    kind: MatchKind
    value: str
    response: str

    def __post_init__(self) -> None:
        if self.kind not in _MATCH_KINDS:
            raise ValueError(f"Unknown match kind: {self.kind}")
        if not self.value:
            raise ValueError("Script match value is empty")


class ScriptedBackend(GenerationBackend):
    """Deterministic backend: exact prompt hashes first, then substring rules in script order."""

    def __init__(self, entries: Iterable[ScriptEntry], *, logger: Optional[logging.Logger] = None):
        super().__init__(logger=logger or logging.getLogger("covrag"))
        self.entries = tuple(entries)
        self._by_hash: dict[str, str] = {}
        self._substrings: list[ScriptEntry] = []
        for e in self.entries:
            if e.kind == "exact_prompt_hash":
                key = e.value.lower()
                if key in self._by_hash:
                    raise ValueError(f"Duplicate exact_prompt_hash entry: {key}")
                self._by_hash[key] = e.response
            else:
                self._substrings.append(e)

    def respond(self, prompt: str) -> str:
        hit = self._by_hash.get(prompt_hash(prompt))
        if hit is not None:
            return hit
        for e in self._substrings:
            if e.value in prompt:
                return e.response
        raise ScriptMiss(prompt)

    def generate(self, request: GenerationRequest) -> str:
        return trim_stop(self.respond(request.prompt), request.stop_sequences)


def parse_script(lines: Iterable[str]) -> list[ScriptEntry]:
    entries: list[ScriptEntry] = []
    seen_hashes: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ScriptParseError(f"invalid JSON ({e.msg})", line=lineno) from e
        if not isinstance(obj, dict):
            raise ScriptParseError("expected a JSON object", line=lineno)
        match = obj.get("match")
        response = obj.get("response")
        if not isinstance(match, dict):
            raise ScriptParseError("missing 'match' object", line=lineno)
        if not isinstance(response, str):
            raise ScriptParseError("'response' must be a string", line=lineno)
        kind = match.get("kind")
        value = match.get("value")
        if kind not in _MATCH_KINDS:
            raise ScriptParseError(f"unknown match kind {kind!r}", line=lineno)
        if not isinstance(value, str) or not value:
            raise ScriptParseError("match value must be a non-empty string", line=lineno)
        if kind == "exact_prompt_hash":
            value = value.lower()
            if value in seen_hashes:
                raise ScriptParseError(f"duplicate exact_prompt_hash {value}", line=lineno)
            seen_hashes.add(value)
        entries.append(ScriptEntry(kind=kind, value=value, response=response))
    return entries


def load_script(path: Path, *, logger: Optional[logging.Logger] = None) -> ScriptedBackend:
    text = Path(path).read_text(encoding="utf-8")
    return ScriptedBackend(parse_script(text.splitlines()), logger=logger)
