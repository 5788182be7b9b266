from __future__ import annotations

import re
from typing import Callable, Iterable, TypeVar


T = TypeVar("T")

_WS_RE = re.compile(r"\s+")


def passage_key(text: str) -> str:
    return _WS_RE.sub(" ", text).strip().lower()


def dedupe_keep_first(items: Iterable[T], *, key: Callable[[T], str]) -> list[T]:
    seen: set[str] = set()
    out: list[T] = []
    for item in items:
        k = key(item)
        if not k or k in seen:
            continue
        seen.add(k)
        out.append(item)
    return out


def dedupe_passages(passages: Iterable[str]) -> list[str]:
    return dedupe_keep_first(passages, key=passage_key)
