from __future__ import annotations

import json
from typing import Any, Callable, Iterator, Optional


_DECODER = json.JSONDecoder()


def iter_json_objects(text: str) -> Iterator[dict[str, Any]]:
    """Yield every JSON object that starts at some '{' in `text`, outer objects before the ones nested in them."""
    text = text or ""
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = _DECODER.raw_decode(text, start)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            yield obj
        start = text.find("{", start + 1)


def first_json_object(text: str, accept: Optional[Callable[[dict[str, Any]], bool]] = None) -> Optional[dict[str, Any]]:
    for obj in iter_json_objects(text):
        if accept is None or accept(obj):
            return obj
    return None
