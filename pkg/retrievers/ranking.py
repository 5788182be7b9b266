from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Optional, Sequence

from backends.base import GenerationRequest
from errors import CovRagError
from evaluation.metrics import tokens
from utils.json_extract import first_json_object

if TYPE_CHECKING:
    from backends.base import GenerationBackend
    from rendering.prompt_templates import PromptBuilder


@dataclass(frozen=True)
class ScoredPassage:
    position: int
    text: str
    score: float


@dataclass(frozen=True)
class RankResult:
    items: tuple[ScoredPassage, ...]
    # Set when backend-assisted scoring fell back to lexical.
    fallback_reason: Optional[str] = None


def lexical_score(query_tokens: set[str], passage: str) -> float:
    if not query_tokens:
        return 0.0
    return len(query_tokens & tokens(passage)) / len(query_tokens)


def _sorted(scored: list[ScoredPassage]) -> tuple[ScoredPassage, ...]:
    return tuple(sorted(scored, key=lambda p: (-p.score, p.position)))


def rank_lexical(query: str, passages: Sequence[str]) -> RankResult:
    q = tokens(query)
    return RankResult(items=_sorted([ScoredPassage(i, p, lexical_score(q, p)) for i, p in enumerate(passages)]))


def parse_rerank_scores(raw: str, expected: int) -> list[float]:
    obj = first_json_object(raw, accept=lambda o: isinstance(o.get("scores"), list))
    if obj is None:
        raise ValueError("no {\"scores\": [...]} object in re-ranker output")
    values: list[Any] = obj["scores"]
    if len(values) != expected:
        raise ValueError(f"re-ranker returned {len(values)} scores for {expected} passages")
    out: list[float] = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"non-numeric re-ranker score {v!r}")
        out.append(min(1.0, max(0.0, float(v))))
    return out


def rank_passages(
    query: str,
    passages: Sequence[str],
    reranker: str = "lexical",
    *,
    backend: Optional["GenerationBackend"] = None,
    prompts: Optional["PromptBuilder"] = None,
    max_tokens: int = 256,
    logger: Optional[logging.Logger] = None,
) -> RankResult:
    if reranker == "lexical" or not passages:
        return rank_lexical(query, passages)
    if reranker != "backend_assisted":
        raise ValueError(f"Unknown reranker: {reranker}")
    if backend is None or prompts is None:
        return _fallback(query, passages, "backend_assisted re-ranker has no backend", logger)

    try:
        raw = backend.generate(
            GenerationRequest(prompt=prompts.build_rerank_prompt(query, passages), max_tokens=max_tokens, temperature=0.0)
        )
        scores = parse_rerank_scores(raw, len(passages))
    except (CovRagError, ValueError) as e:
        return _fallback(query, passages, f"{type(e).__name__}: {e}", logger)
    return RankResult(items=_sorted([ScoredPassage(i, p, s) for i, (p, s) in enumerate(zip(passages, scores))]))


def _fallback(query: str, passages: Sequence[str], reason: str, logger: Optional[logging.Logger]) -> RankResult:
    if logger is not None:
        logger.warning("Re-ranker fell back to lexical scoring: %s", reason)
    lexical = rank_lexical(query, passages)
    return RankResult(items=lexical.items, fallback_reason=reason)
