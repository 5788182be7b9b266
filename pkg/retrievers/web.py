from __future__ import annotations

import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Optional

from bs4 import BeautifulSoup

from errors import CovRagError, HttpStatusError, InvalidUrl, NetworkDisabledError, QuotaExceeded, SearchUnavailable, TransportError
from models import Reference, ReferenceSet
from retrievers.base import Retriever
from retrievers.ranking import rank_passages
from utils.dedupe import dedupe_keep_first, passage_key
from utils.http import HttpClient

if TYPE_CHECKING:
    from backends.base import GenerationBackend
    from config import RetrieverConfig
    from rendering.prompt_templates import PromptBuilder


_BLOCK_TAGS = [
    "p", "div", "li", "ul", "ol", "dd", "dt", "tr", "td", "th", "table",
    "h1", "h2", "h3", "h4", "h5", "h6",
    "section", "article", "header", "footer", "aside", "nav", "main",
    "blockquote", "pre", "figcaption",
]
_DROP_TAGS = ["script", "style", "noscript", "template", "svg"]
_PARA_SPLIT_RE = re.compile(r"\n\s*\n")
_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class SearchHit:
    url: str
    title: str = ""
    snippet: str = ""

    def __post_init__(self) -> None:
        if not self.url.strip():
            raise ValueError("SearchHit url is empty")


def extract_passages(page_text: str, max_chars: int = 600) -> list[str]:
    """Strip tags and split the page into blank-line separated paragraphs of at most `max_chars`."""
    if max_chars < 1:
        raise ValueError("max_chars must be >= 1")
    if not (page_text or "").strip():
        return []
    soup = BeautifulSoup(page_text, "html.parser")
    for tag in soup.find_all(_DROP_TAGS):
        tag.decompose()
    for tag in soup.find_all("br"):
        tag.replace_with("\n")
    for tag in soup.find_all(_BLOCK_TAGS):
        tag.insert_before("\n\n")
        tag.insert_after("\n\n")

    out: list[str] = []
    for para in _PARA_SPLIT_RE.split(soup.get_text()):
        para = _WS_RE.sub(" ", para).strip()
        if para:
            out.extend(_chunk(para, max_chars))
    return out


def _chunk(paragraph: str, max_chars: int) -> list[str]:
    if len(paragraph) <= max_chars:
        return [paragraph]
    chunks: list[str] = []
    current = ""
    for word in paragraph.split(" "):
        while len(word) > max_chars:
            if current:
                chunks.append(current)
                current = ""
            chunks.append(word[:max_chars])
            word = word[max_chars:]
        if not word:
            continue
        candidate = f"{current} {word}" if current else word
        if len(candidate) <= max_chars:
            current = candidate
        else:
            chunks.append(current)
            current = word
    if current:
        chunks.append(current)
    return chunks


def _parse_generic_hits(data: Any) -> list[SearchHit]:
    items = data
    if isinstance(data, dict):
        items = data.get("results") or data.get("hits") or data.get("items") or []
    if not isinstance(items, list):
        return []
    hits: list[SearchHit] = []
    for item in items:
        if not isinstance(item, dict):
            continue
        url = str(item.get("url") or item.get("link") or "").strip()
        if not url:
            continue
        hits.append(
            SearchHit(
                url=url,
                title=str(item.get("title") or item.get("name") or ""),
                snippet=str(item.get("snippet") or item.get("description") or ""),
            )
        )
    return hits


def _parse_bing_hits(data: Any) -> list[SearchHit]:
    pages = data.get("webPages") if isinstance(data, dict) else None
    values = pages.get("value") if isinstance(pages, dict) else None
    if not isinstance(values, list):
        return []
    hits: list[SearchHit] = []
    for item in values:
        if not isinstance(item, dict) or not str(item.get("url") or "").strip():
            continue
        hits.append(SearchHit(url=str(item["url"]).strip(), title=str(item.get("name") or ""), snippet=str(item.get("snippet") or "")))
    return hits


class WebRetriever(Retriever):
    """Coarse web search, page crawl and passage extraction, then a fine re-rank down to top_k."""

    def __init__(
        self,
        config: "RetrieverConfig",
        *,
        http: HttpClient,
        backend: Optional["GenerationBackend"] = None,
        prompts: Optional["PromptBuilder"] = None,
        logger: logging.Logger,
    ):
        super().__init__(logger=logger)
        self.config = config
        self.http = http
        self.backend = backend
        self.prompts = prompts

    @classmethod
    def from_config(
        cls,
        config: "RetrieverConfig",
        *,
        backend: Optional["GenerationBackend"] = None,
        prompts: Optional["PromptBuilder"] = None,
        logger: logging.Logger,
    ) -> "WebRetriever":
        http = HttpClient(
            timeout_seconds=config.timeout_seconds,
            user_agent=config.user_agent,
            retry_attempts=config.retry_attempts,
            backoff_seconds=config.backoff_seconds,
            max_body_bytes=config.max_body_bytes,
            max_redirects=config.max_redirects,
        )
        return cls(config, http=http, backend=backend, prompts=prompts, logger=logger)

    def _search_headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.search_api_key_env, "").strip() if self.config.search_api_key_env else ""
        if not key:
            return {}
        if self.config.search_engine == "bing":
            return {"Ocp-Apim-Subscription-Key": key}
        return {"Authorization": f"Bearer {key}"}

    def web_search(self, query: str) -> list[SearchHit]:
        if not self.config.search_endpoint:
            raise SearchUnavailable("retriever.search_endpoint is not configured")
        params = {"q": query, "count": self.config.max_hits}
        try:
            data = self.http.get_json(self.config.search_endpoint, params=params, headers=self._search_headers())
        except HttpStatusError as e:
            if e.status == 429:
                raise QuotaExceeded(f"search quota exceeded: {e}") from e
            raise SearchUnavailable(f"search failed: {e}") from e
        except (TransportError, InvalidUrl) as e:
            raise SearchUnavailable(f"search failed: {e}") from e
        except ValueError as e:
            raise SearchUnavailable(f"search endpoint returned non-JSON: {e}") from e

        hits = _parse_bing_hits(data) if self.config.search_engine == "bing" else _parse_generic_hits(data)
        hits = dedupe_keep_first(hits, key=lambda h: h.url)
        return hits[: self.config.max_hits]

    def _fetch_pages(self, hits: list[SearchHit]) -> dict[int, str]:
        pages: dict[int, str] = {}
        targets = hits[: self.config.max_pages]
        if not targets:
            return pages
        with ThreadPoolExecutor(max_workers=min(self.config.fetch_workers, len(targets))) as executor:
            futures = {executor.submit(self.http.get_text, h.url): rank for rank, h in enumerate(targets)}
            for fut in as_completed(futures):
                rank = futures[fut]
                try:
                    pages[rank] = fut.result()
                except NetworkDisabledError:
                    raise
                except CovRagError as e:
                    self.logger.warning("Page fetch failed for %s: %s", targets[rank].url, e)
        return pages

    def retrieve(self, query: str) -> ReferenceSet:
        if not (query or "").strip():
            raise ValueError("retrieve() needs a non-empty query")
        hits = self.web_search(query)
        pages = self._fetch_pages(hits)

        # Merge in engine rank order so equal scores keep a stable provenance.
        candidates: list[tuple[str, str]] = []
        for rank, hit in enumerate(hits[: self.config.max_pages]):
            page = pages.get(rank)
            passages = extract_passages(page, self.config.passage_max_chars) if page else []
            if not passages and hit.snippet.strip():
                passages = extract_passages(hit.snippet, self.config.passage_max_chars)
            candidates.extend((p, hit.url) for p in passages)
        candidates = dedupe_keep_first(candidates, key=lambda c: passage_key(c[0]))
        self.logger.info("Web retrieval: hits=%s pages=%s passages=%s", len(hits), len(pages), len(candidates))

        ranked = rank_passages(
            query,
            [c[0] for c in candidates],
            self.config.reranker,
            backend=self.backend,
            prompts=self.prompts,
            logger=self.logger,
        )
        refs: list[Reference] = []
        for item in ranked.items:
            if item.score <= 0.0:
                continue
            refs.append(Reference(index=1, passage=item.text, source_url=candidates[item.position][1], relevance=item.score))
            if len(refs) >= self.config.top_k:
                break
        notes = (f"reranker_fallback: {ranked.fallback_reason}",) if ranked.fallback_reason else ()
        return ReferenceSet.renumbered(refs, limit=self.config.top_k, notes=notes)
