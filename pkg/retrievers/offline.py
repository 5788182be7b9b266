from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Optional

from errors import EmptyCorpus
from models import Reference, ReferenceSet
from retrievers.base import Retriever
from retrievers.ranking import rank_passages
from utils.jsonl import read_jsonl

if TYPE_CHECKING:
    from backends.base import GenerationBackend
    from rendering.prompt_templates import PromptBuilder


@dataclass(frozen=True)
class CorpusPassage:
    id: str
    text: str
    gold_for: tuple[str, ...] = ()


class Corpus:
    def __init__(self, passages: Iterable[CorpusPassage]):
        self.passages: tuple[CorpusPassage, ...] = tuple(passages)
        self._by_id: dict[str, CorpusPassage] = {}
        for p in self.passages:
            if p.id in self._by_id:
                raise ValueError(f"Duplicate corpus id: {p.id}")
            self._by_id[p.id] = p

    def __len__(self) -> int:
        return len(self.passages)

    def get(self, passage_id: str) -> Optional[CorpusPassage]:
        return self._by_id.get(passage_id)

    def is_gold(self, passage_id: Optional[str], question_id: str) -> bool:
        p = self._by_id.get(passage_id or "")
        return p is not None and question_id in p.gold_for

    @staticmethod
    def from_rows(rows: Iterable[dict[str, Any]]) -> "Corpus":
        out: list[CorpusPassage] = []
        for i, row in enumerate(rows):
            if "id" not in row or "text" not in row:
                raise ValueError(f"corpus row {i + 1}: expected keys 'id' and 'text'")
            gold = row.get("gold_for")
            if gold is None:
                gold_for: tuple[str, ...] = ()
            elif isinstance(gold, list):
                gold_for = tuple(str(x) for x in gold)
            else:
                gold_for = (str(gold),)
            out.append(CorpusPassage(id=str(row["id"]), text=str(row["text"]), gold_for=gold_for))
        return Corpus(out)


def load_corpus(path: Path) -> Corpus:
    return Corpus.from_rows(read_jsonl(path))


class CorpusRetriever(Retriever):
    """Scores every corpus passage against the query; passages sharing no token are dropped."""

    def __init__(
        self,
        corpus: Corpus,
        *,
        top_k: int = 5,
        reranker: str = "lexical",
        backend: Optional["GenerationBackend"] = None,
        prompts: Optional["PromptBuilder"] = None,
        logger: logging.Logger,
    ):
        super().__init__(logger=logger)
        if not 1 <= top_k <= 5:
            raise ValueError(f"top_k must be in 1..5, got {top_k}")
        self.corpus = corpus
        self.top_k = top_k
        self.reranker = reranker
        self.backend = backend
        self.prompts = prompts

    def retrieve(self, query: str) -> ReferenceSet:
        if not (query or "").strip():
            raise ValueError("retrieve() needs a non-empty query")
        if len(self.corpus) == 0:
            raise EmptyCorpus("offline corpus has no passages")

        texts = [p.text for p in self.corpus.passages]
        ranked = rank_passages(
            query,
            texts,
            self.reranker,
            backend=self.backend,
            prompts=self.prompts,
            logger=self.logger,
        )
        refs: list[Reference] = []
        for item in ranked.items:
            if item.score <= 0.0 or not item.text.strip():
                continue
            refs.append(
                Reference(
                    index=1,
                    passage=item.text,
                    source_id=self.corpus.passages[item.position].id,
                    relevance=item.score,
                )
            )
            if len(refs) >= self.top_k:
                break
        notes = (f"reranker_fallback: {ranked.fallback_reason}",) if ranked.fallback_reason else ()
        return ReferenceSet.renumbered(refs, limit=self.top_k, notes=notes)
