from __future__ import annotations

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Optional

from backends.base import GenerationBackend, GenerationRequest
from errors import CovRagError, DatasetTooSmall
from models import Answer, Question, RagSample
from utils.jsonl import read_jsonl, write_jsonl

if TYPE_CHECKING:
    from rendering.prompt_templates import PromptBuilder
    from retrievers.base import Retriever


@dataclass(frozen=True)
class Dataset:
    samples: tuple[RagSample, ...]
    name: str = "dataset"

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"Duplicate sample id in {self.name}: {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> set[str]:
        return {s.id for s in self.samples}

    def by_id(self) -> dict[str, RagSample]:
        return {s.id: s for s in self.samples}

    def questions(self) -> list[Question]:
        return [s.question for s in self.samples]


def load_dataset(path: Path, *, name: Optional[str] = None) -> Dataset:
    samples: list[RagSample] = []
    for i, row in enumerate(read_jsonl(path), start=1):
        if "question" not in row:
            raise ValueError(f"{path}: line {i}: missing 'question'")
        if row.get("id") is None:
            row = {**row, "id": str(i)}
        samples.append(RagSample.from_json_dict(row))
    return Dataset(samples=tuple(samples), name=name or Path(path).stem)


def write_dataset(path: Path, dataset: Dataset) -> int:
    return write_jsonl(path, (s.to_json_dict() for s in dataset.samples))


def split_dataset(d: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle by seed; the first ceil(n/2) go to D1 (RAG task), the rest to D2 (verification task)."""
    n = len(d)
    if n < 2:
        raise DatasetTooSmall(f"split needs at least 2 samples, got {n}")
    order = list(d.samples)
    random.Random(seed).shuffle(order)
    cut = math.ceil(n / 2)
    return Dataset(tuple(order[:cut]), name=f"{d.name}:D1"), Dataset(tuple(order[cut:]), name=f"{d.name}:D2")


def sample_rag(
    seed_backend: GenerationBackend,
    d2: Dataset,
    retriever: "Retriever",
    prompts: "PromptBuilder",
    *,
    max_tokens: int = 512,
    temperature: float = 0.0,
    max_workers: int = 1,
    on_failure: Optional[Callable[[RagSample, str], None]] = None,
    logger: logging.Logger,
) -> Dataset:
    """Re-answer every D2 question with fresh references; failed samples are reported and dropped."""

    def _one(sample: RagSample) -> Optional[RagSample]:
        try:
            refs = retriever.retrieve(sample.question.text)
            prompt = prompts.build_qa_prompt(sample.question, refs)
            text = seed_backend.generate(GenerationRequest(prompt=prompt, max_tokens=max_tokens, temperature=temperature))
        except CovRagError as e:
            reason = f"{type(e).__name__}: {e}"
            logger.warning("Sampling failed for %s: %s", sample.id, reason)
            if on_failure is not None:
                on_failure(sample, reason)
            return None
        return replace(sample, references=refs, answer=Answer(text=text.strip()), polarity="unknown", defect_kinds=())

    if max_workers <= 1:
        results: Iterable[Optional[RagSample]] = [_one(s) for s in d2.samples]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(_one, d2.samples))
    kept = tuple(s for s in results if s is not None)
    logger.info("Sampled %s of %s D2 questions", len(kept), len(d2))
    return Dataset(samples=kept, name=f"{d2.name}'")
