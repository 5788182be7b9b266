from __future__ import annotations

import re
import unicodedata
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import pandas as pd

from errors import NoGolds, NoSamples
from models import Answer, PipelineTrace, ReferenceSet, VerificationReport

if TYPE_CHECKING:
    from retrievers.offline import Corpus
    from synthesis.dataset import Dataset


_EXTRA_PUNCT = frozenset("‘’“”")
_WS_RE = re.compile(r"\s+")

PER_SAMPLE_COLUMNS = ["id", "question", "first_answer", "final_answer", "gold_labels", "correct_first", "correct_final", "terminated_by", "iterations"]

# Bars a report must clear per dimension to count as high quality.
HIGH_QUALITY_BARS: dict[str, str] = {
    "citation_accuracy": "== 1",
    "correctness": "== 1",
    "truthfulness": "== 1",
    "bias": "< 0.3",
    "conciseness": "> 0.5",
}


def _is_punct(ch: str) -> bool:
    return ch in _EXTRA_PUNCT or unicodedata.category(ch).startswith("P")


def normalize_text(s: str) -> str:
    lowered = (s or "").lower()
    stripped = "".join(ch for ch in lowered if not _is_punct(ch))
    return _WS_RE.sub(" ", stripped).strip()


def tokens(s: str) -> set[str]:
    return set(normalize_text(s).split())


def accuracy(prediction: Answer, gold_labels: Sequence[str]) -> bool:
    golds = [normalize_text(g) for g in gold_labels or []]
    golds = [g for g in golds if g]
    if not golds:
        raise NoGolds("accuracy needs at least one non-empty gold label")
    pred = normalize_text(prediction.text)
    return any(g in pred for g in golds)


def batch_accuracy(
    traces: Sequence[PipelineTrace],
    dataset: "Dataset",
    *,
    csv_path: Optional[Path] = None,
) -> float:
    """Mean accuracy of final answers over traces whose question id joins a dataset sample with golds."""
    golds_by_id = {s.id: s.gold_labels for s in dataset.samples if s.gold_labels}
    rows: list[dict[str, object]] = []
    for t in traces:
        qid = t.question.id or ""
        golds = golds_by_id.get(qid)
        if not golds:
            continue
        rows.append(
            {
                "id": qid,
                "question": t.question.text,
                "first_answer": t.first_answer.text,
                "final_answer": t.final_answer.text,
                "gold_labels": "|".join(golds),
                "correct_first": accuracy(t.first_answer, golds),
                "correct_final": accuracy(t.final_answer, golds),
                "terminated_by": t.terminated_by,
                "iterations": len(t.iterations),
            }
        )
    if csv_path is not None:
        write_per_sample_csv(csv_path, rows)
    if not rows:
        raise NoSamples("no trace joined a dataset sample with gold labels")
    return sum(1 for r in rows if r["correct_final"]) / len(rows)


def write_per_sample_csv(path: Path, rows: list[dict[str, object]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(rows)
    if df.empty:
        df = pd.DataFrame(columns=PER_SAMPLE_COLUMNS)
    df.to_csv(path, index=False)


def rank_aggregate(per_sample_ranks: Sequence[float]) -> float:
    if not per_sample_ranks:
        raise NoSamples("rank_aggregate needs at least one ranking")
    return sum(per_sample_ranks) / len(per_sample_ranks)


def _meets_bar(dimension: str, value: float) -> bool:
    if dimension == "bias":
        return value < 0.3
    if dimension == "conciseness":
        return value > 0.5
    return value == 1


def high_quality_rate(reports: Sequence[VerificationReport]) -> dict[str, float]:
    if not reports:
        raise NoSamples("high_quality_rate needs at least one report")
    n = len(reports)
    return {
        dim: sum(1 for r in reports if _meets_bar(dim, float(getattr(r, dim)))) / n
        for dim in HIGH_QUALITY_BARS
    }


def reference_delta(before: Sequence[bool], after: Sequence[bool]) -> float:
    """Change in reference correctness rate, in percentage points."""
    if len(before) != len(after):
        raise ValueError(f"before/after lengths differ: {len(before)} vs {len(after)}")
    if not before:
        raise NoSamples("reference_delta needs at least one sample")
    n = len(before)
    return (sum(1 for x in after if x) - sum(1 for x in before if x)) * 100.0 / n


def references_correct(refs: ReferenceSet, corpus: "Corpus", question_id: Optional[str]) -> bool:
    """True when any retrieved passage is marked in the corpus as gold for this question."""
    if not question_id:
        return False
    return any(corpus.is_gold(r.source_id, question_id) for r in refs if r.source_id)


def reference_correctness_pairs(
    traces: Iterable[PipelineTrace], corpus: "Corpus"
) -> tuple[list[bool], list[bool]]:
    """Per trace: were the first references correct, and were the last ones."""
    before: list[bool] = []
    after: list[bool] = []
    for t in traces:
        qid = t.question.id
        before.append(references_correct(t.iterations[0].references, corpus, qid))
        after.append(references_correct(t.iterations[-1].references, corpus, qid))
    return before, after
