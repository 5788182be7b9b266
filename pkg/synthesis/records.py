from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from models import RagSample
from rendering.prompt_templates import PromptBuilder
from synthesis.annotate import AnnotatedSample
from synthesis.dataset import Dataset
from utils.jsonl import read_jsonl, write_jsonl
from verification import render_report, render_revision_only


TASKS: tuple[str, ...] = ("rag", "cov")
_TASK_ORDER = {t: i for i, t in enumerate(TASKS)}


@dataclass(frozen=True)
class TrainingRecord:
    task: str
    input: str
    target: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"Unknown training task: {self.task}")

    @property
    def sample_id(self) -> str:
        return str(self.meta.get("sample_id") or "")

    @property
    def split(self) -> str:
        return str(self.meta.get("split") or "")

    def to_json_dict(self) -> dict[str, Any]:
        return {"task": self.task, "input": self.input, "target": self.target, "meta": dict(self.meta)}

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "TrainingRecord":
        return TrainingRecord(
            task=str(data["task"]),
            input=str(data["input"]),
            target=str(data["target"]),
            meta=dict(data.get("meta") or {}),
        )


@dataclass(frozen=True)
class EmitResult:
    records: tuple[TrainingRecord, ...]
    counts: dict[str, int]

    def to_summary(self) -> dict[str, Any]:
        return {"total": len(self.records), **self.counts}


def _rag_record(sample: RagSample, prompts: PromptBuilder, split: str) -> TrainingRecord:
    return TrainingRecord(
        task="rag",
        input=prompts.build_qa_prompt(sample.question, sample.references),
        target=sample.answer.text,
        meta={"sample_id": sample.id, "split": split, "polarity": sample.polarity},
    )


def _cov_record(annotated: AnnotatedSample, prompts: PromptBuilder, *, chain: bool) -> TrainingRecord:
    s = annotated.sample
    target = render_report(annotated.report) if chain else render_revision_only(annotated.report)
    return TrainingRecord(
        task="cov",
        input=prompts.build_verification_prompt(s.question, s.references, s.answer),
        target=target,
        meta={
            "sample_id": s.id,
            "split": "D2",
            "polarity": s.polarity,
            "judgment": annotated.report.judgment,
            "defect_kinds": list(s.defect_kinds),
            "chain": chain,
        },
    )


def emit_training_set(
    d1: Dataset,
    d2_annotated: Sequence[AnnotatedSample],
    prompts: PromptBuilder,
    *,
    chain: bool = True,
    cov_keep_fraction: float = 1.0,
    seed: int = 0,
) -> EmitResult:
    """D1 samples become rag records; annotated D2' samples become cov records, and positives also rag records.

    D1 samples without references or an answer cannot form a QA target and are counted as skipped.
    """
    if not 0.0 <= cov_keep_fraction <= 1.0:
        raise ValueError(f"cov_keep_fraction out of [0,1]: {cov_keep_fraction}")

    records: list[TrainingRecord] = []
    counts: Counter[str] = Counter()

    for s in d1.samples:
        if len(s.references) == 0 or not s.answer.text.strip():
            counts["skipped_d1"] += 1
            continue
        records.append(_rag_record(s, prompts, "D1"))

    kept = sorted(d2_annotated, key=lambda a: a.id)
    if cov_keep_fraction < 1.0:
        n_keep = round(len(kept) * cov_keep_fraction)
        chosen = set(random.Random(seed).sample(range(len(kept)), n_keep))
        counts["dropped_cov"] = len(kept) - n_keep
        kept = [a for i, a in enumerate(kept) if i in chosen]

    for a in kept:
        records.append(_cov_record(a, prompts, chain=chain))
        if a.positive:
            records.append(_rag_record(a.sample, prompts, "D2"))
        counts["positive" if a.positive else "negative"] += 1

    records.sort(key=lambda r: (r.sample_id, _TASK_ORDER[r.task]))
    for r in records:
        counts[r.task] += 1
    return EmitResult(records=tuple(records), counts=dict(counts))


def check_split_integrity(records: Iterable[TrainingRecord]) -> list[str]:
    """Return leakage violations: a D1 id in a cov record, or an id seen under both splits."""
    violations: list[str] = []
    splits: dict[str, set[str]] = {}
    for r in records:
        splits.setdefault(r.sample_id, set()).add(r.split)
        if r.task == "cov" and r.split != "D2":
            violations.append(f"cov record for {r.sample_id!r} comes from split {r.split!r}")
    for sample_id in sorted(splits):
        if len(splits[sample_id]) > 1:
            violations.append(f"sample {sample_id!r} appears in splits {sorted(splits[sample_id])}")
    return violations


def write_records(path: Path, records: Iterable[TrainingRecord]) -> int:
    return write_jsonl(path, (r.to_json_dict() for r in records))


def read_records(path: Path) -> list[TrainingRecord]:
    return [TrainingRecord.from_json_dict(row) for row in read_jsonl(path)]
