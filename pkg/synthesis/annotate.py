from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from backends.base import GenerationBackend, GenerationRequest
from errors import CovRagError, NoGolds, UnparsableReport
from evaluation.metrics import accuracy
from models import RagSample, VerificationReport, validate_report
from rendering.prompt_templates import PromptBuilder
from utils.jsonl import append_jsonl
from verification import parse_verification_output


@dataclass(frozen=True)
class AnnotatedSample:
    sample: RagSample
    report: VerificationReport

    @property
    def id(self) -> str:
        return self.sample.id

    @property
    def positive(self) -> bool:
        return self.sample.polarity != "negative" and self.report.judgment == "true"

    def to_json_dict(self) -> dict[str, Any]:
        return {**self.sample.to_json_dict(), "report": self.report.to_json_dict()}

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "AnnotatedSample":
        return AnnotatedSample(
            sample=RagSample.from_json_dict(data),
            report=VerificationReport.from_json_dict(data["report"]),
        )


def annotate_verification(
    teacher_backend: GenerationBackend,
    sample: RagSample,
    prompts: PromptBuilder,
    *,
    max_tokens: int = 256,
) -> AnnotatedSample:
    """Have the teacher score one sample. Raises UnparsableReport when its output is not a valid report."""
    prompt = prompts.build_verification_prompt(sample.question, sample.references, sample.answer)
    raw = teacher_backend.generate(GenerationRequest(prompt=prompt, max_tokens=max_tokens, temperature=0.0))
    report = parse_verification_output(raw)
    validation = validate_report(report)
    if not validation.ok:
        raise UnparsableReport("; ".join(validation.violations), raw=raw)
    return AnnotatedSample(sample=sample, report=report)


def annotate_batch(
    teacher_backend: GenerationBackend,
    samples: Sequence[RagSample],
    prompts: PromptBuilder,
    *,
    reject_path: Optional[Path] = None,
    max_workers: int = 1,
    max_tokens: int = 256,
    logger: logging.Logger,
) -> list[AnnotatedSample]:
    """Annotate every sample; failures go to the reject file and the batch continues. Output is ordered by id."""
    annotated: list[AnnotatedSample] = []
    rejected = 0

    def _reject(sample: RagSample, e: CovRagError) -> None:
        nonlocal rejected
        rejected += 1
        raw = getattr(e, "raw", "")
        logger.warning("Quarantined %s: %s %r", sample.id, e, (raw or "")[:200])
        if reject_path is not None:
            append_jsonl(reject_path, {**sample.to_json_dict(), "reason": f"{type(e).__name__}: {e}"})

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = {
            executor.submit(annotate_verification, teacher_backend, s, prompts, max_tokens=max_tokens): s for s in samples
        }
        for fut in as_completed(futures):
            sample = futures[fut]
            try:
                annotated.append(fut.result())
            except CovRagError as e:
                _reject(sample, e)

    annotated.sort(key=lambda a: a.id)
    logger.info("Annotated %s samples, quarantined %s", len(annotated), rejected)
    return annotated


@dataclass(frozen=True)
class AuditSummary:
    checked: int
    agreed: int
    skipped: int
    disagreements: tuple[str, ...]
    # Judged true by the teacher but the answer misses every gold label.
    flagged_positive: tuple[str, ...]

    @property
    def agreement_rate(self) -> Optional[float]:
        return self.agreed / self.checked if self.checked else None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "checked": self.checked,
            "agreed": self.agreed,
            "skipped": self.skipped,
            "agreement_rate": self.agreement_rate,
            "disagreements": list(self.disagreements),
            "flagged_positive": list(self.flagged_positive),
        }


def audit_annotations(
    annotated: Sequence[AnnotatedSample],
    golds: Optional[Mapping[str, Sequence[str]]] = None,
) -> AuditSummary:
    """Compare teacher judgments with gold containment. `golds` defaults to each sample's own gold labels."""
    checked = agreed = skipped = 0
    disagreements: list[str] = []
    flagged: list[str] = []
    for a in annotated:
        labels = list(golds.get(a.id, ()) if golds is not None else a.sample.gold_labels)
        try:
            correct = accuracy(a.sample.answer, labels)
        except NoGolds:
            skipped += 1
            continue
        checked += 1
        judged_true = a.report.judgment == "true"
        if judged_true == correct:
            agreed += 1
            continue
        disagreements.append(a.id)
        if judged_true:
            flagged.append(a.id)
    return AuditSummary(
        checked=checked,
        agreed=agreed,
        skipped=skipped,
        disagreements=tuple(disagreements),
        flagged_positive=tuple(flagged),
    )
