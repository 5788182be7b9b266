from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Iterator, Literal, Optional


Judgment = Literal["true", "false", "unclear"]
Polarity = Literal["positive", "negative", "unknown"]
TerminatedBy = Literal["judgment_ok", "sigma_false", "iteration_cap"]
PipelineMode = Literal["end_revise", "start_revise", "no_revise"]
SigmaMode = Literal["revise_only", "thresholded"]

JUDGMENTS: tuple[str, ...] = ("true", "false", "unclear")
POLARITIES: tuple[str, ...] = ("positive", "negative", "unknown")
TERMINATIONS: tuple[str, ...] = ("judgment_ok", "sigma_false", "iteration_cap")
PIPELINE_MODES: tuple[str, ...] = ("end_revise", "start_revise", "no_revise")
SIGMA_MODES: tuple[str, ...] = ("revise_only", "thresholded")

MAX_REFERENCES = 5
TRACE_SCHEMA_VERSION = 1

# ASCII markers only; full-width brackets are not citations.
_CITATION_RE = re.compile(r"\[(\d{1,2})\]")


def parse_citations(answer_text: str) -> frozenset[int]:
    found: set[int] = set()
    for m in _CITATION_RE.finditer(answer_text or ""):
        n = int(m.group(1))
        if 1 <= n <= 99:
            found.add(n)
    return frozenset(found)


def render_citations(citations: Iterable[int]) -> str:
    return "".join(f"[{n}]" for n in sorted(set(citations)))


@dataclass(frozen=True)
class Question:
    text: str
    id: Optional[str] = None

    def __post_init__(self) -> None:
        if not (self.text or "").strip():
            raise ValueError("Question text is empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {"text": self.text, "id": self.id}

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "Question":
        qid = data.get("id")
        return Question(text=str(data["text"]), id=str(qid) if qid is not None else None)


@dataclass(frozen=True)
class Reference:
    index: int
    passage: str
    source_url: Optional[str] = None
    source_id: Optional[str] = None
    relevance: float = 0.0

    def __post_init__(self) -> None:
        if not 1 <= self.index <= MAX_REFERENCES:
            raise ValueError(f"Reference index out of 1..{MAX_REFERENCES}: {self.index}")
        if not (self.passage or "").strip():
            raise ValueError("Reference passage is empty")
        if not 0.0 <= self.relevance <= 1.0:
            raise ValueError(f"Reference relevance out of [0,1]: {self.relevance}")

    def to_json_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "Reference":
        return Reference(
            index=int(data["index"]),
            passage=str(data["passage"]),
            source_url=data.get("source_url"),
            source_id=data.get("source_id"),
            relevance=float(data.get("relevance", 0.0)),
        )


@dataclass(frozen=True)
class ReferenceSet:
    items: tuple[Reference, ...] = ()
    # Provenance notes from retrieval, e.g. a re-ranker fallback.
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.items) > MAX_REFERENCES:
            raise ValueError(f"ReferenceSet holds at most {MAX_REFERENCES} items, got {len(self.items)}")
        indices = [r.index for r in self.items]
        if indices != list(range(1, len(self.items) + 1)):
            raise ValueError(f"Reference indices must be 1..n contiguous, got {indices}")
        for prev, nxt in zip(self.items, self.items[1:]):
            if nxt.relevance > prev.relevance:
                raise ValueError("References must be sorted by relevance descending")

    @classmethod
    def renumbered(cls, refs: Iterable[Reference], *, limit: int = MAX_REFERENCES, notes: Iterable[str] = ()) -> "ReferenceSet":
        """Stable-sort by relevance, keep the first `limit`, and reassign indices 1..n."""
        ordered = sorted(refs, key=lambda r: -r.relevance)[: max(0, min(limit, MAX_REFERENCES))]
        items = tuple(replace(r, index=i) for i, r in enumerate(ordered, start=1))
        return cls(items=items, notes=tuple(notes))

    @classmethod
    def from_passages(cls, passages: Iterable[str]) -> "ReferenceSet":
        refs = [Reference(index=1, passage=p) for p in passages if p and p.strip()]
        return cls.renumbered(refs)

    def passages(self) -> tuple[str, ...]:
        return tuple(r.passage for r in self.items)

    def source_ids(self) -> tuple[Optional[str], ...]:
        return tuple(r.source_id for r in self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Reference]:
        return iter(self.items)

    def to_json_dict(self) -> dict[str, Any]:
        return {"items": [r.to_json_dict() for r in self.items], "notes": list(self.notes)}

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "ReferenceSet":
        return ReferenceSet(
            items=tuple(Reference.from_json_dict(x) for x in data.get("items") or []),
            notes=tuple(str(x) for x in data.get("notes") or []),
        )


@dataclass(frozen=True)
class Answer:
    text: str
    # Derived from `text`; markers outside 1..MAX_REFERENCES cannot point at a reference.
    citations: frozenset[int] = field(init=False)

    def __post_init__(self) -> None:
        cited = frozenset(n for n in parse_citations(self.text) if n <= MAX_REFERENCES)
        object.__setattr__(self, "citations", cited)

    def to_json_dict(self) -> dict[str, Any]:
        return {"text": self.text, "citations": sorted(self.citations)}

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "Answer":
        return Answer(text=str(data["text"]))


SCORE_FIELDS: tuple[str, ...] = (
    "reference_correctness",
    "correctness",
    "citation_accuracy",
    "truthfulness",
    "bias",
    "conciseness",
)
ANSWER_SCORE_FIELDS: tuple[str, ...] = SCORE_FIELDS[1:]


@dataclass(frozen=True)
class VerificationReport:
    reference_correctness: float
    correctness: float
    citation_accuracy: float
    truthfulness: float
    bias: float
    conciseness: float
    judgment: str
    revised_query: str = ""
    # True when the parser had to pull a model score back into [0,1].
    clamped: bool = False

    def scores(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in SCORE_FIELDS}

    def answer_scores(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in ANSWER_SCORE_FIELDS}

    def to_json_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "VerificationReport":
        return VerificationReport(
            **{name: float(data[name]) for name in SCORE_FIELDS},
            judgment=str(data["judgment"]),
            revised_query=str(data.get("revised_query") or ""),
            clamped=bool(data.get("clamped", False)),
        )


@dataclass(frozen=True)
class ReportValidation:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_report(report: VerificationReport) -> ReportValidation:
    violations: list[str] = []
    for name, value in report.scores().items():
        if math.isnan(value) or not 0.0 <= value <= 1.0:
            violations.append(f"{name} out of [0,1]")
    if report.judgment not in JUDGMENTS:
        violations.append(f"unknown judgment token {report.judgment!r}")
    if report.judgment == "true" and report.revised_query.strip():
        violations.append("judgment=true requires an empty revised_query")
    return ReportValidation(violations=tuple(violations))


@dataclass(frozen=True)
class RagSample:
    question: Question
    references: ReferenceSet
    answer: Answer
    gold_labels: tuple[str, ...] = ()
    polarity: str = "unknown"
    defect_kinds: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.polarity not in POLARITIES:
            raise ValueError(f"Unknown polarity: {self.polarity}")
        if self.polarity == "negative" and not self.defect_kinds:
            raise ValueError("Negative samples must declare defect_kinds")

    @property
    def id(self) -> str:
        return self.question.id or ""

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question.text,
            "references": [
                {"text": r.passage, "url": r.source_url, "source_id": r.source_id, "relevance": r.relevance}
                for r in self.references
            ],
            "answer": self.answer.text,
            "gold_labels": list(self.gold_labels),
            "polarity": self.polarity,
            "defect_kinds": list(self.defect_kinds),
        }

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "RagSample":
        refs: list[Reference] = []
        for item in data.get("references") or []:
            if isinstance(item, str):
                item = {"text": item}
            if not isinstance(item, dict):
                continue
            passage = str(item.get("text") or item.get("passage") or "")
            if not passage.strip():
                continue
            refs.append(
                Reference(
                    index=1,
                    passage=passage,
                    source_url=item.get("url") or item.get("source_url"),
                    source_id=item.get("source_id"),
                    relevance=float(item.get("relevance", 0.0) or 0.0),
                )
            )
        qid = data.get("id")
        return RagSample(
            question=Question(text=str(data["question"]), id=str(qid) if qid is not None else None),
            references=ReferenceSet.renumbered(refs),
            answer=Answer(text=str(data.get("answer") or "")),
            gold_labels=tuple(str(x) for x in data.get("gold_labels") or []),
            polarity=str(data.get("polarity") or "unknown"),
            defect_kinds=tuple(str(x) for x in data.get("defect_kinds") or []),
        )


@dataclass(frozen=True)
class IterationRecord:
    # Always the original question; QA generation never sees the rewrite.
    question_used: str
    # The question on the first retrieval, the rewrite on re-retrieval.
    retrieval_query: str
    references: ReferenceSet
    answer: Optional[Answer]
    report: Optional[VerificationReport] = None
    revised_query: str = ""
    sigma_fired: bool = False
    raw_verification: Optional[str] = None
    notes: tuple[str, ...] = ()

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "question_used": self.question_used,
            "retrieval_query": self.retrieval_query,
            "references": self.references.to_json_dict(),
            "answer": self.answer.to_json_dict() if self.answer else None,
            "report": self.report.to_json_dict() if self.report else None,
            "revised_query": self.revised_query,
            "sigma_fired": self.sigma_fired,
            "raw_verification": self.raw_verification,
            "notes": list(self.notes),
        }

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "IterationRecord":
        return IterationRecord(
            question_used=str(data["question_used"]),
            retrieval_query=str(data["retrieval_query"]),
            references=ReferenceSet.from_json_dict(data.get("references") or {}),
            answer=Answer.from_json_dict(data["answer"]) if data.get("answer") else None,
            report=VerificationReport.from_json_dict(data["report"]) if data.get("report") else None,
            revised_query=str(data.get("revised_query") or ""),
            sigma_fired=bool(data.get("sigma_fired", False)),
            raw_verification=data.get("raw_verification"),
            notes=tuple(str(x) for x in data.get("notes") or []),
        )


@dataclass(frozen=True)
class PipelineTrace:
    question: Question
    iterations: tuple[IterationRecord, ...]
    final_answer: Answer
    terminated_by: str
    mode: str = "end_revise"

    def __post_init__(self) -> None:
        if not self.iterations:
            raise ValueError("PipelineTrace needs at least one iteration")
        if self.terminated_by not in TERMINATIONS:
            raise ValueError(f"Unknown terminated_by: {self.terminated_by}")
        if self.mode not in PIPELINE_MODES:
            raise ValueError(f"Unknown pipeline mode: {self.mode}")
        answered = [it.answer for it in self.iterations if it.answer is not None]
        if answered and answered[-1] != self.final_answer:
            raise ValueError("final_answer must equal the last iteration's answer")

    @property
    def first_answer(self) -> Answer:
        for it in self.iterations:
            if it.answer is not None:
                return it.answer
        return self.final_answer

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "question": self.question.to_json_dict(),
            "mode": self.mode,
            "iterations": [it.to_json_dict() for it in self.iterations],
            "final_answer": self.final_answer.to_json_dict(),
            "terminated_by": self.terminated_by,
        }

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "PipelineTrace":
        version = int(data.get("schema_version", TRACE_SCHEMA_VERSION))
        if version != TRACE_SCHEMA_VERSION:
            raise ValueError(f"Unsupported trace schema_version: {version}")
        return PipelineTrace(
            question=Question.from_json_dict(data["question"]),
            iterations=tuple(IterationRecord.from_json_dict(x) for x in data["iterations"]),
            final_answer=Answer.from_json_dict(data["final_answer"]),
            terminated_by=str(data["terminated_by"]),
            mode=str(data.get("mode", "end_revise")),
        )


@dataclass(frozen=True)
class SigmaPolicy:
    mode: str = "thresholded"
    ref_min: float = 0.27
    correctness_min: float = 0.26
    bias_max: float = 0.70
    truthfulness_min: float = 0.92
    require_judgment_false: bool = True
    max_iterations: int = 2

    def __post_init__(self) -> None:
        if self.mode not in SIGMA_MODES:
            raise ValueError(f"Unknown sigma mode: {self.mode}")
        for name in ("ref_min", "correctness_min", "bias_max", "truthfulness_min"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"sigma.{name} out of [0,1]: {value}")
        if self.max_iterations < 1:
            raise ValueError(f"sigma.max_iterations must be >= 1, got {self.max_iterations}")
