from __future__ import annotations

import ast
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from backends.base import GenerationBackend, GenerationRequest
from errors import CovRagError, UnparsableReport
from evaluation.metrics import rank_aggregate
from rendering.prompt_templates import EVAL_DIMENSIONS, EVAL_KINDS, PromptBuilder
from utils.json_extract import first_json_object
from utils.jsonl import read_jsonl


_LABEL_RE = re.compile(r"(\d+)\s*$")


@dataclass(frozen=True)
class JudgeCandidate:
    system: str
    answer: str
    revised_question: str = ""


@dataclass(frozen=True)
class JudgeCase:
    id: str
    kind: str
    question: str
    candidates: tuple[JudgeCandidate, ...]
    golden_label: tuple[str, ...] = ()
    reference: str = ""

    def __post_init__(self) -> None:
        if self.kind not in EVAL_KINDS:
            raise ValueError(f"Unknown judge case kind: {self.kind}")
        if not self.candidates:
            raise ValueError(f"Judge case {self.id!r} has no candidates")
        systems = [c.system for c in self.candidates]
        if len(set(systems)) != len(systems):
            raise ValueError(f"Judge case {self.id!r} repeats a system name")

    @staticmethod
    def from_json_dict(data: dict[str, Any]) -> "JudgeCase":
        raw = data.get("candidates") or data.get("answers") or []
        if isinstance(raw, dict):
            raw = [{"system": k, "answer": v} for k, v in raw.items()]
        candidates = tuple(
            JudgeCandidate(
                system=str(c["system"]),
                answer=str(c.get("answer") or ""),
                revised_question=str(c.get("revised_question") or ""),
            )
            for c in raw
        )
        golds = data.get("golden_label") or data.get("gold_labels") or []
        if isinstance(golds, str):
            golds = [golds]
        return JudgeCase(
            id=str(data["id"]),
            kind=str(data.get("kind") or "others"),
            question=str(data.get("question") or ""),
            candidates=candidates,
            golden_label=tuple(str(g) for g in golds),
            reference=str(data.get("reference") or ""),
        )


def load_cases(path: Path) -> list[JudgeCase]:
    return [JudgeCase.from_json_dict(row) for row in read_jsonl(path)]


@dataclass(frozen=True)
class JudgeOutcome:
    case_id: str
    kind: str
    # permutation[i] is the candidate index shown to the judge at position i + 1.
    permutation: tuple[int, ...]
    ranks: dict[str, dict[str, int]]
    scores: dict[str, dict[str, float]]
    reason: str = ""

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "kind": self.kind,
            "permutation": list(self.permutation),
            "order_randomized": True,
            "ranks": self.ranks,
            "scores": self.scores,
            "reason": self.reason,
        }


@dataclass
class JudgeRun:
    outcomes: list[JudgeOutcome] = field(default_factory=list)
    rejects: list[dict[str, Any]] = field(default_factory=list)
    transcripts: list[dict[str, Any]] = field(default_factory=list)


def case_permutation(case: JudgeCase, seed: int) -> tuple[int, ...]:
    order = list(range(len(case.candidates)))
    random.Random(f"{seed}:{case.id}").shuffle(order)
    return tuple(order)


def build_case_prompt(case: JudgeCase, permutation: Sequence[int], prompts: PromptBuilder) -> str:
    shown = [case.candidates[i] for i in permutation]
    if case.kind == "revise":
        bindings: dict[str, Any] = {
            "original_question": case.question,
            "golden_label": list(case.golden_label),
            "reference": case.reference,
            "answers": [c.answer for c in shown],
            "revised_questions": [c.revised_question for c in shown],
        }
    else:
        bindings = {"question": case.question, "answers": [c.answer for c in shown]}
        if case.kind == "citation":
            bindings["reference"] = case.reference
        else:
            bindings["golden_label"] = list(case.golden_label)
    return prompts.build_eval_prompt(case.kind, bindings)


def _load_rank_object(raw: str) -> dict[str, Any]:
    obj = first_json_object(raw, accept=lambda o: "rank_result" in o)
    if obj is not None:
        return obj
    # The rank example uses Python tuples, which judges tend to copy.
    start, end = raw.find("{"), raw.rfind("}")
    if start != -1 and end > start:
        try:
            value = ast.literal_eval(raw[start : end + 1])
        except (ValueError, SyntaxError):
            value = None
        if isinstance(value, dict) and "rank_result" in value:
            return value
    raise UnparsableReport("no rank_result object in judge output", raw=raw)


def _label_position(label: Any, n: int) -> int:
    m = _LABEL_RE.search(str(label))
    if not m or not 1 <= int(m.group(1)) <= n:
        raise ValueError(f"unknown rank label {label!r}")
    return int(m.group(1))


def _entry(item: Any) -> tuple[Any, float]:
    if isinstance(item, dict):
        label = item.get("model", item.get("answer", item.get("label")))
        score = item.get("score", 0.0)
    elif isinstance(item, (list, tuple)) and len(item) == 2:
        label, score = item
    else:
        raise ValueError(f"malformed rank entry {item!r}")
    return label, float(score)


def parse_rank_result(raw: str, kind: str, n: int) -> tuple[dict[str, list[tuple[int, float]]], str]:
    """Per dimension, the shown positions (1-based) from best to worst with their scores."""
    obj = _load_rank_object(raw)
    result = obj["rank_result"]
    reason = str(obj.get("rank_reason") or "")
    if kind == "revise" and isinstance(result, list):
        result = {EVAL_DIMENSIONS["revise"][0]: result}
    if not isinstance(result, dict):
        raise UnparsableReport("rank_result is not an object", raw=raw)

    wanted = {d.lower().replace(" ", "").replace("_", ""): d for d in EVAL_DIMENSIONS[kind]}
    parsed: dict[str, list[tuple[int, float]]] = {}
    try:
        for key, items in result.items():
            dim = wanted.get(str(key).lower().replace(" ", "").replace("_", ""))
            if dim is None:
                continue
            entries = [_entry(it) for it in items]
            positions = [_label_position(label, n) for label, _ in entries]
            if sorted(positions) != list(range(1, n + 1)):
                raise ValueError(f"{dim} ranking is not a permutation of 1..{n}: {positions}")
            parsed[dim] = [(p, s) for p, (_, s) in zip(positions, entries)]
    except (TypeError, ValueError) as e:
        raise UnparsableReport(str(e), raw=raw) from e
    missing = [d for d in EVAL_DIMENSIONS[kind] if d not in parsed]
    if missing:
        raise UnparsableReport(f"rank_result lacks dimensions {missing}", raw=raw)
    return parsed, reason


def _outcome(case: JudgeCase, permutation: Sequence[int], raw: str) -> JudgeOutcome:
    parsed, reason = parse_rank_result(raw, case.kind, len(case.candidates))
    ranks: dict[str, dict[str, int]] = {}
    scores: dict[str, dict[str, float]] = {}
    for dim, ordered in parsed.items():
        ranks[dim] = {}
        scores[dim] = {}
        rank = 0
        previous: Optional[float] = None
        for place, (position, score) in enumerate(ordered, start=1):
            # Equal adjacent scores share a rank.
            if previous is None or score != previous:
                rank = place
            previous = score
            system = case.candidates[permutation[position - 1]].system
            ranks[dim][system] = rank
            scores[dim][system] = score
    return JudgeOutcome(case_id=case.id, kind=case.kind, permutation=tuple(permutation), ranks=ranks, scores=scores, reason=reason)


def run_judge_ranking(
    judge_backend: GenerationBackend,
    cases: Sequence[JudgeCase],
    prompts: Optional[PromptBuilder] = None,
    *,
    seed: int = 0,
    max_workers: int = 1,
    max_tokens: int = 512,
    logger: logging.Logger,
) -> JudgeRun:
    """Rank each case's candidates with the judge. Candidate order is shuffled per case and recorded."""
    prompts = prompts or PromptBuilder()

    def _one(case: JudgeCase) -> tuple[Optional[JudgeOutcome], dict[str, Any], Optional[dict[str, Any]]]:
        permutation = case_permutation(case, seed)
        transcript: dict[str, Any] = {"case_id": case.id, "permutation": list(permutation), "prompt": "", "raw": ""}
        try:
            transcript["prompt"] = build_case_prompt(case, permutation, prompts)
            raw = judge_backend.generate(GenerationRequest(prompt=transcript["prompt"], max_tokens=max_tokens))
            transcript["raw"] = raw
            return _outcome(case, permutation, raw), transcript, None
        except (CovRagError, ValueError) as e:
            logger.warning("Judge case %s quarantined: %s %r", case.id, e, str(transcript["raw"])[:200])
            return None, transcript, {"case_id": case.id, "reason": f"{type(e).__name__}: {e}", "raw": transcript["raw"]}

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        results = list(executor.map(_one, cases))

    run = JudgeRun()
    for outcome, transcript, reject in results:
        run.transcripts.append(transcript)
        if outcome is not None:
            run.outcomes.append(outcome)
        if reject is not None:
            run.rejects.append(reject)
    logger.info("Judge done. Cases=%s Ranked=%s Quarantined=%s", len(cases), len(run.outcomes), len(run.rejects))
    return run


def aggregate_ranks(outcomes: Sequence[JudgeOutcome]) -> dict[str, dict[str, float]]:
    """Mean rank per (dimension, system); lower is better."""
    collected: dict[str, dict[str, list[int]]] = {}
    for o in outcomes:
        for dim, by_system in o.ranks.items():
            for system, rank in by_system.items():
                collected.setdefault(dim, {}).setdefault(system, []).append(rank)
    return {
        dim: {system: rank_aggregate(ranks) for system, ranks in sorted(by_system.items())}
        for dim, by_system in sorted(collected.items())
    }
