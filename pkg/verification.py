from __future__ import annotations

import json
import math
import re
from typing import Any, Optional

from errors import UnparsableReport
from models import SCORE_FIELDS, SigmaPolicy, VerificationReport
from utils.json_extract import first_json_object


_KEY_RE = re.compile(r"[^a-z0-9]")

# Preferred spelling first.
_SCORE_ALIASES: dict[str, tuple[str, ...]] = {
    "reference_correctness": ("referencecorrectness", "refcorrect", "refcorrectness", "referencescore"),
    "correctness": ("correctness", "correct"),
    "citation_accuracy": ("citationaccuracy", "citationacc", "citation"),
    "truthfulness": ("truthfulness", "truthful"),
    "bias": ("bias",),
    "conciseness": ("conciseness", "concise"),
}
_ANSWER_BLOCK_KEYS = frozenset({"answerscore", "answerscores", "scores"})
_JUDGMENT_KEYS = frozenset({"judgment", "judgement"})
_REVISION_KEYS = frozenset({"revisedquery", "revisedquestion", "revision", "revisequery"})

_NUMBERED_ANSWER_KEYS: dict[str, str] = {
    "correctness": "correctness",
    "citation_accuracy": "citation_accuracy",
    "truthfulness": "truthfulness",
    "bias": "bias",
    "conciseness": "conciseness",
}
_NAMED_ANSWER_KEYS: dict[str, str] = {
    "correctness": "Correctness",
    "citation_accuracy": "CitationAcc",
    "truthfulness": "Truthfulness",
    "bias": "Bias",
    "conciseness": "Conciseness",
}


def _norm(key: Any) -> str:
    return _KEY_RE.sub("", str(key).lower())


def _normalized(obj: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in obj.items():
        out.setdefault(_norm(k), v)
    return out


def _looks_like_report(obj: dict[str, Any]) -> bool:
    keys = set(_normalized(obj))
    if "1" in keys and "2" in keys:
        return True
    return bool(keys & (set(_SCORE_ALIASES["reference_correctness"]) | _ANSWER_BLOCK_KEYS))


def _as_score(value: Any) -> Optional[float]:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        f = float(value)
    elif isinstance(value, str):
        try:
            f = float(value.strip())
        except ValueError:
            return None
    else:
        return None
    return None if math.isnan(f) else f


def _find_score(flat: dict[str, Any], field: str) -> Optional[float]:
    for alias in _SCORE_ALIASES[field]:
        if alias in flat:
            return _as_score(flat[alias])
    return None


def _judgment_token(value: Any) -> str:
    if value is None:
        return "unclear"
    if isinstance(value, bool):
        return "true" if value else "false"
    token = str(value).strip().strip("'\".").strip().lower()
    return token or "unclear"


def _revision_text(value: Any) -> str:
    if value is None:
        return ""
    return str(value).strip()


def _flatten(obj: dict[str, Any]) -> tuple[dict[str, Any], Any, Any]:
    """Collect score keys, the judgment value and the revision value from either keying."""
    top = _normalized(obj)
    flat: dict[str, Any] = {}
    if "1" in top and "2" in top:
        block1 = top["1"]
        if isinstance(block1, dict):
            flat.update(_normalized(block1))
        else:
            flat["referencecorrectness"] = block1
        if isinstance(top["2"], dict):
            flat.update(_normalized(top["2"]))
        return flat, top.get("3"), top.get("4")

    flat.update({k: v for k, v in top.items() if not isinstance(v, dict)})
    for key in _ANSWER_BLOCK_KEYS:
        if isinstance(top.get(key), dict):
            flat.update(_normalized(top[key]))
    judgment = next((top[k] for k in _JUDGMENT_KEYS if k in top), None)
    revision = next((top[k] for k in _REVISION_KEYS if k in top), None)
    return flat, judgment, revision


def parse_verification_output(raw: str) -> VerificationReport:
    obj = first_json_object(raw, accept=_looks_like_report)
    if obj is None:
        raise UnparsableReport("no verification object found in model output", raw=raw)

    flat, judgment, revision = _flatten(obj)
    scores: dict[str, float] = {}
    clamped = False
    for field in SCORE_FIELDS:
        value = _find_score(flat, field)
        if value is None:
            raise UnparsableReport(f"verification output has no usable {field} score", raw=raw)
        if value < 0.0 or value > 1.0:
            value = min(1.0, max(0.0, value))
            clamped = True
        scores[field] = value

    return VerificationReport(
        **scores,
        judgment=_judgment_token(judgment),
        revised_query=_revision_text(revision),
        clamped=clamped,
    )


def render_report(report: VerificationReport, keying: str = "numbered") -> str:
    """Serialize a report the way the model is trained to emit it."""
    if keying == "numbered":
        payload: dict[str, Any] = {
            "1": {"reference_correctness": report.reference_correctness},
            "2": {k: getattr(report, f) for f, k in _NUMBERED_ANSWER_KEYS.items()},
            "3": report.judgment,
            "4": report.revised_query,
        }
    elif keying == "named":
        payload = {
            "RefCorrect": report.reference_correctness,
            "Answer-Score": {k: getattr(report, f) for f, k in _NAMED_ANSWER_KEYS.items()},
            "Judgment": report.judgment,
            "RevisedQuery": report.revised_query,
        }
    else:
        raise ValueError(f"Unknown report keying: {keying}")
    return json.dumps(payload, ensure_ascii=False)


def render_revision_only(report: VerificationReport) -> str:
    """Target for the chain-free variant: just the revised question (empty when the answer stands)."""
    return report.revised_query


def parse_revision_only(raw: str) -> str:
    """Read a chain-free verification output as a bare revised question."""
    text = (raw or "").strip()
    obj = first_json_object(text)
    if obj is not None and text.startswith("{"):
        top = _normalized(obj)
        for key in ("4", *sorted(_REVISION_KEYS)):
            if key in top:
                return _revision_text(top[key])
        return ""
    return text.strip("'\"").strip()


def sigma(report: VerificationReport, policy: SigmaPolicy) -> bool:
    """Re-retrieval indicator. Thresholds are strict; an unclear judgment counts as not-true."""
    revision = report.revised_query.strip()
    if policy.mode == "revise_only":
        return bool(revision)
    if not revision:
        return False
    if policy.require_judgment_false and report.judgment == "true":
        return False
    return (
        report.reference_correctness < policy.ref_min
        or report.correctness < policy.correctness_min
        or report.bias > policy.bias_max
        or report.truthfulness < policy.truthfulness_min
    )
