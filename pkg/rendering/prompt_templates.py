from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from errors import EmptyAnswer, EmptyReferences, MissingBinding
from models import Answer, Question, RagSample, ReferenceSet


PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")

BACKSLASH_SEPARATOR = "\\\\"
NEWLINE_SEPARATOR = "\n"

QA_TAG = "#Question-Answering-in-Context-Task#"
VERIFICATION_TAG = "#verification-Task#"
REWRITE_TAG = "#rewrite-Task#"
RERANK_TAG = "#passage-ranking-Task#"
AUGMENT_TAG = "#negative-answer-Task#"

# Example scores for the judge's rank format; position i gets the i-th value.
RANK_EXAMPLE_SCORES: tuple[float, ...] = (0.77, 0.53, 0.37, 0.12, 0.05, 0.02)

_REVISE_INSTRUCTION = (
    "Revise the question to make it easier to find reference in a web search and easier to answer. "
    "Note question in the following style is easier to answer, including: using a question format, "
    "ending with a question mark(e.g., ?), and emphasizing interrogative pronouns at the end (e.g., who?)"
)

_QA_BODY = QA_TAG + "{{references}}{{sep}}Question: {{question}}{{sep}}Answer:"

_VERIFICATION_BODY = "\n".join(
    [
        VERIFICATION_TAG
        + "Criteria Details for answers include Correctness, Citation Accuracy, Truthfulness, Bias, Conciseness, details are as followed:",
        "Correctness(0,1):  Evaluating whether the question is correctly answered.",
        "Citation_Accuracy(0,1):  Evaluating whether the reference marks in the answer are accurate.",
        "Truthfulness(0,1):  Evaluating whether the text itself violates common sense, logic or contradictions.",
        "Bias(0,1): Assessing whether the answer deviates from that from you, not rely on the references.bias is 1 means big difference, 0 means no difference.",
        "Conciseness(0,1): Evaluating whether the answer directly and succinctly addresses the question without unnecessary elaboration.",
        '{"question": {{question}}, "answer": {{answer}}, "reference": {{references}}}',
        "Now you are a reading comprehension examiner who should do things as below:",
        "1. Score the Correctness of the reference, which would affect the Correctness of answer.",
        "2. Score the answer based on the evaluation criteria.",
        "3. Assess whether the answer is true, false, or unclear, according to your scoring , especially for bias.",
        "4. If this answer is not accurately true, " + _REVISE_INSTRUCTION,
        "Output format example:",
        '{"1": {"reference_correctness": 0.9}, "2": {"correctness": 1, "citation_accuracy": 0.8, "truthfulness": 0.7, "bias": 0.8, "conciseness": 0.9}, "3": "true", "4": ""}',
    ]
)

_EVAL_CITATION_BODY = "\n".join(
    [
        "Criteria Details For Answers include:",
        "Citation Accuracy(0,1):  Evaluating whether the reference marks in the answer are accurate.",
        "",
        '{"question": {{question}}, "reference": {{reference}}, {{answers}}}',
        "",
        "Now you are a reading comprehension examiner who should do things as below:",
        "1. Score the answer based on the evaluation criteria.",
        "2. Rank the scores of each answer from high to low according to each scoring criterion.",
        "3. Briefly state the reason for your Rank.",
        "",
        "Output format example:",
        '{"rank_result": {{rank_example}}, "rank_reason": "The reason for this ranking."}',
    ]
)

_EVAL_OTHERS_BODY = "\n".join(
    [
        "Criteria Details For Answers include:",
        "Correctness(0,1):  Evaluating whether the question is correctly answered, you can refer to the golden label of the question below when evaluating.",
        "Truthfulness(0,1):  Evaluating whether the text itself violates common sense, logic or contains contradictions.",
        "Conciseness(0,1):  Evaluating whether the answer directly and succinctly addresses the question without unnecessary elaboration.",
        "",
        '{"question": {{question}}, "golden label": {{golden_label}}, {{answers}}}',
        "",
        "Now you are a reading comprehension examiner who should do things as below:",
        "1. Score the answer based on the provided evaluation criteria.",
        "2. Rank the scores of each answer from high to low according to each scoring criterion.",
        "3. Briefly state the reason for your Rank.",
        "",
        "Output format example:",
        '{"rank_result": {{rank_example}}, "rank_reason": "The reason for this ranking."}',
    ]
)

_EVAL_REVISE_BODY = "\n".join(
    [
        "Evaluate the appropriateness of revised questions and answers provided by {{model_count}} models. "
        "Assess each model's response based on its alignment with a golden answer and the necessity and quality of its revised question.",
        "1. Assess the motivation of revision:",
        "Firstly, Compare each model's answer to the golden answer. Then, If the answer is inaccurate and the reference "
        "is inaccurate to answer the question, proceed to evaluate the revised question. Or, it's a poor revision timing.",
        "2. Assess the content of revision. Note assess criterias are as followed:",
        " (1). How well it improves content retrieval.",
        " (2). Whether it maintains the original intent and increases clarity or correctness.",
        "",
        "Inputs:",
        "{",
        '"Original Question": {{original_question}}, "Golden Label": {{golden_label}}, "Reference": {{reference}}, {{models}}',
        "}",
        "",
        "Output Requirements:",
        "Rank the relvised questions based on their evaluation scores(threshold value of score should be between 0 and 1), "
        "from highest to lowest. Provide an overall reason for the ranking.",
        "",
        "Note you should only output the evaluate result, format is as followed:",
        '{"rank_result": {{rank_example}}, "rank_reason": "Overall Evaluation Reason"}',
    ]
)

_REWRITE_BODY = "\n".join(
    [
        REWRITE_TAG + _REVISE_INSTRUCTION,
        '{"question": {{question}}}',
        "Output only the revised question.",
    ]
)

_RERANK_BODY = "\n".join(
    [
        RERANK_TAG + "Score how relevant each numbered passage is to the question, from 0 (unrelated) to 1 (answers it).",
        "Question: {{question}}",
        "{{passages}}",
        "Output format example:",
        '{"scores": [0.9, 0.1, 0.5]}',
        "Return one score per passage, in passage order.",
    ]
)

_AUGMENT_BODY = "\n".join(
    [
        AUGMENT_TAG + "Rewrite the answer so that it contains a {{defect}} error while staying fluent. {{defect_hint}}",
        '{"question": {{question}}, "answer": {{answer}}, "reference": {{references}}}',
        "Output only the rewritten answer.",
    ]
)

_AUGMENT_HINTS: dict[str, str] = {
    "repeated": "Repeat one word or phrase several times in a row.",
    "citation_swap": "Change the citation marks to wrong reference numbers, e.g. [2][3] -> [1][4][5].",
    "retrieval_error": "Answer as if the references were unrelated to the question or the question were incomplete.",
}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def placeholders(self) -> frozenset[str]:
        return frozenset(PLACEHOLDER_RE.findall(self.body))

    def render(self, bindings: Mapping[str, str]) -> str:
        for name in sorted(self.placeholders()):
            if name not in bindings:
                raise MissingBinding(name, template=self.name)
        # Single pass: bound values are never re-scanned for placeholders.
        return PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), self.body)


DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    t.name: t
    for t in (
        PromptTemplate("qa", _QA_BODY),
        PromptTemplate("verification", _VERIFICATION_BODY),
        PromptTemplate("eval_citation", _EVAL_CITATION_BODY),
        PromptTemplate("eval_others", _EVAL_OTHERS_BODY),
        PromptTemplate("eval_revise", _EVAL_REVISE_BODY),
        PromptTemplate("rewrite", _REWRITE_BODY),
        PromptTemplate("rerank", _RERANK_BODY),
        PromptTemplate("augment", _AUGMENT_BODY),
    )
}

# Placeholders each template may use; overrides are checked against these.
BINDING_RULES: dict[str, frozenset[str]] = {
    "qa": frozenset({"references", "sep", "question"}),
    "verification": frozenset({"references", "sep", "question", "answer"}),
    "eval_citation": frozenset({"question", "reference", "answers", "rank_example"}),
    "eval_others": frozenset({"question", "golden_label", "answers", "rank_example"}),
    "eval_revise": frozenset({"original_question", "golden_label", "reference", "models", "model_count", "rank_example"}),
    "rewrite": frozenset({"question", "sep"}),
    "rerank": frozenset({"question", "passages"}),
    "augment": frozenset({"question", "answer", "references", "sep", "defect", "defect_hint"}),
}

EVAL_KINDS: dict[str, str] = {"citation": "eval_citation", "others": "eval_others", "revise": "eval_revise"}
EVAL_DIMENSIONS: dict[str, tuple[str, ...]] = {
    "citation": ("Citation Accuracy",),
    "others": ("Correctness", "Truthfulness", "Conciseness"),
    "revise": ("Revision",),
}


def load_templates(templates_dir: Optional[Path]) -> dict[str, PromptTemplate]:
    templates = dict(DEFAULT_TEMPLATES)
    if templates_dir is None:
        return templates
    root = Path(templates_dir)
    if not root.is_dir():
        raise ValueError(f"Template directory not found: {root}")
    for path in sorted(root.glob("*.txt")):
        name = path.stem
        if name not in BINDING_RULES:
            raise ValueError(f"Unknown template name {name!r} in {root}")
        body = path.read_text(encoding="utf-8")
        if body.endswith("\n"):
            body = body[:-1]
        template = PromptTemplate(name, body)
        unknown = template.placeholders() - BINDING_RULES[name]
        if unknown:
            raise ValueError(f"Template {name!r} uses placeholders with no binding rule: {sorted(unknown)}")
        templates[name] = template
    return templates


class PromptBuilder:
    def __init__(self, templates: Optional[Mapping[str, PromptTemplate]] = None, *, separator: str = "backslash"):
        self.templates = dict(templates or DEFAULT_TEMPLATES)
        if separator not in {"backslash", "newline"}:
            raise ValueError(f"Unknown separator style: {separator}")
        self.sep = BACKSLASH_SEPARATOR if separator == "backslash" else NEWLINE_SEPARATOR

    @classmethod
    def from_config(cls, prompt_config: Any) -> "PromptBuilder":
        return cls(load_templates(prompt_config.templates_dir), separator=prompt_config.separator)

    def render_references(self, refs: ReferenceSet) -> str:
        return self.sep.join(f"Reference [{r.index}]: {r.passage}" for r in refs)

    def build_qa_prompt(self, question: Question, refs: ReferenceSet) -> str:
        if len(refs) == 0:
            raise EmptyReferences("QA prompt needs at least one reference")
        return self.templates["qa"].render(
            {"references": self.render_references(refs), "sep": self.sep, "question": question.text}
        )

    def build_verification_prompt(self, question: Question, refs: ReferenceSet, answer: Answer) -> str:
        if len(refs) == 0:
            raise EmptyReferences("verification prompt needs at least one reference")
        if not answer.text.strip():
            raise EmptyAnswer("verification prompt needs a non-empty answer")
        return self.templates["verification"].render(
            {
                "references": self.render_references(refs),
                "sep": self.sep,
                "question": question.text,
                "answer": answer.text,
            }
        )

    def build_rewrite_prompt(self, question: Question) -> str:
        return self.templates["rewrite"].render({"question": question.text, "sep": self.sep})

    def build_rerank_prompt(self, query: str, passages: Sequence[str]) -> str:
        listing = "\n".join(f"Passage [{i}]: {p}" for i, p in enumerate(passages, start=1))
        return self.templates["rerank"].render({"question": query, "passages": listing})

    def build_augment_prompt(self, sample: RagSample, kind: str) -> str:
        if kind not in _AUGMENT_HINTS:
            raise ValueError(f"Unknown negative kind: {kind}")
        return self.templates["augment"].render(
            {
                "question": sample.question.text,
                "answer": sample.answer.text,
                "references": self.render_references(sample.references),
                "sep": self.sep,
                "defect": kind.replace("_", " "),
                "defect_hint": _AUGMENT_HINTS[kind],
            }
        )

    def build_eval_prompt(self, kind: str, bindings: Mapping[str, Any]) -> str:
        if kind not in EVAL_KINDS:
            raise ValueError(f"Unknown eval kind: {kind}")
        template = self.templates[EVAL_KINDS[kind]]

        def need(name: str) -> Any:
            if name not in bindings or bindings[name] is None:
                raise MissingBinding(name, template=template.name)
            return bindings[name]

        if kind == "revise":
            answers = [str(a) for a in need("answers")]
            revised = [str(r) for r in need("revised_questions")]
            if not answers:
                raise ValueError("revise eval needs at least one answer")
            if len(revised) != len(answers):
                raise ValueError("revise eval needs one revised question per answer")
            models = ", ".join(
                f'"Model{i}": {{"Answer{i}": {a}, "Revised Question{i}": {r}}}'
                for i, (a, r) in enumerate(zip(answers, revised), start=1)
            )
            example = ", ".join(
                f'{{"model": "{i}", "score": {_rank_score(i - 1)}}}' for i in range(1, len(answers) + 1)
            )
            resolved = {
                "original_question": str(need("original_question")),
                "golden_label": _render_label(need("golden_label")),
                "reference": self._render_reference_binding(need("reference")),
                "models": models,
                "model_count": str(len(answers)),
                "rank_example": f"[{example}]",
            }
            return template.render(resolved)

        answers = [str(a) for a in need("answers")]
        if not answers:
            raise ValueError(f"{kind} eval needs at least one answer")
        resolved = {
            "question": str(need("question")),
            "answers": ", ".join(f'"answer{i}": {a}' for i, a in enumerate(answers, start=1)),
            "rank_example": _rank_example(EVAL_DIMENSIONS[kind], len(answers)),
        }
        if kind == "citation":
            resolved["reference"] = self._render_reference_binding(need("reference"))
        else:
            resolved["golden_label"] = _render_label(need("golden_label"))
        return template.render(resolved)

    def _render_reference_binding(self, value: Any) -> str:
        if isinstance(value, ReferenceSet):
            return self.render_references(value)
        return str(value)


def _rank_score(position: int) -> float:
    if position < len(RANK_EXAMPLE_SCORES):
        return RANK_EXAMPLE_SCORES[position]
    return 0.01


def _rank_example(dimensions: Sequence[str], n_answers: int) -> str:
    parts: list[str] = []
    for d, dim in enumerate(dimensions):
        # Rotate so each dimension shows a different order.
        order = [((i + n_answers - 1 + d) % n_answers) + 1 for i in range(n_answers)]
        pairs = ", ".join(f'("answer{a}", {_rank_score(pos)})' for pos, a in enumerate(order))
        parts.append(f'"{dim}": [{pairs}]')
    return "{" + ", ".join(parts) + "}"


def _render_label(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return json.dumps([str(x) for x in value], ensure_ascii=False)
    return str(value)


_DEFAULT_BUILDER = PromptBuilder()


def build_qa_prompt(question: Question, refs: ReferenceSet) -> str:
    return _DEFAULT_BUILDER.build_qa_prompt(question, refs)


def build_verification_prompt(question: Question, refs: ReferenceSet, answer: Answer) -> str:
    return _DEFAULT_BUILDER.build_verification_prompt(question, refs, answer)


def build_eval_prompt(kind: str, bindings: Mapping[str, Any]) -> str:
    return _DEFAULT_BUILDER.build_eval_prompt(kind, bindings)
