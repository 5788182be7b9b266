from __future__ import annotations

import itertools
import random
import re
import string
from dataclasses import replace
from typing import TYPE_CHECKING, Optional

from backends.base import GenerationBackend, GenerationRequest
from errors import CannotSwap
from models import MAX_REFERENCES, Answer, Question, RagSample, render_citations

if TYPE_CHECKING:
    from rendering.prompt_templates import PromptBuilder


NEGATIVE_KINDS: tuple[str, ...] = ("repeated", "citation_swap", "retrieval_error")

# Which RagSample field each defect kind touches.
DEFECT_FIELDS: dict[str, str] = {
    "repeated": "answer",
    "citation_swap": "answer",
    "retrieval_error/references": "references",
    "retrieval_error/question": "question",
    "repeated/backend": "answer",
    "citation_swap/backend": "answer",
    "retrieval_error/backend": "answer",
}

_WORD_RE = re.compile(r"[A-Za-z][A-Za-z'-]*")
_MARKER_RUN_RE = re.compile(r"(?:\[\d{1,2}\])+")
_INTERROGATIVES = frozenset({"who", "whom", "whose", "what", "when", "where", "which", "why", "how"})
_PUNCT_TABLE = str.maketrans("", "", string.punctuation + "‘’“”")

_CITATION_SUBSETS: tuple[frozenset[int], ...] = tuple(
    frozenset(c)
    for k in range(1, MAX_REFERENCES + 1)
    for c in itertools.combinations(range(1, MAX_REFERENCES + 1), k)
)


def _negative(sample: RagSample, defects: tuple[str, ...], **changes: object) -> RagSample:
    return replace(sample, polarity="negative", defect_kinds=defects, **changes)


def _repeat_word(sample: RagSample, rng: random.Random, target: Optional[str]) -> RagSample:
    text = sample.answer.text
    matches = list(_WORD_RE.finditer(text))
    if target:
        matches = [m for m in matches if m.group(0) == target] or matches
    if not matches:
        raise ValueError(f"answer of {sample.id or '?'} has no word to repeat")
    m = matches[-1] if target and matches[-1].group(0) == target else rng.choice(matches)
    extra = rng.randint(2, 5)
    word = m.group(0)
    repeated = text[: m.end()] + f" {word}" * extra + text[m.end() :]
    return _negative(sample, ("repeated",), answer=Answer(text=repeated))


def _swap_citations(sample: RagSample, rng: random.Random) -> RagSample:
    current = sample.answer.citations
    if not current:
        raise CannotSwap(f"answer of {sample.id or '?'} has no citation marks to swap")
    choices = [s for s in _CITATION_SUBSETS if s != current]
    new = rng.choice(choices)
    marker = render_citations(new)
    swapped = _MARKER_RUN_RE.sub(lambda _m: marker, sample.answer.text)
    return _negative(sample, ("citation_swap",), answer=Answer(text=swapped))


def degrade_question(text: str, rng: random.Random) -> str:
    """Keyword-style query: punctuation stripped, interrogatives dropped, one word misspelled."""
    words = text.translate(_PUNCT_TABLE).lower().split()
    kept = [w for w in words if w not in _INTERROGATIVES] or words
    long_positions = [i for i, w in enumerate(kept) if len(w) >= 4 and w.isalpha()]
    if long_positions:
        i = rng.choice(long_positions)
        w = kept[i]
        j = rng.randrange(1, len(w) - 1)
        kept[i] = w[:j] + w[j + 1 :]
    degraded = " ".join(kept)
    if not degraded or degraded == text:
        degraded = (degraded or text) + " " + (kept[-1] if kept else "x")
    return degraded


def _retrieval_error(sample: RagSample, rng: random.Random, donor: Optional[RagSample]) -> RagSample:
    can_swap_refs = (
        donor is not None
        and donor.id != sample.id
        and len(donor.references) > 0
        and donor.references.passages() != sample.references.passages()
    )
    mode = rng.choice(("references", "question", "both")) if can_swap_refs else "question"

    defects: list[str] = []
    changes: dict[str, object] = {}
    if mode in ("references", "both") and donor is not None:
        changes["references"] = donor.references
        defects.append("retrieval_error/references")
    if mode in ("question", "both"):
        changes["question"] = Question(text=degrade_question(sample.question.text, rng), id=sample.question.id)
        defects.append("retrieval_error/question")
    return _negative(sample, tuple(defects), **changes)


def augment_negative(
    sample: RagSample,
    kind: str,
    seed: int,
    *,
    donor: Optional[RagSample] = None,
    target: Optional[str] = None,
) -> RagSample:
    """Deterministic negative sample. `donor` supplies wrong references for retrieval_error;
    `target` pins the repeated word."""
    if kind not in NEGATIVE_KINDS:
        raise ValueError(f"Unknown negative kind: {kind}")
    if not sample.answer.text.strip():
        raise ValueError(f"sample {sample.id or '?'} has an empty answer")
    rng = random.Random(f"{seed}:{kind}:{sample.id}")
    if kind == "repeated":
        return _repeat_word(sample, rng, target)
    if kind == "citation_swap":
        return _swap_citations(sample, rng)
    return _retrieval_error(sample, rng, donor)


def augment_with_backend(
    sample: RagSample,
    kind: str,
    backend: GenerationBackend,
    prompts: "PromptBuilder",
    *,
    max_tokens: int = 512,
    temperature: float = 0.0,
) -> RagSample:
    """Ask a generation backend to rewrite the answer with the given defect."""
    if not sample.answer.text.strip():
        raise ValueError(f"sample {sample.id or '?'} has an empty answer")
    prompt = prompts.build_augment_prompt(sample, kind)
    text = backend.generate(GenerationRequest(prompt=prompt, max_tokens=max_tokens, temperature=temperature)).strip()
    if not text or text == sample.answer.text:
        raise ValueError(f"backend returned no rewritten answer for {sample.id or '?'}")
    return _negative(sample, (f"{kind}/backend",), answer=Answer(text=text))
