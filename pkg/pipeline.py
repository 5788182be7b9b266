from __future__ import annotations

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Sequence

from backends.base import GenerationBackend, GenerationRequest
from config import GenerationConfig
from errors import CovRagError, UnparsableReport
from models import Answer, IterationRecord, PipelineTrace, Question, ReferenceSet, SigmaPolicy, VerificationReport, validate_report
from rendering.prompt_templates import PromptBuilder
from retrievers.base import Retriever
from utils.jsonl import read_jsonl, write_jsonl
from verification import parse_revision_only, parse_verification_output, sigma


DEFAULT_GENERATION = GenerationConfig(max_tokens=512, verify_max_tokens=256, temperature=0.0, stop_sequences=())


@contextmanager
def _stage(name: str) -> Iterator[None]:
    """Tag errors escaping a pipeline stage; foreign exceptions are wrapped in CovRagError."""
    try:
        yield
    except CovRagError as e:
        if e.stage is None:
            e.stage = name
        raise
    except Exception as e:
        raise CovRagError(f"{type(e).__name__}: {e}", stage=name) from e


@dataclass(frozen=True)
class _Verdict:
    report: Optional[VerificationReport]
    raw: str
    revised_query: str
    fired: bool
    accepted: bool
    notes: tuple[str, ...] = ()


class CovRagPipeline:
    def __init__(
        self,
        backend: GenerationBackend,
        retriever: Retriever,
        *,
        policy: SigmaPolicy,
        prompts: Optional[PromptBuilder] = None,
        generation: Optional[GenerationConfig] = None,
        chain: bool = True,
        logger: logging.Logger,
    ):
        self.backend = backend
        self.retriever = retriever
        self.policy = policy
        self.prompts = prompts or PromptBuilder()
        self.generation = generation or DEFAULT_GENERATION
        self.chain = chain
        self.logger = logger

    def _retrieve(self, query: str) -> ReferenceSet:
        with _stage("retrieve"):
            return self.retriever.retrieve(query)

    def _generate(self, prompt: str, *, max_tokens: int, stage: str) -> str:
        request = GenerationRequest(
            prompt=prompt,
            max_tokens=max_tokens,
            temperature=self.generation.temperature,
            stop_sequences=self.generation.stop_sequences,
        )
        with _stage(stage):
            return self.backend.generate(request)

    def _answer(self, question: Question, refs: ReferenceSet) -> Answer:
        with _stage("qa_prompt"):
            prompt = self.prompts.build_qa_prompt(question, refs)
        text = self._generate(prompt, max_tokens=self.generation.max_tokens, stage="generate")
        return Answer(text=text.strip())

    def _verify(self, question: Question, refs: ReferenceSet, answer: Answer) -> _Verdict:
        with _stage("verify_prompt"):
            prompt = self.prompts.build_verification_prompt(question, refs, answer)
        raw = self._generate(prompt, max_tokens=self.generation.verify_max_tokens, stage="verify")

        if not self.chain:
            revised = parse_revision_only(raw)
            return _Verdict(report=None, raw=raw, revised_query=revised, fired=bool(revised), accepted=not revised)

        try:
            report = parse_verification_output(raw)
        except UnparsableReport as e:
            self.logger.warning("Unparsable verification output (%s): %r", e, raw[:200])
            return _Verdict(report=None, raw=raw, revised_query="", fired=False, accepted=False, notes=(f"unparsable_report: {e}",))

        validation = validate_report(report)
        if not validation.ok:
            self.logger.warning("Invalid verification report: %s", "; ".join(validation.violations))
            return _Verdict(
                report=report,
                raw=raw,
                revised_query=report.revised_query,
                fired=False,
                accepted=False,
                notes=tuple(f"invalid_report: {v}" for v in validation.violations),
            )
        notes = ("scores_clamped",) if report.clamped else ()
        return _Verdict(
            report=report,
            raw=raw,
            revised_query=report.revised_query,
            fired=sigma(report, self.policy),
            accepted=report.judgment == "true",
            notes=notes,
        )

    def answer_single(self, question: Question) -> PipelineTrace:
        refs = self._retrieve(question.text)
        answer = self._answer(question, refs)
        record = IterationRecord(question_used=question.text, retrieval_query=question.text, references=refs, answer=answer)
        return PipelineTrace(question=question, iterations=(record,), final_answer=answer, terminated_by="sigma_false", mode="no_revise")

    def answer_multi(self, question: Question) -> PipelineTrace:
        cap = self.policy.max_iterations
        query = question.text
        records: list[IterationRecord] = []
        terminated = "iteration_cap"

        for i in range(1, cap + 1):
            refs = self._retrieve(query)
            if i > 1 and len(refs) == 0:
                # The previous answer stands.
                records.append(
                    IterationRecord(
                        question_used=question.text,
                        retrieval_query=query,
                        references=refs,
                        answer=None,
                        notes=("empty_re_retrieval",),
                    )
                )
                terminated = "sigma_false"
                break
            # Generation always sees the original question; the rewrite only drives retrieval.
            answer = self._answer(question, refs)

            if i > 1 and i == cap:
                records.append(IterationRecord(question_used=question.text, retrieval_query=query, references=refs, answer=answer))
                terminated = "iteration_cap"
                break

            verdict = self._verify(question, refs, answer)
            record = IterationRecord(
                question_used=question.text,
                retrieval_query=query,
                references=refs,
                answer=answer,
                report=verdict.report,
                revised_query=verdict.revised_query,
                sigma_fired=verdict.fired,
                raw_verification=verdict.raw,
                notes=verdict.notes,
            )

            if not verdict.fired:
                records.append(record)
                terminated = "judgment_ok" if verdict.accepted else "sigma_false"
                break
            if i == cap:
                records.append(record)
                terminated = "iteration_cap"
                break
            revised = verdict.revised_query.strip()
            if revised == query.strip():
                records.append(replace(record, notes=record.notes + ("revision_fixpoint",)))
                terminated = "sigma_false"
                break
            records.append(record)
            query = revised

        final = next(r.answer for r in reversed(records) if r.answer is not None)
        trace = PipelineTrace(question=question, iterations=tuple(records), final_answer=final, terminated_by=terminated, mode="end_revise")
        self.logger.info(
            "Answered %s: iterations=%s terminated_by=%s",
            question.id or question.text[:60],
            len(records),
            terminated,
        )
        return trace

    def answer_start_revise(self, question: Question) -> PipelineTrace:
        """Rewrite the question before the first retrieval; the QA prompt still uses the original question."""
        with _stage("rewrite"):
            prompt = self.prompts.build_rewrite_prompt(question)
        raw = self._generate(prompt, max_tokens=self.generation.verify_max_tokens, stage="rewrite")
        revised = parse_revision_only(raw)
        query = revised or question.text
        refs = self._retrieve(query)
        answer = self._answer(question, refs)
        record = IterationRecord(
            question_used=question.text,
            retrieval_query=query,
            references=refs,
            answer=answer,
            revised_query=revised,
            raw_verification=raw,
            notes=() if revised else ("empty_rewrite",),
        )
        return PipelineTrace(question=question, iterations=(record,), final_answer=answer, terminated_by="sigma_false", mode="start_revise")

    def run(self, question: Question, mode: str = "end_revise") -> PipelineTrace:
        if mode == "end_revise":
            return self.answer_multi(question)
        if mode == "start_revise":
            return self.answer_start_revise(question)
        if mode == "no_revise":
            return self.answer_single(question)
        raise ValueError(f"Unknown pipeline mode: {mode}")


def _pipeline(backend: GenerationBackend, retriever: Retriever, policy: SigmaPolicy, **kwargs: Any) -> CovRagPipeline:
    logger = kwargs.pop("logger", None) or logging.getLogger("covrag")
    return CovRagPipeline(backend, retriever, policy=policy, logger=logger, **kwargs)


def answer_single(question: Question, backend: GenerationBackend, retriever: Retriever, policy: SigmaPolicy, **kwargs: Any) -> PipelineTrace:
    return _pipeline(backend, retriever, policy, **kwargs).answer_single(question)


def answer_multi(question: Question, backend: GenerationBackend, retriever: Retriever, policy: SigmaPolicy, **kwargs: Any) -> PipelineTrace:
    return _pipeline(backend, retriever, policy, **kwargs).answer_multi(question)


@dataclass
class BatchOutcome:
    question: Question
    trace: Optional[PipelineTrace] = None
    error: Optional[dict[str, Any]] = None
    index: int = field(default=0, repr=False)


def run_batch(
    pipeline: CovRagPipeline,
    questions: Sequence[Question],
    *,
    mode: str = "end_revise",
    parallelism: int = 1,
    on_outcome: Optional[Callable[[BatchOutcome], None]] = None,
) -> list[BatchOutcome]:
    """Answer every question; failures become error rows. Results come back in input order."""
    outcomes: list[Optional[BatchOutcome]] = [None] * len(questions)

    def _one(i: int, q: Question) -> BatchOutcome:
        try:
            return BatchOutcome(question=q, trace=pipeline.run(q, mode), index=i)
        except CovRagError as e:
            pipeline.logger.error("Question %s failed at stage %s: %s", q.id or q.text[:60], e.stage, e)
            return BatchOutcome(question=q, error=e.to_json_dict(), index=i)
        except Exception as e:
            pipeline.logger.exception("Question %s failed: %s", q.id or q.text[:60], e)
            return BatchOutcome(question=q, error={"error": type(e).__name__, "message": str(e), "stage": None}, index=i)

    def _collect(outcome: BatchOutcome) -> None:
        outcomes[outcome.index] = outcome
        if on_outcome is not None:
            on_outcome(outcome)

    if parallelism <= 1:
        for i, q in enumerate(questions):
            _collect(_one(i, q))
    else:
        executor = ThreadPoolExecutor(max_workers=parallelism)
        try:
            futures: list[Future[BatchOutcome]] = [executor.submit(_one, i, q) for i, q in enumerate(questions)]
            for fut in futures:
                _collect(fut.result())
        except KeyboardInterrupt:
            executor.shutdown(wait=False, cancel_futures=True)
            raise
        executor.shutdown(wait=True)

    return [o for o in outcomes if o is not None]


def write_traces(path: Path, traces: Sequence[PipelineTrace]) -> int:
    return write_jsonl(path, (t.to_json_dict() for t in traces))


def read_traces(path: Path) -> list[PipelineTrace]:
    return [PipelineTrace.from_json_dict(row) for row in read_jsonl(path)]
