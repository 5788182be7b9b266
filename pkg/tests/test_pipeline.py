import logging
import tempfile
import unittest
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from backends.base import GenerationBackend, GenerationRequest
from backends.scripted import ScriptEntry, ScriptedBackend
from errors import CovRagError
from evaluation.metrics import accuracy
from models import Question, ReferenceSet, SigmaPolicy, VerificationReport
from pipeline import CovRagPipeline, answer_multi, answer_single, read_traces, run_batch, write_traces
from rendering.prompt_templates import QA_TAG, REWRITE_TAG, VERIFICATION_TAG
from retrievers.base import Retriever
from verification import render_report


LOGGER = logging.getLogger("covrag.tests")

QUESTION = "who has won the most college football national champions"
REVISED = "Which college football teams have the most national championships?"

DECOY = "College football teams with the most national championships are debated every season."
GOLD = "Princeton has 28 claimed national championships, the most of any college football program."

ANSWER1 = "The University of Alabama has won the most national championships, with 10[1]."
ANSWER2 = "Princeton has won the most college football national championships, with 28[1]."

FALSE_REPORT = VerificationReport(
    reference_correctness=0.21,
    correctness=0.21,
    citation_accuracy=0.81,
    truthfulness=0.91,
    bias=0.82,
    conciseness=0.89,
    judgment="false",
    revised_query=REVISED,
)
TRUE_REPORT = VerificationReport(
    reference_correctness=0.95,
    correctness=1.0,
    citation_accuracy=1.0,
    truthfulness=1.0,
    bias=0.1,
    conciseness=0.9,
    judgment="true",
)


class RoutingRetriever(Retriever):
    """Returns a fixed reference set per query and remembers every query it saw."""

    def __init__(self, routes: dict[str, ReferenceSet]):
        super().__init__(logger=LOGGER)
        self.routes = routes
        self.queries: list[str] = []

    def retrieve(self, query: str) -> ReferenceSet:
        self.queries.append(query)
        return self.routes.get(query, ReferenceSet())


class CountingBackend(GenerationBackend):
    def __init__(self, inner: GenerationBackend):
        super().__init__(logger=LOGGER)
        self.inner = inner
        self.calls: Counter[str] = Counter()
        self.prompts: list[str] = []

    def generate(self, request: GenerationRequest) -> str:
        self.prompts.append(request.prompt)
        for tag, name in ((QA_TAG, "qa"), (VERIFICATION_TAG, "verify"), (REWRITE_TAG, "rewrite")):
            if request.prompt.startswith(tag):
                self.calls[name] += 1
        return self.inner.generate(request)


def _rule(value: str, response: str) -> ScriptEntry:
    return ScriptEntry("question_substring", value, response)


def _backend(first_report: str, second_report: Optional[str] = None, extra: Sequence[ScriptEntry] = ()) -> CountingBackend:
    entries = list(extra)
    entries.append(_rule(f'"answer": {ANSWER1}', first_report))
    entries.append(_rule(f'"answer": {ANSWER2}', second_report or render_report(TRUE_REPORT)))
    entries.append(_rule(f"Reference [1]: {DECOY}", ANSWER1))
    entries.append(_rule(f"Reference [1]: {GOLD}", ANSWER2))
    return CountingBackend(ScriptedBackend(entries))


def _retriever(overrides: Optional[dict[str, ReferenceSet]] = None) -> RoutingRetriever:
    table = {QUESTION: ReferenceSet.from_passages([DECOY]), REVISED: ReferenceSet.from_passages([GOLD])}
    table.update(overrides or {})
    return RoutingRetriever(table)


def _pipeline(backend: GenerationBackend, retriever: Retriever, *, cap: int = 2, chain: bool = True, **policy: object) -> CovRagPipeline:
    return CovRagPipeline(
        backend, retriever, policy=SigmaPolicy(max_iterations=cap, **policy), chain=chain, logger=LOGGER
    )


class TestEndRevise(unittest.TestCase):
    def test_revision_recovers_the_gold_answer(self) -> None:
        backend = _backend(render_report(FALSE_REPORT))
        retriever = _retriever()
        trace = _pipeline(backend, retriever).run(Question(QUESTION, id="cfb"))

        self.assertEqual(retriever.queries, [QUESTION, REVISED])
        self.assertEqual(backend.calls["qa"], 2)
        # The cap leaves no room to verify the revised answer.
        self.assertEqual(backend.calls["verify"], 1)
        self.assertEqual(trace.terminated_by, "iteration_cap")
        self.assertEqual(trace.first_answer.text, ANSWER1)
        self.assertEqual(trace.final_answer.text, ANSWER2)
        self.assertTrue(trace.iterations[0].sigma_fired)
        self.assertEqual(trace.iterations[0].report, FALSE_REPORT)
        self.assertEqual(trace.iterations[1].retrieval_query, REVISED)
        self.assertEqual([it.question_used for it in trace.iterations], [QUESTION, QUESTION])
        self.assertFalse(accuracy(trace.first_answer, ["Princeton"]))
        self.assertTrue(accuracy(trace.final_answer, ["Princeton"]))

    def test_qa_prompts_never_carry_the_revised_question(self) -> None:
        backend = _backend(render_report(FALSE_REPORT))
        _pipeline(backend, _retriever()).run(Question(QUESTION))
        qa_prompts = [p for p in backend.prompts if p.startswith(QA_TAG)]
        self.assertEqual(len(qa_prompts), 2)
        for prompt in qa_prompts:
            self.assertIn(f"Question: {QUESTION}", prompt)
            self.assertNotIn(REVISED, prompt)

    def test_larger_cap_verifies_the_revised_answer(self) -> None:
        backend = _backend(render_report(FALSE_REPORT))
        trace = _pipeline(backend, _retriever(), cap=3).run(Question(QUESTION))
        self.assertEqual(backend.calls["verify"], 2)
        self.assertEqual(trace.terminated_by, "judgment_ok")
        self.assertEqual(len(trace.iterations), 2)
        self.assertEqual(trace.final_answer.text, ANSWER2)

    def test_accepted_first_answer_stops_immediately(self) -> None:
        backend = _backend(render_report(TRUE_REPORT))
        retriever = _retriever()
        trace = _pipeline(backend, retriever).run(Question(QUESTION))
        self.assertEqual(retriever.queries, [QUESTION])
        self.assertEqual(trace.terminated_by, "judgment_ok")
        self.assertEqual(trace.final_answer.text, ANSWER1)

    def test_cap_of_one_never_re_retrieves(self) -> None:
        backend = _backend(render_report(FALSE_REPORT))
        retriever = _retriever()
        trace = _pipeline(backend, retriever, cap=1).run(Question(QUESTION))
        self.assertEqual(retriever.queries, [QUESTION])
        self.assertEqual(backend.calls["qa"], 1)
        self.assertEqual(trace.terminated_by, "iteration_cap")

    def test_false_judgment_without_tripped_threshold_stops(self) -> None:
        mild = VerificationReport(**{**TRUE_REPORT.to_json_dict(), "judgment": "false", "revised_query": REVISED})
        trace = _pipeline(_backend(render_report(mild)), _retriever()).run(Question(QUESTION))
        self.assertEqual(trace.terminated_by, "sigma_false")
        self.assertEqual(len(trace.iterations), 1)

    def test_revise_only_policy_fires_on_any_revision(self) -> None:
        mild = VerificationReport(**{**TRUE_REPORT.to_json_dict(), "judgment": "false", "revised_query": REVISED})
        trace = _pipeline(_backend(render_report(mild)), _retriever(), mode="revise_only").run(Question(QUESTION))
        self.assertEqual(trace.final_answer.text, ANSWER2)

    def test_unparsable_report_keeps_the_first_answer(self) -> None:
        with self.assertLogs(LOGGER, level="WARNING"):
            trace = _pipeline(_backend("The answer seems wrong."), _retriever()).run(Question(QUESTION))
        self.assertEqual(trace.terminated_by, "sigma_false")
        self.assertEqual(trace.final_answer.text, ANSWER1)
        self.assertTrue(trace.iterations[0].notes[0].startswith("unparsable_report"))
        self.assertEqual(trace.iterations[0].raw_verification, "The answer seems wrong.")

    def test_inconsistent_report_is_not_acted_on(self) -> None:
        bad = VerificationReport(**{**FALSE_REPORT.to_json_dict(), "judgment": "true"})
        with self.assertLogs(LOGGER, level="WARNING"):
            trace = _pipeline(_backend(render_report(bad)), _retriever()).run(Question(QUESTION))
        self.assertEqual(len(trace.iterations), 1)
        self.assertFalse(trace.iterations[0].sigma_fired)
        self.assertIn("invalid_report: judgment=true requires an empty revised_query", trace.iterations[0].notes)

    def test_revision_equal_to_the_query_stops(self) -> None:
        looping = VerificationReport(**{**FALSE_REPORT.to_json_dict(), "revised_query": QUESTION})
        retriever = _retriever()
        trace = _pipeline(_backend(render_report(looping)), retriever, cap=3).run(Question(QUESTION))
        self.assertEqual(retriever.queries, [QUESTION])
        self.assertEqual(trace.terminated_by, "sigma_false")
        self.assertIn("revision_fixpoint", trace.iterations[-1].notes)

    def test_empty_re_retrieval_keeps_the_previous_answer(self) -> None:
        trace = _pipeline(_backend(render_report(FALSE_REPORT)), _retriever({REVISED: ReferenceSet()})).run(
            Question(QUESTION)
        )
        self.assertEqual(len(trace.iterations), 2)
        self.assertIsNone(trace.iterations[1].answer)
        self.assertEqual(trace.iterations[1].notes, ("empty_re_retrieval",))
        self.assertEqual(trace.final_answer.text, ANSWER1)
        self.assertEqual(trace.terminated_by, "sigma_false")

    def test_chain_free_verification_reads_a_bare_revision(self) -> None:
        backend = _backend(REVISED)
        trace = _pipeline(backend, _retriever(), chain=False).run(Question(QUESTION))
        self.assertIsNone(trace.iterations[0].report)
        self.assertTrue(trace.iterations[0].sigma_fired)
        self.assertEqual(trace.final_answer.text, ANSWER2)

    def test_chain_free_empty_revision_accepts(self) -> None:
        trace = _pipeline(_backend(""), _retriever(), chain=False).run(Question(QUESTION))
        self.assertEqual(trace.terminated_by, "judgment_ok")

    def test_module_level_helpers(self) -> None:
        trace = answer_multi(Question(QUESTION), _backend(render_report(FALSE_REPORT)), _retriever(), SigmaPolicy())
        self.assertEqual(trace.final_answer.text, ANSWER2)
        single = answer_single(Question(QUESTION), _backend(render_report(FALSE_REPORT)), _retriever(), SigmaPolicy())
        self.assertEqual(single.final_answer.text, ANSWER1)


class TestOtherModes(unittest.TestCase):
    def test_no_revise_answers_once(self) -> None:
        backend = _backend(render_report(FALSE_REPORT))
        trace = _pipeline(backend, _retriever()).run(Question(QUESTION), "no_revise")
        self.assertEqual(backend.calls, Counter({"qa": 1}))
        self.assertEqual(trace.mode, "no_revise")
        self.assertEqual(trace.final_answer.text, ANSWER1)

    def test_start_revise_retrieves_with_the_rewrite(self) -> None:
        backend = _backend(render_report(FALSE_REPORT), extra=[_rule(REWRITE_TAG, f'"{REVISED}"')])
        retriever = _retriever()
        trace = _pipeline(backend, retriever).run(Question(QUESTION), "start_revise")
        self.assertEqual(retriever.queries, [REVISED])
        self.assertEqual(backend.calls["rewrite"], 1)
        self.assertEqual(backend.calls["verify"], 0)
        self.assertEqual(trace.mode, "start_revise")
        self.assertEqual(trace.iterations[0].question_used, QUESTION)
        self.assertEqual(trace.final_answer.text, ANSWER2)

    def test_start_revise_with_empty_rewrite_uses_the_question(self) -> None:
        backend = _backend(render_report(FALSE_REPORT), extra=[_rule(REWRITE_TAG, "  ")])
        trace = _pipeline(backend, _retriever()).run(Question(QUESTION), "start_revise")
        self.assertEqual(trace.iterations[0].retrieval_query, QUESTION)
        self.assertEqual(trace.iterations[0].notes, ("empty_rewrite",))

    def test_unknown_mode(self) -> None:
        with self.assertRaises(ValueError):
            _pipeline(_backend(""), _retriever()).run(Question(QUESTION), "sideways")


class _BrokenRetriever(Retriever):
    def __init__(self) -> None:
        super().__init__(logger=LOGGER)

    def retrieve(self, query: str) -> ReferenceSet:
        raise RuntimeError("index offline")


class TestErrors(unittest.TestCase):
    def test_foreign_errors_are_tagged_with_their_stage(self) -> None:
        with self.assertRaises(CovRagError) as ctx:
            _pipeline(_backend(""), _BrokenRetriever()).run(Question(QUESTION))
        self.assertEqual(ctx.exception.stage, "retrieve")
        self.assertIn("index offline", str(ctx.exception))

    def test_script_miss_is_tagged_generate(self) -> None:
        with self.assertRaises(CovRagError) as ctx:
            _pipeline(CountingBackend(ScriptedBackend([])), _retriever()).run(Question(QUESTION))
        self.assertEqual(ctx.exception.stage, "generate")

    def test_empty_first_retrieval_fails_at_prompt_building(self) -> None:
        with self.assertRaises(CovRagError) as ctx:
            _pipeline(_backend(""), RoutingRetriever({})).run(Question(QUESTION))
        self.assertEqual(ctx.exception.stage, "qa_prompt")


class TestBatch(unittest.TestCase):
    def test_results_keep_input_order_and_errors_become_rows(self) -> None:
        backend = _backend(render_report(FALSE_REPORT))
        questions = [Question(QUESTION, id=str(i)) if i % 3 else Question("unknown question", id=str(i)) for i in range(7)]
        seen: list[str] = []
        with self.assertLogs(LOGGER, level="ERROR"):
            outcomes = run_batch(
                _pipeline(backend, _retriever()),
                questions,
                parallelism=3,
                on_outcome=lambda o: seen.append(o.question.id or ""),
            )
        self.assertEqual([o.question.id for o in outcomes], [str(i) for i in range(7)])
        self.assertEqual(sorted(seen), sorted(str(i) for i in range(7)))
        for i, outcome in enumerate(outcomes):
            if i % 3:
                self.assertEqual(outcome.trace.final_answer.text, ANSWER2)
                self.assertIsNone(outcome.error)
            else:
                self.assertIsNone(outcome.trace)
                self.assertEqual(outcome.error["stage"], "qa_prompt")
                self.assertEqual(outcome.error["error"], "EmptyReferences")

    def test_sequential_and_parallel_agree(self) -> None:
        questions = [Question(QUESTION, id=str(i)) for i in range(4)]
        seq = run_batch(_pipeline(_backend(render_report(FALSE_REPORT)), _retriever()), questions, parallelism=1)
        par = run_batch(_pipeline(_backend(render_report(FALSE_REPORT)), _retriever()), questions, parallelism=4)
        self.assertEqual([o.trace for o in seq], [o.trace for o in par])

    def test_traces_survive_a_file_round_trip(self) -> None:
        trace = _pipeline(_backend(render_report(FALSE_REPORT)), _retriever()).run(Question(QUESTION, id="cfb"))
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "traces.jsonl"
            write_traces(path, [trace])
            self.assertEqual(read_traces(path), [trace])
