import tempfile
import unittest
from pathlib import Path

import pandas as pd

from errors import NoGolds, NoSamples
from evaluation.metrics import (
    PER_SAMPLE_COLUMNS,
    accuracy,
    batch_accuracy,
    high_quality_rate,
    normalize_text,
    rank_aggregate,
    reference_correctness_pairs,
    reference_delta,
    references_correct,
)
from models import Answer, IterationRecord, PipelineTrace, Question, RagSample, Reference, ReferenceSet, VerificationReport
from retrievers.offline import Corpus, CorpusPassage
from synthesis.dataset import Dataset


CFB_ANSWER1 = (
    "The college football teams with the most national championships are the University of Alabama with 10, "
    "the University of Michigan with 8, and the University of Nebraska with 8...[5]"
)
CFB_ANSWER2 = (
    "The Princeton Tigers have the most college football championships in the history of the sport, "
    "with 28 national titles[1][2]."
)
SAINT_ANSWER = "The first Indian woman to be canonized as a saint was Saint Alphonsa[1]."


def _shout(text: str) -> str:
    return text.upper().replace(" ", " ! ").replace(",", ";")


def _report(**overrides: float) -> VerificationReport:
    values = dict(
        reference_correctness=1.0,
        correctness=1.0,
        citation_accuracy=1.0,
        truthfulness=1.0,
        bias=0.1,
        conciseness=0.9,
    )
    values.update(overrides)
    return VerificationReport(**values, judgment="true")


class TestNormalization(unittest.TestCase):
    def test_normalize_text_examples(self) -> None:
        self.assertEqual(normalize_text("Saint Alphonsa!"), "saint alphonsa")
        self.assertEqual(normalize_text("‘Coulomb counting’,"), "coulomb counting")
        self.assertEqual(normalize_text(""), "")
        self.assertEqual(normalize_text("  The   Hobbit:\n an  unexpected-journey "), "the hobbit an unexpectedjourney")

    def test_articles_are_kept(self) -> None:
        self.assertEqual(normalize_text("The Princeton Tigers"), "the princeton tigers")


class TestAccuracy(unittest.TestCase):
    def test_cfb_answers(self) -> None:
        self.assertTrue(accuracy(Answer(CFB_ANSWER2), ["Princeton"]))
        self.assertFalse(accuracy(Answer(CFB_ANSWER1), ["Princeton"]))

    def test_any_gold_label_counts(self) -> None:
        self.assertTrue(accuracy(Answer(SAINT_ANSWER), ["Sister Alphonsa", "Saint Alphonsa"]))

    def test_verbatim_gold(self) -> None:
        self.assertTrue(accuracy(Answer("Beorn"), ["Beorn"]))

    def test_casing_and_punctuation_do_not_matter(self) -> None:
        for text, golds in ((CFB_ANSWER1, ["Princeton"]), (CFB_ANSWER2, ["Princeton"]), (SAINT_ANSWER, ["Saint Alphonsa"])):
            self.assertEqual(accuracy(Answer(text), golds), accuracy(Answer(_shout(text)), golds))

    def test_no_golds(self) -> None:
        with self.assertRaises(NoGolds):
            accuracy(Answer("x"), [])
        with self.assertRaises(NoGolds):
            accuracy(Answer("x"), ["  ", "!"])


def _trace(qid: str, answers: list, refs: tuple = ((),)) -> PipelineTrace:
    iterations = []
    for i, text in enumerate(answers):
        source_ids = refs[min(i, len(refs) - 1)]
        items = tuple(Reference(index=j, passage=f"p{j}", source_id=sid) for j, sid in enumerate(source_ids, start=1))
        iterations.append(
            IterationRecord(
                question_used="q",
                retrieval_query="q",
                references=ReferenceSet(items=items),
                answer=Answer(text),
            )
        )
    return PipelineTrace(
        question=Question("q", id=qid),
        iterations=tuple(iterations),
        final_answer=Answer(answers[-1]),
        terminated_by="iteration_cap" if len(answers) > 1 else "judgment_ok",
    )


def _dataset(golds: dict) -> Dataset:
    return Dataset(
        tuple(
            RagSample(question=Question("q", id=qid), references=ReferenceSet(), answer=Answer(""), gold_labels=tuple(g))
            for qid, g in golds.items()
        )
    )


class TestBatchAccuracy(unittest.TestCase):
    def test_mean_over_joined_ids_and_csv(self) -> None:
        traces = [
            _trace("cfb", [CFB_ANSWER1, CFB_ANSWER2]),
            _trace("saint", [SAINT_ANSWER]),
            _trace("hobbit", ["Gandalf[1]."]),
            _trace("unlabeled", ["whatever"]),
        ]
        dataset = _dataset({"cfb": ["Princeton"], "saint": ["Saint Alphonsa"], "hobbit": ["Beorn"], "unlabeled": []})
        with tempfile.TemporaryDirectory() as d:
            csv_path = Path(d) / "accuracy.csv"
            self.assertAlmostEqual(batch_accuracy(traces, dataset, csv_path=csv_path), 2 / 3)
            df = pd.read_csv(csv_path)
        self.assertEqual(list(df.columns), PER_SAMPLE_COLUMNS)
        self.assertEqual(list(df["id"]), ["cfb", "saint", "hobbit"])
        self.assertEqual(list(df["correct_first"]), [False, True, False])
        self.assertEqual(list(df["correct_final"]), [True, True, False])
        self.assertEqual(list(df["iterations"]), [2, 1, 1])

    def test_no_joined_samples_still_writes_header(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            csv_path = Path(d) / "accuracy.csv"
            with self.assertRaises(NoSamples):
                batch_accuracy([_trace("x", ["a"])], _dataset({"y": ["b"]}), csv_path=csv_path)
            df = pd.read_csv(csv_path)
        self.assertEqual(list(df.columns), PER_SAMPLE_COLUMNS)
        self.assertTrue(df.empty)


class TestRankAggregate(unittest.TestCase):
    def test_examples(self) -> None:
        self.assertEqual(rank_aggregate([1, 1, 1]), 1.0)
        self.assertEqual(rank_aggregate([1, 2, 3, 2]), 2.0)
        self.assertEqual(rank_aggregate([3.5] * 7), 3.5)
        with self.assertRaises(NoSamples):
            rank_aggregate([])


class TestHighQualityRate(unittest.TestCase):
    def test_all_bars_met(self) -> None:
        self.assertEqual(set(high_quality_rate([_report()]).values()), {1.0})

    def test_bias_bar_is_strict(self) -> None:
        self.assertEqual(high_quality_rate([_report(bias=0.3)])["bias"], 0.0)
        self.assertEqual(high_quality_rate([_report(conciseness=0.5)])["conciseness"], 0.0)

    def test_hand_counted_batch(self) -> None:
        reports = [
            _report(),
            _report(citation_accuracy=0.8, bias=0.5),
            _report(correctness=0.9, conciseness=0.4),
            _report(truthfulness=0.99, citation_accuracy=0.0),
        ]
        self.assertEqual(
            high_quality_rate(reports),
            {"citation_accuracy": 0.5, "correctness": 0.75, "truthfulness": 0.75, "bias": 0.75, "conciseness": 0.75},
        )

    def test_each_report_failing_one_distinct_bar(self) -> None:
        failing = [
            _report(citation_accuracy=0.5),
            _report(correctness=0.5),
            _report(truthfulness=0.5),
            _report(bias=0.9),
            _report(conciseness=0.1),
        ]
        self.assertEqual(set(high_quality_rate(failing).values()), {4 / 5})

    def test_empty(self) -> None:
        with self.assertRaises(NoSamples):
            high_quality_rate([])


class TestReferenceDelta(unittest.TestCase):
    def test_planted_counts(self) -> None:
        before = [True] * 12 + [False] * 8
        after = [True] * 17 + [False] * 3
        self.assertAlmostEqual(reference_delta(before, after), 25.0)

    def test_no_change(self) -> None:
        self.assertEqual(reference_delta([True, True], [True, True]), 0.0)

    def test_length_mismatch_and_empty(self) -> None:
        with self.assertRaises(ValueError):
            reference_delta([True], [True, False])
        with self.assertRaises(NoSamples):
            reference_delta([], [])

    def test_pairs_use_gold_passage_membership(self) -> None:
        corpus = Corpus([CorpusPassage("gold", "g", gold_for=("cfb",)), CorpusPassage("decoy", "d")])
        traces = [
            _trace("cfb", [CFB_ANSWER1, CFB_ANSWER2], refs=(("decoy",), ("decoy", "gold"))),
            _trace("other", ["x"], refs=(("gold",),)),
        ]
        before, after = reference_correctness_pairs(traces, corpus)
        self.assertEqual(before, [False, False])
        self.assertEqual(after, [True, False])
        self.assertEqual(reference_delta(before, after), 50.0)
        self.assertFalse(references_correct(traces[0].iterations[1].references, corpus, None))
