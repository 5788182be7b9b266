import tempfile
import unittest
from pathlib import Path

from errors import EmptyAnswer, EmptyReferences, MissingBinding
from models import Answer, Question, ReferenceSet
from rendering.prompt_templates import (
    BACKSLASH_SEPARATOR,
    QA_TAG,
    PromptBuilder,
    PromptTemplate,
    build_eval_prompt,
    build_qa_prompt,
    build_verification_prompt,
    load_templates,
)


FIXTURES = Path(__file__).resolve().parent / "fixtures"

CFB_ANSWER = (
    "The college football teams with the most national championships are the University of Alabama with 10, "
    "the University of Michigan with 8, and the University of Nebraska with 8...[5]"
)


def _refs(name: str) -> ReferenceSet:
    lines = (FIXTURES / name).read_text(encoding="utf-8").splitlines()
    return ReferenceSet.from_passages([ln for ln in lines if ln.strip()])


def _golden(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


class TestPromptGoldens(unittest.TestCase):
    def test_qa_prompt_matches_golden(self) -> None:
        prompt = build_qa_prompt(Question("who turns into a bear in the hobbit"), _refs("hobbit_references.txt"))
        self.assertEqual(prompt, _golden("qa_hobbit.golden.txt"))
        self.assertTrue(prompt.startswith(QA_TAG + "Reference [1]: A skin-changer"))
        self.assertTrue(prompt.endswith(BACKSLASH_SEPARATOR + "Answer:"))

    def test_verification_prompt_matches_golden(self) -> None:
        prompt = build_verification_prompt(
            Question("who has won the most college football national champions"),
            _refs("cfb_references.txt"),
            Answer(CFB_ANSWER),
        )
        self.assertEqual(prompt, _golden("verification_cfb.golden.txt"))

    def test_newline_separator(self) -> None:
        prompt = PromptBuilder(separator="newline").build_qa_prompt(Question("q"), ReferenceSet.from_passages(["a", "b"]))
        self.assertEqual(prompt, QA_TAG + "Reference [1]: a\nReference [2]: b\nQuestion: q\nAnswer:")


class TestPromptErrors(unittest.TestCase):
    def test_qa_prompt_needs_references(self) -> None:
        with self.assertRaises(EmptyReferences):
            build_qa_prompt(Question("q"), ReferenceSet())

    def test_verification_prompt_needs_answer(self) -> None:
        with self.assertRaises(EmptyAnswer):
            build_verification_prompt(Question("q"), ReferenceSet.from_passages(["a"]), Answer("  "))

    def test_missing_binding_is_named(self) -> None:
        with self.assertRaises(MissingBinding) as ctx:
            PromptTemplate("t", "{{question}} {{answer}}").render({"question": "q"})
        self.assertEqual(ctx.exception.name, "answer")

    def test_bound_values_are_not_rescanned(self) -> None:
        out = PromptTemplate("t", "Q: {{question}}").render({"question": "{{answer}}"})
        self.assertEqual(out, "Q: {{answer}}")


class TestEvalPrompts(unittest.TestCase):
    def test_others_prompt_lists_answers_and_golden_label(self) -> None:
        prompt = build_eval_prompt(
            "others",
            {
                "question": "who is the first indian woman to be canonized as a saint",
                "golden_label": ["Saint Alphonsa"],
                "answers": ["A1", "A2", "A3"],
            },
        )
        self.assertIn('"golden label": ["Saint Alphonsa"], "answer1": A1, "answer2": A2, "answer3": A3}', prompt)
        self.assertIn('"Correctness": [("answer3", 0.77), ("answer1", 0.53), ("answer2", 0.37)]', prompt)
        self.assertIn('"Conciseness": [', prompt)

    def test_citation_prompt_needs_reference(self) -> None:
        with self.assertRaises(MissingBinding):
            build_eval_prompt("citation", {"question": "q", "answers": ["a"]})

    def test_revise_prompt_lists_models(self) -> None:
        prompt = build_eval_prompt(
            "revise",
            {
                "original_question": "who has won the most college football national champions",
                "golden_label": ["Princeton"],
                "reference": "Reference [1]: x",
                "answers": ["A1", "A2"],
                "revised_questions": ["R1", "R2"],
            },
        )
        self.assertIn("provided by 2 models", prompt)
        self.assertIn('"Model2": {"Answer2": A2, "Revised Question2": R2}', prompt)
        self.assertIn('[{"model": "1", "score": 0.77}, {"model": "2", "score": 0.53}]', prompt)

    def test_revise_prompt_needs_one_revision_per_answer(self) -> None:
        with self.assertRaises(ValueError):
            build_eval_prompt(
                "revise",
                {"original_question": "q", "golden_label": "g", "reference": "r", "answers": ["a"], "revised_questions": []},
            )

    def test_unknown_eval_kind(self) -> None:
        with self.assertRaises(ValueError):
            build_eval_prompt("vibes", {})


class TestTemplateOverrides(unittest.TestCase):
    def test_override_directory_replaces_template(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            (Path(d) / "qa.txt").write_text("Q={{question}} R={{references}}\n", encoding="utf-8")
            builder = PromptBuilder(load_templates(Path(d)))
            prompt = builder.build_qa_prompt(Question("q"), ReferenceSet.from_passages(["p"]))
        self.assertEqual(prompt, "Q=q R=Reference [1]: p")

    def test_override_with_unknown_placeholder_rejected(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            (Path(d) / "qa.txt").write_text("{{question}} {{mood}}", encoding="utf-8")
            with self.assertRaises(ValueError):
                load_templates(Path(d))

    def test_override_with_unknown_name_rejected(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            (Path(d) / "poem.txt").write_text("{{question}}", encoding="utf-8")
            with self.assertRaises(ValueError):
                load_templates(Path(d))
