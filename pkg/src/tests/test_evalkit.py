import json
import math
import shutil
import tempfile
import unittest
from pathlib import Path

from src.errors import ConfigError, MetricUndefinedError, ParameterError
from src.evalkit import (
    ERROR,
    EvaluationReport,
    GenerationRecord,
    LabelEntry,
    LabelLexicon,
    OutputFormat,
    accuracy,
    bleu,
    extract_label,
    load_descriptions,
    load_lexicon,
    meteor_simplified,
    render_output_format,
    rouge,
    text_scores,
)


def record(label: str, extracted: str, dataset: str = "tiny", **kwargs) -> GenerationRecord:
    return GenerationRecord(f"s-{label}-{extracted}", "recognition", extracted, extracted, label, dataset, **kwargs)


class TestLexicon(unittest.TestCase):
    def setUp(self):
        self.lexicon = load_lexicon()

    def test_bundled_labels(self):
        self.assertEqual(
            sorted(self.lexicon.labels),
            sorted(["Neutral", "Joy", "Happiness", "Anger", "Panic", "Fear", "Anxiety", "Sadness", "Shame", "Disgust", "Surprise"]),
        )

    def test_forms_resolve(self):
        self.assertEqual(self.lexicon.canonical("Angrily"), "Anger")
        self.assertEqual(self.lexicon.canonical("scared"), "Fear")
        self.assertIsNone(self.lexicon.form_label("scared"))
        self.assertIsNone(self.lexicon.canonical("table"))

    def test_shared_word_rejected(self):
        with self.assertRaises(ConfigError):
            LabelLexicon([LabelEntry("Joy", ("up",), (), "joyful"), LabelEntry("Panic", ("up",), (), "panicked")])

    def test_unknown_label(self):
        with self.assertRaises(ParameterError):
            self.lexicon.require("Boredom")

    def test_every_label_has_descriptions(self):
        descriptions = load_descriptions()
        for label in self.lexicon.labels:
            self.assertTrue(descriptions.get(label), label)


class TestExtractLabel(unittest.TestCase):
    def setUp(self):
        self.lexicon = load_lexicon()

    def test_single_label(self):
        self.assertEqual(extract_label("This is a happy person.", self.lexicon), "Happiness")

    def test_two_labels_is_error(self):
        self.assertEqual(extract_label("This person is expressing anxiety or fear.", self.lexicon), ERROR)

    def test_no_label_is_error(self):
        text = "The person shows anguish or distress, as denoted by the frown."
        self.assertEqual(extract_label(text, self.lexicon), ERROR)

    def test_forms_of_one_label_count_once(self):
        self.assertEqual(extract_label("A sad walk, moving sadly and slowly.", self.lexicon), "Sadness")

    def test_synonym_accepted(self):
        self.assertEqual(extract_label("The person looks FURIOUS.", self.lexicon), "Anger")

    def test_word_boundaries(self):
        self.assertEqual(extract_label("A madrigal plays; the person is joyful.", self.lexicon), "Joy")

    def test_second_label_flips_to_error(self):
        text = "This is a happy person."
        self.assertEqual(extract_label(text + " They also look sad.", self.lexicon), ERROR)

    def test_render_then_extract(self):
        for label in self.lexicon.labels:
            for fmt in OutputFormat:
                self.assertEqual(extract_label(render_output_format(fmt, label, self.lexicon), self.lexicon), label, (label, fmt))


class TestAccuracy(unittest.TestCase):
    def test_fraction(self):
        records = [record("Joy", "Joy")] * 7 + [record("Joy", "Anger")] * 2 + [record("Joy", ERROR)]
        self.assertAlmostEqual(accuracy(records), 0.7)
        self.assertAlmostEqual(accuracy(list(reversed(records))), 0.7)

    def test_extremes(self):
        self.assertEqual(accuracy([record("Fear", "Fear")] * 3), 1.0)
        self.assertEqual(accuracy([record("Fear", ERROR)] * 3), 0.0)

    def test_empty(self):
        with self.assertRaises(ParameterError):
            accuracy([])


class TestTextMetrics(unittest.TestCase):
    def setUp(self):
        self.lexicon = load_lexicon()

    def test_rouge_overlap(self):
        scores = rouge("the cat sat", "the cat slept")
        self.assertAlmostEqual(scores["rouge1_f"], 2 / 3)
        self.assertAlmostEqual(scores["rougeL_f"], 2 / 3)

    def test_rouge_extremes(self):
        self.assertEqual(rouge("the cat sat", "the cat sat"), {"rouge1_f": 1.0, "rougeL_f": 1.0})
        self.assertEqual(rouge("dogs bark", "the cat sat")["rouge1_f"], 0.0)
        with self.assertRaises(MetricUndefinedError):
            rouge("the cat", "")

    def test_bleu_identical(self):
        self.assertAlmostEqual(bleu("the person walks with heavy steps", "the person walks with heavy steps"), 1.0)
        # orders 3 and 4 have no n-grams and contribute 1 / (0 + 1)
        self.assertAlmostEqual(bleu("the cat", "the cat"), 1.0)

    def test_bleu_short_pair(self):
        # orders 1..4: 2/3, 1/2, smoothed 1/2, empty order 1
        value = bleu("the cat sat", "the cat slept")
        self.assertAlmostEqual(value, (1 / 6) ** (1 / 4), places=12)
        self.assertAlmostEqual(value, 0.638943, places=6)

    def test_bleu_order_is_fixed(self):
        self.assertAlmostEqual(bleu("the cat sat", "the cat slept", max_n=2), (1 / 3) ** (1 / 2), places=12)
        with self.assertRaises(ParameterError):
            bleu("the cat", "the cat", max_n=0)

    def test_bleu_single_shared_unigram(self):
        # 1/5, then smoothed 1/5, 1/4, 1/3
        value = bleu("a b c d e", "a v w x y")
        self.assertAlmostEqual(value, (1 / 300) ** 0.25, places=12)
        self.assertAlmostEqual(value, 0.240281, places=6)

    def test_bleu_brevity_penalty(self):
        value = bleu("the cat", "the cat sat on the mat")
        self.assertLess(value, 1.0)
        self.assertAlmostEqual(value, math.exp(1 - 6 / 2), places=12)

    def test_bleu_empty(self):
        self.assertEqual(bleu("", "the cat"), 0.0)
        with self.assertRaises(MetricUndefinedError):
            bleu("the cat", "")

    def test_meteor_identical(self):
        self.assertAlmostEqual(meteor_simplified("the cat sat on the mat", "the cat sat on the mat", self.lexicon), 1 - 0.5 / 216)

    def test_meteor_synonym_match(self):
        self.assertAlmostEqual(meteor_simplified("glad", "happy", self.lexicon), 0.5)
        self.assertEqual(meteor_simplified("dogs bark", "the cat sat", self.lexicon), 0.0)

    def test_scores_bounded(self):
        scores = text_scores("the person moves angrily", "an angry person stomps around", self.lexicon)
        for name, value in scores.items():
            self.assertGreaterEqual(value, 0.0, name)
            self.assertLessEqual(value, 1.0, name)


class TestOutputFormats(unittest.TestCase):
    def test_templates(self):
        self.assertEqual(render_output_format("B", "happy"), "This is a happy person.")
        self.assertEqual(render_output_format("A", "Sadness"), "Sadness")
        self.assertEqual(render_output_format("B", "angry"), "This is an angry person.")
        self.assertEqual(
            render_output_format("C", "joy"),
            "This is a 3D skeleton sequence of a person. From their movements, it can be observed that their emotion is joy.",
        )

    def test_lexicon_adjective(self):
        self.assertEqual(render_output_format(OutputFormat.B, "Anger", load_lexicon()), "This is an angry person.")

    def test_unknown_format(self):
        with self.assertRaises(ParameterError):
            render_output_format("D", "Joy")


class TestEvaluationReport(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_summary_and_files(self):
        records = [
            record("Joy", "Joy", "a"),
            record("Anger", ERROR, "a"),
            record("Joy", "Joy", "b"),
            GenerationRecord("d1", "description", "slow steps", ERROR, "Sadness", "a", "slow heavy steps", {"rouge1_f": 0.8}),
        ]
        report = EvaluationReport(records, name="unit")
        summary = report.summary()
        self.assertAlmostEqual(summary["accuracy"], 2 / 3)
        self.assertAlmostEqual(summary["error_rate"], 1 / 3)
        self.assertEqual(summary["per_dataset_accuracy"], {"a": 0.5, "b": 1.0})
        self.assertAlmostEqual(summary["rouge1_f"], 0.8)

        out = report.write(self.tmp / "reports")
        self.assertTrue((out / "records.csv").exists())
        self.assertEqual(json.loads((out / "summary.json").read_text())["records"], 4)
        self.assertIn("| accuracy | 0.6667 |", (out / "summary.md").read_text())

    def test_empty_report(self):
        with self.assertRaises(ParameterError):
            EvaluationReport([]).summary()


if __name__ == "__main__":
    unittest.main()
