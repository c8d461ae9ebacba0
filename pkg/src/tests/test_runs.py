import hashlib
import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from src.config import config_from_dict
from src.errors import CheckpointError, RunFinalizedError
from src.runs import RunDirectory, content_hash


class TestContentHash(unittest.TestCase):
    def test_blob_hash(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "input.txt"
            path.write_bytes(b"hello\n")
            self.assertEqual(content_hash(path), hashlib.sha256(b"blob 6\0hello\n").hexdigest())


class TestRunDirectory(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.config = config_from_dict({"experiment": {"seed": 5, "name": "probe"}})

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_layout(self):
        run = RunDirectory.create(self.tmp, self.config, "pretrain")
        self.assertTrue(run.path.name.startswith("probe-pretrain-s5-"))
        self.assertTrue((run.path / "checkpoints").is_dir())
        self.assertTrue((run.path / "reports").is_dir())
        self.assertEqual(run.config(), self.config)
        self.assertEqual(json.loads((run.path / "run.json").read_text())["verb"], "pretrain")

    def test_name_collision_gets_suffix(self):
        with mock.patch("src.runs.time.strftime", return_value="20260101-000000"):
            first = RunDirectory.create(self.tmp, self.config, "eval")
            second = RunDirectory.create(self.tmp, self.config, "eval")
        self.assertEqual(first.path.name, "probe-eval-s5-20260101-000000")
        self.assertEqual(second.path.name, "probe-eval-s5-20260101-000000-2")

    def test_reopen(self):
        upstream = self.tmp / "upstream"
        run = RunDirectory.create(self.tmp, self.config, "finetune", upstream=upstream)
        run.time_stage("lm:joint", 1.5)
        run.time_stage("lm:joint", 0.5)
        reopened = RunDirectory.open(run.path)
        self.assertEqual(reopened.record.upstream, str(upstream))
        self.assertEqual(reopened.record.timings, {"lm:joint": 2.0})
        self.assertEqual(json.loads((run.path / "timings.json").read_text()), {"lm:joint": 2.0})

    def test_open_missing(self):
        with self.assertRaises(CheckpointError):
            RunDirectory.open(self.tmp / "nowhere")

    def test_hash_inputs(self):
        a, b = self.tmp / "a.txt", self.tmp / "b.txt"
        a.write_text("one")
        b.write_text("two")
        run = RunDirectory.create(self.tmp / "runs", self.config, "pretrain")
        target = run.hash_inputs([b, a, a])
        lines = target.read_text().splitlines()
        self.assertEqual(lines, [f"{content_hash(a)}  {a}", f"{content_hash(b)}  {b}"])
        self.assertEqual(RunDirectory.open(run.path).record.inputs[str(a)], content_hash(a))

    def test_json_and_checkpoints(self):
        run = RunDirectory.create(self.tmp, self.config, "pretrain")
        run.write_json("split.json", {"train": {"tiny": ["x"]}})
        self.assertEqual(run.read_json("split.json"), {"train": {"tiny": ["x"]}})
        with self.assertRaises(CheckpointError):
            run.read_json("absent.json")
        self.assertEqual(run.checkpoint("alignment-joint.pt"), run.path / "checkpoints" / "alignment-joint.pt")
        with self.assertRaises(CheckpointError):
            run.existing_checkpoint("alignment-joint.pt")
        run.checkpoint("alignment-joint.pt").write_bytes(b"x")
        self.assertTrue(run.existing_checkpoint("alignment-joint.pt").exists())
        self.assertTrue(run.report_dir("joint").is_dir())

    def test_finalized_is_read_only(self):
        run = RunDirectory.create(self.tmp, self.config, "eval")
        run.write_json("evaluation.json", {"groups": {}})
        run.finalize()
        self.assertTrue(run.finalized)
        writers = [
            lambda: run.write_json("evaluation.json", {}),
            lambda: run.checkpoint("x.pt"),
            lambda: run.metrics(),
            lambda: run.report_dir("joint"),
            lambda: run.time_stage("eval", 1.0),
            lambda: run.hash_inputs([]),
            lambda: run.finalize(),
        ]
        for write in writers:
            with self.assertRaises(RunFinalizedError):
                write()
        self.assertEqual(run.read_json("evaluation.json"), {"groups": {}})


if __name__ == "__main__":
    unittest.main()
