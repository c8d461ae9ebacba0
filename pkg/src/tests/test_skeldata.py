import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.errors import DatasetLoadError, EmptySequenceError, ParameterError, SplitError
from src.skeldata import (
    PROFILES,
    SkeletonSequence,
    SplitSpec,
    default_skeleton_edges,
    get_profile,
    load_dataset,
    nearest_centroid_accuracy,
    read_sample,
    resample_indices,
    resample_to_frames,
    split_train_test,
    synthesize_dataset,
    write_dataset,
    write_sample,
)


class TestResample(unittest.TestCase):
    def test_downsample_takes_even_frames(self):
        self.assertEqual(resample_indices(128).tolist(), list(range(0, 128, 2)))

    def test_short_sequence_repeats_cyclically(self):
        indices = resample_indices(30).tolist()
        self.assertEqual(indices[:30], list(range(30)))
        self.assertEqual(indices[30:60], list(range(30)))
        self.assertEqual(indices[60:], [0, 1, 2, 3])

    def test_exact_length_is_identity(self):
        self.assertEqual(resample_indices(64).tolist(), list(range(64)))

    def test_single_frame(self):
        self.assertEqual(resample_indices(1).tolist(), [0] * 64)

    def test_zero_frames(self):
        with self.assertRaises(EmptySequenceError):
            resample_indices(0)

    def test_resample_sequence(self):
        frames = np.arange(100 * 2 * 3, dtype=np.float64).reshape(100, 2, 3)
        seq = resample_to_frames(SkeletonSequence(frames, 30.0, "Joy", "d", "s"))
        self.assertEqual(seq.frames.shape, (64, 2, 3))
        self.assertTrue(np.array_equal(seq.frames[1], frames[1]))


class TestSplit(unittest.TestCase):
    def test_sizes(self):
        ids = [f"s{i}" for i in range(10)]
        train, test = split_train_test(ids, SplitSpec(0.8, seed=0))
        self.assertEqual((len(train), len(test)), (8, 2))
        self.assertEqual(sorted(train + test), sorted(ids))
        self.assertFalse(set(train) & set(test))

    def test_rounding_at_scale(self):
        ids = [str(i) for i in range(8206)]
        train, test = split_train_test(ids, SplitSpec(0.8, seed=3))
        self.assertEqual((len(train), len(test)), (6565, 1641))

    def test_seed_determines_split(self):
        ids = [str(i) for i in range(50)]
        self.assertEqual(split_train_test(ids, SplitSpec(0.8, 5)), split_train_test(ids, SplitSpec(0.8, 5)))
        self.assertNotEqual(split_train_test(ids, SplitSpec(0.8, 5))[0], split_train_test(ids, SplitSpec(0.8, 6))[0])

    def test_too_few_samples(self):
        with self.assertRaises(SplitError):
            split_train_test(["a", "b", "c", "d"], SplitSpec())

    def test_fraction_range(self):
        for fraction in (0.0, 1.0, 1.5):
            with self.assertRaises(ParameterError):
                SplitSpec(fraction)


class TestTopology(unittest.TestCase):
    def test_edges_form_a_tree(self):
        for joints in (1, 2, 5, 12, 24, 25, 28):
            edges = default_skeleton_edges(joints)
            self.assertEqual(len(edges), joints - 1)
            reached = {0}
            for parent, child in edges:
                self.assertIn(parent, reached)
                reached.add(child)
            self.assertEqual(reached, set(range(joints)))


class TestSampleFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_sample_survives_disk(self):
        frames = np.random.default_rng(0).normal(size=(5, 3, 3))
        write_sample(self.tmp / "a.txt", SkeletonSequence(frames, 120.0, "Joy", "d", "a"))
        seq = read_sample(self.tmp / "a.txt")
        self.assertEqual(seq.label, "Joy")
        self.assertEqual(seq.fps, 120.0)
        self.assertTrue(np.array_equal(seq.frames, frames))

    def test_frame_count_mismatch(self):
        path = self.tmp / "bad.txt"
        path.write_text("3 1 30 Joy\n0 0 0\n1 1 1\n")
        with self.assertRaises(DatasetLoadError):
            read_sample(path)

    def test_wrong_row_width(self):
        path = self.tmp / "bad.txt"
        path.write_text("1 2 30 Joy\n0 0 0\n")
        with self.assertRaises(DatasetLoadError):
            read_sample(path)

    def test_zero_frames(self):
        path = self.tmp / "empty.txt"
        path.write_text("0 2 30 Joy\n")
        with self.assertRaises(DatasetLoadError):
            read_sample(path)

    def test_non_finite(self):
        path = self.tmp / "nan.txt"
        path.write_text("1 1 30 Joy\nnan 0 0\n")
        with self.assertRaises(DatasetLoadError):
            read_sample(path)

    def test_missing_file(self):
        with self.assertRaises(DatasetLoadError):
            read_sample(self.tmp / "nope.txt")


class TestDatasets(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_synthesis_is_deterministic(self):
        a = synthesize_dataset(get_profile("tiny", samples_per_label=3))
        b = synthesize_dataset(get_profile("tiny", samples_per_label=3))
        self.assertEqual(len(a.sequences), 9)
        for x, y in zip(a.sequences, b.sequences, strict=True):
            self.assertTrue(np.array_equal(x.frames, y.frames))
        c = synthesize_dataset(get_profile("tiny", samples_per_label=3, seed=1))
        self.assertFalse(np.array_equal(a.sequences[0].frames, c.sequences[0].frames))

    def test_profiles_match_corpus_shapes(self):
        self.assertEqual(PROFILES["emilya-like"].joint_count, 28)
        self.assertEqual(PROFILES["kdae-like"].joint_count, 24)
        self.assertEqual(PROFILES["egbm-like"].joint_count, 25)
        self.assertEqual(len(PROFILES["emilya-like"].labels), 8)
        self.assertEqual(len(PROFILES["kdae-like"].labels), 7)

    def test_unknown_profile(self):
        with self.assertRaises(ParameterError):
            get_profile("mocap-9000")

    def test_written_dataset_loads_back(self):
        dataset = synthesize_dataset(get_profile("tiny", samples_per_label=2))
        manifest_path = write_dataset(dataset, self.tmp / "tiny")
        loaded = load_dataset(manifest_path)
        self.assertEqual(loaded.manifest.joint_count, 12)
        self.assertEqual(loaded.manifest.labels, ("Joy", "Sadness", "Anger"))
        self.assertEqual([s.sample_id for s in loaded.sequences], [s.sample_id for s in dataset.sequences])
        self.assertTrue(np.allclose(loaded.sequences[0].frames, dataset.sequences[0].frames))

    def test_label_outside_manifest(self):
        dataset = synthesize_dataset(get_profile("tiny", samples_per_label=1))
        manifest_path = write_dataset(dataset, self.tmp / "tiny")
        raw = json.loads(manifest_path.read_text())
        raw["labels"] = ["Joy", "Sadness"]
        manifest_path.write_text(json.dumps(raw))
        with self.assertRaises(DatasetLoadError):
            load_dataset(manifest_path)

    def test_joint_count_disagreement(self):
        dataset = synthesize_dataset(get_profile("tiny", samples_per_label=1))
        manifest_path = write_dataset(dataset, self.tmp / "tiny")
        raw = json.loads(manifest_path.read_text())
        raw["joint_count"] = 13
        manifest_path.write_text(json.dumps(raw))
        with self.assertRaises(DatasetLoadError):
            load_dataset(manifest_path)

    def test_velocity_probe_separates_labels(self):
        dataset = synthesize_dataset(get_profile("tiny", samples_per_label=5))
        self.assertGreater(nearest_centroid_accuracy(dataset.sequences), 0.8)


if __name__ == "__main__":
    unittest.main()
