import unittest

import torch

from src.errors import ParameterError, TokenOverflowError
from src.skeldata import get_profile, synthesize_dataset
from src.unify import global_token_length, masked_mean, skeleton_slots, unify_batch, unify_tokens


class TestGlobalLength(unittest.TestCase):
    def test_heterogeneous_joint_counts(self):
        self.assertEqual(global_token_length([28, 24, 25], 64), (1792, 4096))

    def test_single_dataset(self):
        manifest = synthesize_dataset(get_profile("tiny", samples_per_label=1)).manifest
        self.assertEqual(global_token_length([manifest], 8), (96, 512))

    def test_no_manifests(self):
        with self.assertRaises(ParameterError):
            global_token_length([], 64)


class TestUnifyTokens(unittest.TestCase):
    def test_padding_and_mask(self):
        tokens = unify_tokens([1.0, 2.0, 3.0], 5)
        self.assertEqual(tokens.values.tolist(), [1.0, 2.0, 3.0, 0.0, 0.0])
        self.assertEqual(tokens.mask.tolist(), [1.0, 1.0, 1.0, 0.0, 0.0])
        self.assertEqual(tokens.valid_length, 3)

    def test_full_length_is_identity(self):
        raw = torch.arange(1.0, 5.0, dtype=torch.float64)
        tokens = unify_tokens(raw, 4)
        self.assertTrue(torch.equal(tokens.values, raw))
        self.assertEqual(tokens.mask.tolist(), [1.0] * 4)

    def test_padding_region_of_smaller_skeleton(self):
        raw = torch.ones(24 * 64, dtype=torch.float64)
        tokens = unify_tokens(raw, 1792)
        self.assertEqual(float(tokens.values[1536:].abs().sum()), 0.0)
        self.assertEqual(float(tokens.mask[1536:].sum()), 0.0)
        self.assertEqual(float(tokens.mask.sum()), 1536.0)

    def test_restrict_recovers_raw(self):
        raw = torch.randn(40, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        self.assertTrue(torch.equal(unify_tokens(raw, 64).restrict(), raw))

    def test_overflow(self):
        with self.assertRaises(TokenOverflowError):
            unify_tokens([1.0] * 6, 5)

    def test_batch(self):
        tokens = unify_batch(torch.ones(3, 4, dtype=torch.float64), 6)
        self.assertEqual(tuple(tokens.values.shape), (3, 6))
        self.assertEqual(tokens.values[2].tolist(), [1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
        with self.assertRaises(ParameterError):
            unify_batch(torch.ones(4, dtype=torch.float64), 6)


class TestPooling(unittest.TestCase):
    def test_masked_mean(self):
        tokens = unify_tokens([1.0, 1.0, 3.0, 3.0], 6)
        self.assertEqual(masked_mean(tokens, 2).tolist(), [2.0, 2.0])

    def test_masked_mean_ignores_padding(self):
        tokens = unify_tokens([2.0, 4.0], 8)
        self.assertEqual(masked_mean(tokens, 2).tolist(), [2.0, 4.0])

    def test_masked_mean_needs_whole_positions(self):
        with self.assertRaises(ParameterError):
            masked_mean(unify_tokens([1.0, 2.0, 3.0], 6), 2)

    def test_slots(self):
        slots, keep = skeleton_slots(unify_tokens([1.0, 2.0, 3.0, 4.0], 8), 2)
        self.assertEqual(tuple(slots.shape), (4, 2))
        self.assertEqual(keep.tolist(), [True, True, False, False])


if __name__ == "__main__":
    unittest.main()
