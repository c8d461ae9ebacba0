import math
import unittest

import torch

from src.errors import DegenerateInputError, DivergenceUndefinedError, ParameterError
from src.numerics import (
    SgdState,
    apply_sgd_step,
    cosine_matrix,
    cosine_similarity,
    cross_entropy,
    finite_diff_check,
    kl_divergence,
    kl_divergence_from_log,
    log_softmax,
    sgd_step,
    softmax,
)


class TestCosine(unittest.TestCase):
    def test_orthogonal_and_scaled(self):
        self.assertEqual(float(cosine_similarity([1, 0], [0, 1])), 0.0)
        self.assertEqual(float(cosine_similarity([2, 0], [1, 0])), 1.0)

    def test_known_value(self):
        expected = 32 / math.sqrt(14 * 77)
        self.assertAlmostEqual(float(cosine_similarity([1, 2, 3], [4, 5, 6])), expected, places=12)

    def test_zero_vector_is_degenerate(self):
        with self.assertRaises(DegenerateInputError):
            cosine_similarity([0, 0], [1, 0])

    def test_length_mismatch(self):
        with self.assertRaises(ParameterError):
            cosine_similarity([1, 2], [1, 2, 3])

    def test_matrix_matches_pairwise(self):
        a = torch.tensor([[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
        b = torch.tensor([[4.0, 5.0, 6.0]], dtype=torch.float64)
        sims = cosine_matrix(a, b)
        self.assertEqual(tuple(sims.shape), (2, 1))
        self.assertAlmostEqual(float(sims[0, 0]), float(cosine_similarity(a[0], b[0])), places=12)

    def test_matrix_rejects_zero_row(self):
        with self.assertRaises(DegenerateInputError):
            cosine_matrix([[1.0, 0.0], [0.0, 0.0]], [[1.0, 1.0]])


class TestSoftmax(unittest.TestCase):
    def test_single_element(self):
        self.assertEqual(softmax([5.0]).tolist(), [1.0])

    def test_uniform(self):
        self.assertEqual(softmax([1, 1, 1, 1], temperature=0.5).tolist(), [0.25] * 4)

    def test_sharp_temperature(self):
        out = softmax([1.0, 0.0], temperature=0.1)
        self.assertAlmostEqual(float(out[0]), math.exp(10) / (math.exp(10) + 1), places=12)
        self.assertAlmostEqual(float(out[1]), 1 / (math.exp(10) + 1), places=12)

    def test_large_logits_stay_finite(self):
        out = softmax([1000.0, 999.0])
        self.assertTrue(torch.isfinite(out).all())
        self.assertAlmostEqual(float(out.sum()), 1.0, places=12)

    def test_non_positive_temperature(self):
        for tau in (0.0, -1.0):
            with self.assertRaises(ParameterError):
                softmax([1.0, 2.0], temperature=tau)

    def test_log_softmax_consistent(self):
        logits = [0.3, -1.2, 2.0]
        self.assertTrue(torch.allclose(log_softmax(logits).exp(), softmax(logits)))


class TestKlDivergence(unittest.TestCase):
    def test_identical(self):
        p = [0.2, 0.3, 0.5]
        self.assertEqual(float(kl_divergence(p, p)), 0.0)

    def test_one_hot_target(self):
        self.assertAlmostEqual(float(kl_divergence([1, 0], [0.9999546, 4.54e-5])), -math.log(0.9999546), places=12)

    def test_direct_summation(self):
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        self.assertAlmostEqual(float(kl_divergence([0.5, 0.5], [0.25, 0.75])), expected, places=12)
        self.assertAlmostEqual(expected, 0.1438410362, places=9)

    def test_zero_mass_on_support(self):
        with self.assertRaises(DivergenceUndefinedError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])

    def test_not_a_distribution(self):
        with self.assertRaises(ParameterError):
            kl_divergence([0.5, 0.6], [0.5, 0.5])

    def test_log_domain_agrees(self):
        target = torch.tensor([0.5, 0.5], dtype=torch.float64)
        predicted = torch.tensor([0.25, 0.75], dtype=torch.float64)
        self.assertAlmostEqual(
            float(kl_divergence_from_log(target, predicted.log())), float(kl_divergence(target, predicted)), places=12
        )


class TestCrossEntropy(unittest.TestCase):
    def test_confident_correct(self):
        self.assertAlmostEqual(float(cross_entropy([10.0, -10.0], 0)), math.log1p(math.exp(-20)), places=13)

    def test_uniform(self):
        self.assertAlmostEqual(float(cross_entropy([0, 0, 0, 0], 2)), math.log(4), places=12)

    def test_vanishing_probability(self):
        self.assertAlmostEqual(float(cross_entropy([0.0, 100.0], 0)), 100.0, places=9)

    def test_index_out_of_range(self):
        with self.assertRaises(ParameterError):
            cross_entropy([0.0, 1.0], 2)


class TestSgd(unittest.TestCase):
    def test_plain_step(self):
        state = SgdState(learning_rate=0.1, momentum=0.0)
        (p,) = sgd_step([torch.tensor([1.0], dtype=torch.float64)], [torch.tensor([0.5], dtype=torch.float64)], state)
        self.assertAlmostEqual(float(p[0]), 0.95, places=12)

    def test_zero_gradient(self):
        state = SgdState(learning_rate=0.1)
        p0 = torch.tensor([1.0, -2.0], dtype=torch.float64)
        (p,) = sgd_step([p0], [torch.zeros(2, dtype=torch.float64)], state)
        self.assertTrue(torch.equal(p, p0))

    def test_momentum_recurrence(self):
        state = SgdState(learning_rate=0.1, momentum=0.9)
        p = torch.tensor([0.0], dtype=torch.float64)
        g = torch.tensor([1.0], dtype=torch.float64)
        (p,) = sgd_step([p], [g], state)
        self.assertAlmostEqual(float(p[0]), -0.1, places=12)
        (p,) = sgd_step([p], [g], state)
        self.assertAlmostEqual(float(p[0]), -0.29, places=12)

    def test_shape_mismatch(self):
        with self.assertRaises(ParameterError):
            sgd_step([torch.zeros(2, dtype=torch.float64)], [torch.zeros(3, dtype=torch.float64)], SgdState(0.1))

    def test_negative_learning_rate(self):
        with self.assertRaises(ParameterError):
            SgdState(learning_rate=-0.1)

    def test_apply_in_place(self):
        param = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        param.grad = torch.tensor([0.5], dtype=torch.float64)
        apply_sgd_step([param], SgdState(learning_rate=0.1, momentum=0.0))
        self.assertAlmostEqual(float(param.detach()[0]), 0.95, places=12)


class TestGradientCheck(unittest.TestCase):
    def test_quadratic(self):
        report = finite_diff_check(lambda ps: (ps[0] ** 2).sum(), [torch.tensor([3.0], dtype=torch.float64)], epsilon=1e-5)
        self.assertTrue(report.passed)
        self.assertLess(report.max_relative_error, 1e-8)

    def test_cross_entropy_gradient(self):
        logits = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        report = finite_diff_check(lambda ps: cross_entropy(ps[0], [1, 0, 2]), [logits])
        self.assertTrue(report.passed)
        self.assertEqual(report.coordinates_checked, 12)

    def test_constant_loss(self):
        report = finite_diff_check(lambda ps: ps[0].sum() * 0.0 + 1.0, [torch.ones(3, dtype=torch.float64)])
        self.assertTrue(report.passed)
        self.assertEqual(report.max_relative_error, 0.0)

    def test_loss_detached_from_inputs(self):
        report = finite_diff_check(lambda ps: torch.tensor(1.0, dtype=torch.float64), [torch.ones(2, 3, dtype=torch.float64)])
        self.assertTrue(report.passed)
        self.assertEqual(report.max_relative_error, 0.0)
        self.assertEqual(report.coordinates_checked, 6)

    def test_loss_ignoring_one_input(self):
        params = [torch.tensor([2.0], dtype=torch.float64), torch.tensor([5.0, 6.0], dtype=torch.float64)]
        report = finite_diff_check(lambda ps: (ps[0] ** 3).sum(), params, epsilon=1e-5)
        self.assertTrue(report.passed)
        self.assertEqual(report.coordinates_checked, 3)

    def test_coordinate_subset(self):
        params = [torch.randn(10, 10, dtype=torch.float64, generator=torch.Generator().manual_seed(1))]
        report = finite_diff_check(lambda ps: (ps[0].sin() ** 2).sum(), params, max_coords=7, seed=3)
        self.assertEqual(report.coordinates_checked, 7)
        self.assertTrue(report.passed)


if __name__ == "__main__":
    unittest.main()
