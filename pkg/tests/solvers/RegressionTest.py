from unittest import TestCase

import numpy as np

from src.solvers.Regression import regress_conditional, regression_orthogonality


class Test(TestCase):
    def test_affine_targets_are_reproduced(self):
        state = np.linspace(-1, 1, 9)[:, None]
        fit = regress_conditional(3 * state + 1, state, degree=1)
        self.assertTrue(np.allclose(fit.fitted, 3 * state + 1))
        self.assertTrue(np.allclose(fit.coefficients[:, 0], [1.0, 3.0]))
        self.assertFalse(fit.degraded)
        self.assertTrue(np.allclose(fit.predict(np.array([[2.0]])), [[7.0]]))

    def test_quadratic_coefficients(self):
        state = np.linspace(-2, 2, 7)[:, None]
        fit = regress_conditional(state ** 2, state, degree=2)
        self.assertTrue(np.allclose(fit.coefficients[:, 0], [0.0, 0.0, 1.0], atol=1e-10))

    def test_residual_is_orthogonal_to_the_basis(self):
        state = np.linspace(-2, 2, 11)[:, None]
        targets = np.sin(3 * state)
        fit = regress_conditional(targets, state, degree=2)
        self.assertGreater(np.max(np.abs(targets - fit.fitted)), 1e-3)
        self.assertLess(regression_orthogonality(fit, state, targets), 1e-8)

    def test_constant_columns_are_dropped(self):
        state = np.column_stack([np.linspace(0, 1, 6), np.full(6, 2.0)])
        targets = 2 * state[:, :1]
        fit = regress_conditional(targets, state, degree=1)
        self.assertTrue(np.array_equal(fit.keptColumns, [0]))
        self.assertTrue(np.allclose(fit.fitted, targets))

    def test_degree_is_lowered_when_samples_are_scarce(self):
        state = np.array([[0.0], [1.0], [3.0]])
        fit = regress_conditional(state[:, 0] ** 3, state, degree=4)
        self.assertEqual(fit.degree, 2)
        self.assertTrue(fit.degraded)

    def test_constant_state_gives_the_weighted_mean(self):
        state = np.ones((4, 1))
        fit = regress_conditional(np.array([1.0, 2.0, 3.0, 4.0]), state, degree=2, weights=np.array([1, 1, 1, 5.0]))
        self.assertTrue(np.allclose(fit.fitted, 3.25))
        self.assertEqual(fit.degree, 0)
        self.assertFalse(fit.degraded)

    def test_zero_weight_samples_do_not_move_the_fit(self):
        state = np.array([[0.0], [1.0], [2.0], [5.0]])
        targets = np.array([[1.0], [3.0], [5.0], [100.0]])
        fit = regress_conditional(targets, state, degree=1, weights=np.array([1.0, 1.0, 1.0, 0.0]))
        self.assertTrue(np.allclose(fit.coefficients[:, 0], [1.0, 2.0]))

    def test_matrix_targets_keep_their_shape(self):
        state = np.linspace(0, 1, 5)[:, None]
        targets = state[:, :, None] * np.eye(2)[None]
        fit = regress_conditional(targets, state, degree=1)
        self.assertEqual(fit.fitted.shape, (5, 2, 2))
        self.assertTrue(np.allclose(fit.fitted, targets))
