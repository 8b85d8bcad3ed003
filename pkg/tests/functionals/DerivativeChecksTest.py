import math
from unittest import TestCase

import numpy as np

from src.functionals.DerivativeChecks import (check_first_derivative, check_second_derivative, chain_rule_total_delta,
                                              estimate_assumption_constants, estimate_constants, gateaux_gradient_check,
                                              hessian_consistency_check, lifted_gradient, lifted_hessian_apply,
                                              monotonicity_gap, partial_m)
from src.functionals.FunctionalModels import (ConstantFunctional, CylindricalFunctional, InteractionEnergy,
                                              LinearFunctional, LQFunctional)
from src.measures.EmpiricalMeasure import dirac, make_empirical, random_measure
from src.measures.LiftedField import FieldFunction, LiftedField, identity_field, zero_field
from src.solvers.RandomStreams import outcome_derangement
from src.solvers.SolverConfig import assumption_constants

EXACT_THETAS = (0.5, 0.25, 0.1)


def random_fields(seed: int, m, numOutcomes: int = 3):
    rng = np.random.default_rng(seed)
    X = LiftedField(rng.standard_normal((numOutcomes, m.size, m.dim)), m)
    Z = LiftedField(rng.standard_normal((numOutcomes, m.size, m.dim)), m)
    return X, Z


class Test(TestCase):
    def setUp(self):
        self.m = make_empirical(np.array([[0.0], [1.0]]))
        self.mPrime = make_empirical(np.array([[2.0], [3.0]]), [0.3, 0.7])
        self.mTilde = make_empirical(np.array([[-1.0], [0.5], [4.0]]))

    def test_first_derivative_exact_for_constant_and_linear(self):
        for F in (ConstantFunctional(2.0), LinearFunctional([1.5], 0.3)):
            report = check_first_derivative(F, self.m, self.mPrime, thetas=EXACT_THETAS)
            self.assertTrue(report.passed)
            self.assertLessEqual(max(report.absErr), 1e-12)
            self.assertTrue(all(math.isnan(order) for order in report.estOrder))

    def test_first_derivative_of_squared_mean(self):
        F = LQFunctional(0.0, 2.0)
        report = check_first_derivative(F, dirac([0.0]), dirac([1.0]))
        self.assertAlmostEqual(report.rhs[0], 0.0)
        self.assertTrue(np.allclose(report.lhs, report.thetas))
        self.assertTrue(report.passed)
        self.assertTrue(np.allclose(report.estOrder[1:], 1.0))

    def test_first_derivative_converges_for_smooth_functionals(self):
        m = random_measure(0, 5, 2)
        mPrime = random_measure(1, 4, 2, uniformWeights=False)
        for F in (CylindricalFunctional([[1.0, 0.5]], phases=[0.3]), InteractionEnergy(0.8, 1.1)):
            report = check_first_derivative(F, m, mPrime)
            self.assertTrue(report.passed)
            self.assertEqual(list(report.to_frame().columns), ["theta", "lhs", "rhs", "abs_err", "est_order"])

    def test_first_derivative_fails_with_wrong_delta(self):
        class WrongDelta(LQFunctional):
            def delta(self, m, points):
                return 2 * super().delta(m, points)

        report = check_first_derivative(WrongDelta(1.0), self.m, self.mPrime)
        self.assertFalse(report.passed)

    def test_second_derivative_exact_for_squared_mean(self):
        F = LQFunctional(0.0, 2.0)
        report = check_second_derivative(F, self.m, self.mPrime, self.mTilde, thetas=EXACT_THETAS)
        meanShift = self.mPrime.mean()[0] - 0.5
        tildeShift = self.mTilde.mean()[0] - 0.5
        self.assertAlmostEqual(report.rhs[0], 2 * meanShift * tildeShift)
        self.assertTrue(report.passed)
        self.assertLessEqual(max(report.extra["taylorErr"]), 1e-10)

    def test_second_derivative_exact_for_interaction(self):
        m = random_measure(2, 4, 1)
        mPrime = random_measure(3, 3, 1)
        mTilde = random_measure(4, 3, 1, uniformWeights=False)
        report = check_second_derivative(InteractionEnergy(0.5, 1.0), m, mPrime, mTilde, thetas=EXACT_THETAS)
        self.assertTrue(report.passed)
        self.assertLessEqual(max(report.absErr), 1e-8)

    def test_quadratic_functionals_pass_down_to_round_off(self):
        m = make_empirical(np.array([[-1.0], [0.5], [2.0], [3.0]]), [0.1, 0.4, 0.3, 0.2])
        mPrime, mTilde = random_measure(3, 4, 1), random_measure(4, 4, 1)
        F = LQFunctional(0.5, 0.5)
        second = check_second_derivative(F, m, mPrime, mTilde)
        self.assertEqual(second.thetas, [1e-1, 1e-2, 1e-3, 1e-4])
        self.assertTrue(second.passed)
        self.assertTrue(all(math.isnan(order) or order >= 0.9 for order in second.estOrder))
        self.assertTrue(all(math.isnan(order) or order >= 0.9 for order in second.extra["taylorOrder"]))
        first = check_first_derivative(F, m, mPrime)
        self.assertTrue(first.passed)
        for order in first.estOrder[1:]:
            self.assertAlmostEqual(order, 1.0, places=3)

    def test_thetas_are_validated(self):
        F = LQFunctional(1.0)
        with self.assertRaises(ValueError):
            check_first_derivative(F, self.m, self.mPrime, thetas=(0.1, 0.2))
        with self.assertRaises(ValueError):
            check_first_derivative(F, self.m, self.mPrime, thetas=(1.5,))
        with self.assertRaises(ValueError):
            check_second_derivative(F, self.m, self.mPrime, self.mTilde, thetas=(0.8,))

    def test_lifted_gradient_examples(self):
        X = identity_field(self.m)
        self.assertTrue(np.allclose(lifted_gradient(LQFunctional(1.0), X).values, X.values))
        self.assertTrue(np.allclose(lifted_gradient(LinearFunctional([2.5]), X).values, 2.5))
        shifted = LiftedField(self.m.atoms[None] + 1.0, self.m)
        self.assertTrue(np.allclose(lifted_gradient(LQFunctional(0.0, 2.0), shifted).values, 3.0))

    def test_lifted_hessian_apply_examples(self):
        m = random_measure(5, 4, 2)
        X, Z = random_fields(5, m)
        self.assertTrue(np.allclose(lifted_hessian_apply(LQFunctional(1.0), X, Z).values, Z.values))
        partners = outcome_derangement(3, 0)
        applied = lifted_hessian_apply(LQFunctional(0.0, 1.0), X, Z)
        for omega in range(3):
            self.assertTrue(np.allclose(applied.values[omega], Z.values[partners[omega]].T @ m.weights))
        reseeded = lifted_hessian_apply(LQFunctional(0.0, 1.0), X, Z, seed=3)
        partners = outcome_derangement(3, 3)
        for omega in range(3):
            self.assertTrue(np.allclose(reseeded.values[omega], Z.values[partners[omega]].T @ m.weights))
        exact = lifted_hessian_apply(LQFunctional(0.0, 1.0), X, Z, independentCopy="product")
        self.assertTrue(np.allclose(exact.values, Z.values.mean(axis=0).T @ m.weights))
        single = LiftedField(Z.values[:1], m)
        self.assertTrue(np.allclose(lifted_hessian_apply(LQFunctional(0.0, 1.0), single, single).values,
                                    lifted_hessian_apply(LQFunctional(0.0, 1.0), single, single,
                                                         independentCopy="product").values))
        with self.assertRaises(ValueError):
            lifted_hessian_apply(LQFunctional(1.0), X, Z, independentCopy="bootstrap")

    def test_lifted_derivatives_match_finite_differences(self):
        m = random_measure(6, 4, 2)
        X, Y = random_fields(6, m)
        F = CylindricalFunctional([[1.0, -0.5]], slope=[0.2])
        self.assertLess(gateaux_gradient_check(F, X, lifted_gradient(F, X)), 1e-3)
        self.assertLess(hessian_consistency_check(InteractionEnergy(0.7, 1.2), X, Y), 1e-4)

    def test_partial_m_examples(self):
        F = LinearFunctional([1.0])
        self.assertAlmostEqual(partial_m(F, FieldFunction.identity(), self.m, [3.0]), 2.5)
        doubled = FieldFunction.deterministic(lambda points: 2 * points)
        self.assertAlmostEqual(partial_m(F, doubled, self.m, [3.0]), 6.0 - 1.0)
        with self.assertRaises(ValueError):
            partial_m(F, doubled, self.m, [1.0, 2.0])

    def test_chain_rule_reduces_to_partial_m_for_measure_free_fields(self):
        F = LQFunctional(1.0, 0.5)
        doubled = FieldFunction.deterministic(lambda points: 2 * points)
        total = chain_rule_total_delta(F, doubled, zero_field(self.m), self.m, [0.7])
        self.assertAlmostEqual(total, partial_m(F, doubled, self.m, [0.7]))
        with self.assertRaises(ValueError):
            chain_rule_total_delta(F, doubled, None, self.m, [0.7])

    def test_monotonicity_gap(self):
        self.assertAlmostEqual(monotonicity_gap(LQFunctional(0.0, 1.0), dirac([0.0]), dirac([2.0])), 4.0)
        self.assertAlmostEqual(monotonicity_gap(LQFunctional(1.0), dirac([0.0]), dirac([2.0])), 0.0)

    def test_estimate_constants(self):
        m = random_measure(7, 4, 2)
        probes = [random_fields(seed, m) for seed in range(10)]
        estimate = estimate_constants(LQFunctional(2.0), probes)
        self.assertAlmostEqual(estimate.c, 2.0)
        self.assertAlmostEqual(estimate.cPrime, 0.0)
        self.assertEqual(estimate.numSkipped, 0)
        self.assertAlmostEqual(estimate_constants(LinearFunctional([1.0, 1.0]), probes).c, 0.0)
        concave = estimate_constants(LQFunctional(-1.5), probes)
        self.assertAlmostEqual(concave.cPrime, 1.5)
        with self.assertRaises(ValueError):
            estimate_constants(LQFunctional(2.0), probes[:9])

    def test_estimated_assumption_constants_stay_below_declared(self):
        m = random_measure(7, 4, 2)
        probes = [random_fields(seed, m) for seed in range(10)]
        for F, F_T in ((LQFunctional(1.0, 0.5), LQFunctional(2.0)),
                       (InteractionEnergy(0.8, 1.1), InteractionEnergy(-0.5, 1.0))):
            declared = assumption_constants(F, F_T, 3.0, 1.0)
            estimated = estimate_assumption_constants(F, F_T, probes, 3.0, 1.0)
            for name in ("c", "cT", "cPrime", "cPrimeT"):
                self.assertLessEqual(getattr(estimated, name), getattr(declared, name) + 1e-8)
            self.assertGreaterEqual(estimated.first_order_margin(), declared.first_order_margin() - 1e-8)
            self.assertGreaterEqual(estimated.master_margin(), declared.master_margin() - 1e-8)
        lq = estimate_assumption_constants(LQFunctional(1.0, 0.5), LQFunctional(2.0), probes, 3.0, 1.0)
        self.assertAlmostEqual(lq.cT, 2.0)
        self.assertAlmostEqual(lq.cPrimeT, 0.0)
        self.assertEqual((lq.lam, lq.T), (3.0, 1.0))
