from unittest import TestCase

import numpy as np

from src.functionals.FunctionalModels import ConstantFunctional
from src.helpers.Errors import ConvergenceError
from src.measures.EmpiricalMeasure import make_empirical, with_probe_atoms
from src.measures.LiftedField import LiftedField, identity_field
from src.oracle.LQOracle import LQSpec, discrete_riccati_solve
from src.solvers.ForwardBackward import (PathBundle, cumulative_targets, h_norm, solve_first_order,
                                         solve_measure_derivative, solve_second_order, solve_x_derivative)
from src.solvers.SolverConfig import SolverConfig, TimeGrid


class Test(TestCase):
    def setUp(self):
        # deterministic dynamics with one outcome, where the discrete problem has an exact Riccati solution
        self.spec = LQSpec(q=0.5, qBar=0.5, qT=1.0, qBarT=0.0, lam=1.0, sigma=0.0, t0=0.0, T=0.5)
        self.grid = self.spec.grid(10)
        self.cfg = self.spec.solver_config(numOutcomes=1, tol=1e-11, maxIters=500)
        self.F, self.F_T = self.spec.functionals()
        self.m = make_empirical(np.array([[-1.0], [0.5], [2.0], [3.0]]))
        self.riccati = discrete_riccati_solve(self.spec, self.grid)

    def test_cumulative_targets_use_right_endpoints(self):
        sources = np.array([1.0, 2.0, 3.0])
        targets = cumulative_targets(sources, np.array(10.0), 0.5)
        self.assertTrue(np.allclose(targets, [13.0, 12.5, 11.5]))

    def test_h_norm(self):
        values = np.array([[[1.0], [3.0]], [[3.0], [1.0]]])
        self.assertAlmostEqual(h_norm(values, np.array([0.5, 0.5])), np.sqrt(5.0))

    def test_zero_functional_gives_zero_adjoint(self):
        cfg = SolverConfig(lam=1.0, sigma=0.3, numOutcomes=16, seed=4)
        grid = TimeGrid(0.0, 1.0, 8)
        bundle = solve_first_order(ConstantFunctional(), ConstantFunctional(), identity_field(self.m), grid, cfg)
        self.assertTrue(bundle.converged)
        self.assertEqual(bundle.iterations, 1)
        self.assertTrue(np.all(bundle.Z == 0))
        self.assertEqual(bundle.Y.shape, (9, 16, 4, 1))
        displacement = bundle.Y[-1] - self.m.atoms[None]
        self.assertTrue(np.allclose(displacement, 0.3 * bundle.dW.sum(axis=1)[:, None, :]))
        self.assertEqual(len(bundle.to_frame()), 9)

    def test_first_order_matches_discrete_riccati(self):
        bundle = solve_first_order(self.F, self.F_T, identity_field(self.m), self.grid, self.cfg)
        self.assertTrue(bundle.converged)
        for k in range(self.grid.numSteps + 1):
            mean = self.m.weights @ bundle.Y[k, 0]
            expected = self.riccati.adjoint(k, bundle.Y[k, 0], mean)
            self.assertTrue(np.allclose(bundle.Z[k, 0], expected, atol=1e-8))

    def test_common_random_numbers_are_reused(self):
        cfg = SolverConfig(lam=1.0, sigma=0.5, numOutcomes=8, seed=1)
        grid = TimeGrid(0.0, 1.0, 4)
        first = solve_first_order(ConstantFunctional(), ConstantFunctional(), identity_field(self.m), grid, cfg)
        again = solve_first_order(ConstantFunctional(), ConstantFunctional(), identity_field(self.m), grid,
                                  cfg.with_changes(seed=99), dW=first.dW)
        self.assertTrue(np.array_equal(first.Y, again.Y))

    def test_terminal_grid_returns_terminal_adjoint(self):
        grid = TimeGrid(0.5, 0.5, 0)
        bundle = solve_first_order(self.F, self.F_T, identity_field(self.m), grid, self.cfg)
        self.assertEqual(bundle.Y.shape[0], 1)
        self.assertTrue(np.allclose(bundle.Z[0, 0], self.m.atoms))

    def test_non_convergence_keeps_the_partial_bundle(self):
        cfg = self.cfg.with_changes(maxIters=1)
        with self.assertRaises(ConvergenceError) as context:
            solve_first_order(self.F, self.F_T, identity_field(self.m), self.grid, cfg)
        self.assertIsInstance(context.exception.partialResult, PathBundle)
        bundle = solve_first_order(self.F, self.F_T, identity_field(self.m), self.grid, cfg, raiseOnFailure=False)
        self.assertFalse(bundle.converged)

    def test_x_derivative_matches_discrete_riccati(self):
        bundle = solve_first_order(self.F, self.F_T, identity_field(self.m), self.grid, self.cfg)
        xDeriv = solve_x_derivative(bundle, self.F, self.F_T, self.cfg)
        self.assertEqual(xDeriv.Z.shape, (11, 1, 4, 1, 1))
        self.assertTrue(np.allclose(xDeriv.Z[0], self.riccati.p[0], atol=1e-8))
        self.assertTrue(np.allclose(xDeriv.Y[0], 1.0))

    def test_second_order_splits_fluctuation_and_mean(self):
        bundle = solve_first_order(self.F, self.F_T, identity_field(self.m), self.grid, self.cfg)
        direction = np.array([0.3, -1.0, 2.0, 0.5])
        Xdir = LiftedField(direction[None, :, None], self.m)
        second = solve_second_order(bundle, Xdir, self.F, self.F_T, self.cfg)
        mean = self.m.weights @ direction
        expected = self.riccati.p[0] * (direction - mean) + self.riccati.pi[0] * mean
        self.assertTrue(np.allclose(second.Z[0, 0, :, 0], expected, atol=1e-8))
        doubled = solve_second_order(bundle, Xdir * 2.0, self.F, self.F_T, self.cfg)
        self.assertTrue(np.allclose(doubled.Z[0], 2 * second.Z[0], atol=1e-8))
        with self.assertRaises(ValueError):
            solve_second_order(bundle, identity_field(make_empirical(np.array([[0.0]]))), self.F, self.F_T,
                               self.cfg)

    def test_measure_derivative_moves_only_the_mean_part(self):
        x = 1.7
        augmented = with_probe_atoms(self.m, [[x]])
        bundle = solve_first_order(self.F, self.F_T, identity_field(augmented), self.grid, self.cfg)
        xDeriv = solve_x_derivative(bundle, self.F, self.F_T, self.cfg)
        bars = solve_measure_derivative(bundle, xDeriv, self.F, self.F_T, self.m.size, self.cfg)
        expected = (self.riccati.pi[0] - self.riccati.p[0]) * (x - float(self.m.mean()[0]))
        self.assertTrue(np.allclose(bars.first.Z[0, 0, :, 0], expected, atol=1e-8))
        self.assertTrue(np.allclose(bars.second.Z, 0.0, atol=1e-12))
        self.assertEqual(set(bars.bounds), {"Ybar", "Zbar", "calYbar", "calZbar"})

    def test_measure_derivative_vanishes_without_mean_coupling(self):
        spec = LQSpec(q=0.5, qBar=0.0, qT=1.0, qBarT=0.0, lam=1.0, sigma=0.0, t0=0.0, T=0.5)
        F, F_T = spec.functionals()
        augmented = with_probe_atoms(self.m, [[0.2]])
        bundle = solve_first_order(F, F_T, identity_field(augmented), self.grid, self.cfg)
        xDeriv = solve_x_derivative(bundle, F, F_T, self.cfg)
        bars = solve_measure_derivative(bundle, xDeriv, F, F_T, self.m.size, self.cfg)
        self.assertTrue(np.allclose(bars.first.Z, 0.0))
        self.assertTrue(np.allclose(bars.first.Y, 0.0))
