from unittest import TestCase

import numpy as np

from src.functionals.FunctionalModels import ConstantFunctional, LQFunctional
from src.helpers.Errors import GridError
from src.solvers.SolverConfig import SolverConfig, TimeGrid, assumption_constants, validate_margins


class Test(TestCase):
    def test_time_grid(self):
        grid = TimeGrid(0.0, 1.0, 4)
        self.assertAlmostEqual(grid.dt, 0.25)
        self.assertTrue(np.allclose(grid.times(), [0.0, 0.25, 0.5, 0.75, 1.0]))
        tail = grid.tail(1)
        self.assertAlmostEqual(tail.t0, 0.25)
        self.assertEqual(tail.numSteps, 3)
        self.assertEqual(tail.offset, 1)
        self.assertAlmostEqual(tail.dt, grid.dt)
        end = grid.tail(4)
        self.assertEqual(end.numSteps, 0)
        self.assertEqual(end.dt, 0.0)
        refined = tail.refined()
        self.assertEqual(refined.numSteps, 6)
        self.assertEqual(refined.offset, 2)

    def test_time_grid_rejects_bad_input(self):
        with self.assertRaises(ValueError):
            TimeGrid(1.0, 0.0, 3)
        with self.assertRaises(ValueError):
            TimeGrid(0.0, 1.0, 0)
        with self.assertRaises(GridError):
            TimeGrid(0.0, 1.0, 4).tail(5)

    def test_steps_for(self):
        grid = TimeGrid(0.0, 1.0, 10)
        self.assertEqual(grid.steps_for(0.3), 3)
        self.assertEqual(grid.steps_for(1.0), 10)
        for h in (0.05, 0.0, 1.2):
            with self.assertRaises(GridError):
                grid.steps_for(h)

    def test_solver_config_validation(self):
        cfg = SolverConfig(lam=1.0, sigma=0.3)
        self.assertEqual(cfg.dim, 1)
        self.assertTrue(np.allclose(cfg.diffusion, [[0.09]]))
        self.assertEqual(cfg.with_changes(numOutcomes=8).numOutcomes, 8)
        for changes in ({"lam": 0.0}, {"sigma": [[1.0, 2.0], [0.0, 1.0]]}, {"sigma": [[-1.0]]},
                        {"numOutcomes": 0}, {"damping": 1.5}, {"independentCopy": "bootstrap"}):
            with self.assertRaises(ValueError):
                SolverConfig(**{"lam": 1.0, "sigma": 0.3, **changes})

    def test_assumption_constants(self):
        constants = assumption_constants(LQFunctional(1.0), LQFunctional(1.0), 1.0, 1.0)
        self.assertAlmostEqual(constants.first_order_margin(), 1.0)
        self.assertAlmostEqual(constants.master_margin(), 1.0 - 1.5)

    def test_validate_margins(self):
        grid = TimeGrid(0.0, 1.0, 4)
        cfg = SolverConfig(lam=1.0, sigma=0.0)
        with self.assertRaises(ValueError):
            validate_margins(LQFunctional(-3.0), ConstantFunctional(), cfg, grid)
        with self.assertLogs(level="WARNING"):
            validate_margins(LQFunctional(1.0), LQFunctional(1.0), cfg, grid)
        self.assertAlmostEqual(validate_margins(ConstantFunctional(), ConstantFunctional(), cfg, grid).master_margin(),
                               1.0)
