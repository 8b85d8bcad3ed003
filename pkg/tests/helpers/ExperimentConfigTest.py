import os
import tempfile
from unittest import TestCase

import numpy as np

from src.functionals.FunctionalModels import ConstantFunctional, LQFunctional
from src.helpers.Errors import ConfigError
from src.helpers.ExperimentConfig import load_experiment_config, parse_experiment_config


def raw_config(**overrides) -> dict:
    raw = {
        "seed": 3,
        "functional": {"name": "lq", "q": 1.0, "qBar": 0.5},
        "terminal": {"name": "lq", "q": 0.5},
        "grid": {"T": 1.0, "numSteps": 4},
        "solver": {"lambda": 1.0, "sigma": 0.2, "numOutcomes": 16},
        "measure": {"atoms": [[-1.0], [0.5], [2.0]]},
    }
    raw.update(overrides)
    return raw


class Test(TestCase):
    def assertConfigError(self, raw: dict, fieldPath: str):
        with self.assertRaises(ConfigError) as context:
            parse_experiment_config(raw)
        self.assertEqual(context.exception.fieldPath, fieldPath)

    def test_defaults(self):
        config = parse_experiment_config(raw_config())
        self.assertIsInstance(config.F, LQFunctional)
        self.assertEqual(config.grid.t0, 0.0)
        self.assertAlmostEqual(config.grid.dt, 0.25)
        self.assertEqual(config.solver.seed, 3)
        self.assertTrue(np.allclose(config.solver.sigma, [[0.2]]))
        self.assertTrue(np.allclose(config.probes.points, [[-1.0]]))
        self.assertEqual(config.probes.times, [0.0])
        self.assertEqual(config.probes.steps, [0.25])
        self.assertEqual(config.replications, 1)
        self.assertIsNone(config.outputDirectory)
        self.assertIsNone(config.option("tolerance"))
        self.assertAlmostEqual(config.lq_spec().qT, 0.5)

    def test_terminal_defaults_to_zero(self):
        raw = raw_config()
        del raw["terminal"]
        config = parse_experiment_config(raw)
        self.assertIsInstance(config.F_T, ConstantFunctional)
        self.assertAlmostEqual(config.F_T.value(config.measure), 0.0)

    def test_missing_keys_name_the_field(self):
        raw = raw_config()
        del raw["seed"]
        self.assertConfigError(raw, "seed")
        self.assertConfigError(raw_config(grid={"numSteps": 4}), "grid.T")
        self.assertConfigError(raw_config(solver={"sigma": 0.2}), "solver.lambda")
        self.assertConfigError(raw_config(functional={"name": "lq"}), "functional.q")

    def test_invalid_values_name_the_field(self):
        self.assertConfigError(raw_config(seed=-1), "seed")
        self.assertConfigError(raw_config(seed="abc"), "seed")
        self.assertConfigError(raw_config(solver={"lambda": 1.0, "stepSize": 2}), "solver.stepSize")
        self.assertConfigError(raw_config(measure={"points": []}), "measure")
        self.assertConfigError(raw_config(replications=0), "replications")
        self.assertConfigError(raw_config(probes={"points": [[0.0, 1.0]]}), "probes.points")
        self.assertConfigError(raw_config(functional={"name": "quartic"}), "functional")

    def test_options_are_validated(self):
        config = parse_experiment_config(raw_config(options={"learningRate": 0.5, "maxIters": 400, "tol": 1e-9,
                                                             "representation": "feedback", "fdCrossCheck": True}))
        self.assertEqual(config.option("maxIters"), 400)
        self.assertIsInstance(config.option("maxIters"), int)
        self.assertEqual(config.option("representation"), "feedback")
        self.assertTrue(config.option("fdCrossCheck"))
        self.assertConfigError(raw_config(options={"representation": "closed-loop"}), "options.representation")
        self.assertConfigError(raw_config(options={"learningRate": 0.0}), "options.learningRate")
        self.assertConfigError(raw_config(options={"tol": "small"}), "options.tol")
        self.assertConfigError(raw_config(options={"maxIters": 2.5}), "options.maxIters")
        self.assertConfigError(raw_config(options={"numProbes": 9}), "options.numProbes")
        self.assertConfigError(raw_config(options={"gaussianProbe": "yes"}), "options.gaussianProbe")
        self.assertConfigError(raw_config(options={"stepSize": 0.1}), "options.stepSize")
        self.assertConfigError(raw_config(options=[1, 2]), "options")

    def test_convexity_margin_is_enforced(self):
        self.assertConfigError(raw_config(terminal={"name": "lq", "q": -2.0}), "solver.lambda")

    def test_lq_spec_needs_lq_functionals(self):
        config = parse_experiment_config(raw_config(functional={"name": "zero"}))
        with self.assertRaises(ConfigError):
            config.lq_spec()

    def test_load_resolves_paths_next_to_the_config(self):
        with tempfile.TemporaryDirectory() as directory:
            with open(os.path.join(directory, "measure.csv"), "w", encoding="utf-8") as file:
                file.write("weight,x_1\n0.25,-1.0\n0.75,1.0\n")
            configPath = os.path.join(directory, "experiment.yaml")
            with open(configPath, "w", encoding="utf-8") as file:
                file.write("seed: 1\nfunctional: {name: zero}\ngrid: {T: 1.0, numSteps: 2}\n"
                           "solver: {lambda: 1.0}\nmeasure: {csv: measure.csv}\noutput: results\n")
            config = load_experiment_config(configPath)
            self.assertTrue(np.allclose(config.measure.weights, [0.25, 0.75]))
            self.assertEqual(config.outputDirectory, os.path.join(directory, "results"))
            with open(configPath, "w", encoding="utf-8") as file:
                file.write("seed: [unclosed\n")
            with self.assertRaises(ConfigError):
                load_experiment_config(configPath)
        with self.assertRaises(ConfigError):
            load_experiment_config(os.path.join(directory, "missing.yaml"))
