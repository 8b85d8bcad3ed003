import os
import tempfile
from unittest import TestCase

import numpy as np
import pandas as pd

from src.helpers.Errors import MeasureMismatchError
from src.measures.EmpiricalMeasure import make_empirical, random_measure, w2_distance
from src.measures.LiftedField import (FieldFunction, LiftedField, compose, constant_field, identity_field, inner,
                                      make_gaussian_probe, nearest_atom_extension, norm, save_field_csv, tensor,
                                      zero_field)


def same_weighted_atoms(mu, nu) -> bool:
    """
    Compares two measures as multisets of weighted atoms
    """
    if mu.size != nu.size:
        return False
    orderMu = np.lexsort(mu.atoms.T[::-1])
    orderNu = np.lexsort(nu.atoms.T[::-1])
    return (np.allclose(mu.atoms[orderMu], nu.atoms[orderNu])
            and np.allclose(mu.weights[orderMu], nu.weights[orderNu]))


class Test(TestCase):
    def setUp(self):
        self.m = make_empirical(np.array([[0.0], [2.0]]))

    def test_inner_examples(self):
        Y = LiftedField(np.array([[[1.0], [3.0]]]), self.m)
        self.assertEqual(inner(zero_field(self.m), Y), 0.0)
        self.assertAlmostEqual(inner(constant_field(self.m, [1.0]), constant_field(self.m, [1.0])), 1.0)
        self.assertAlmostEqual(inner(identity_field(self.m), identity_field(self.m)), 2.0)
        self.assertAlmostEqual(norm(identity_field(self.m)), np.sqrt(2.0))

    def test_inner_averages_outcomes(self):
        X = LiftedField(np.array([[[1.0], [1.0]], [[3.0], [3.0]]]), self.m)
        self.assertAlmostEqual(inner(X, X), 5.0)
        self.assertAlmostEqual(inner(X, constant_field(self.m, [1.0])), 2.0)

    def test_field_rejects_foreign_measure(self):
        other = make_empirical(np.array([[0.0], [3.0]]))
        with self.assertRaises(MeasureMismatchError):
            inner(identity_field(self.m), identity_field(other))
        with self.assertRaises(MeasureMismatchError):
            LiftedField(np.zeros((1, 3, 1)), self.m)
        with self.assertRaises(MeasureMismatchError):
            tensor(identity_field(self.m), other)

    def test_field_rejects_non_finite_values(self):
        with self.assertRaises(ValueError):
            LiftedField(np.array([[[np.nan], [0.0]]]), self.m)

    def test_tensor_examples(self):
        self.assertTrue(same_weighted_atoms(tensor(identity_field(self.m), self.m), self.m))
        constant = tensor(constant_field(self.m, [4.0]))
        self.assertTrue(np.allclose(constant.atoms, 4.0))
        self.assertAlmostEqual(w2_distance(constant, make_empirical(np.array([[4.0]]))), 0.0)
        m = make_empirical(np.array([[0.0], [1.0]]))
        doubled = tensor(LiftedField(2 * m.atoms[None], m))
        self.assertTrue(same_weighted_atoms(doubled, make_empirical(np.array([[0.0], [2.0]]))))

    def test_tensor_of_random_field_splits_weight_over_outcomes(self):
        X = LiftedField(np.array([[[1.0], [2.0]], [[5.0], [6.0]]]), self.m)
        pushed = tensor(X)
        self.assertEqual(pushed.size, 4)
        self.assertTrue(np.allclose(pushed.weights, 0.25))
        self.assertAlmostEqual(float(pushed.mean()[0]), 3.5)

    def test_compose_examples(self):
        m = make_empirical(np.array([[0.0], [1.0]]))
        doubled = LiftedField(2 * m.atoms[None], m)
        shifted = FieldFunction.deterministic(lambda points: points + 1)
        self.assertTrue(np.allclose(compose(shifted, doubled).values[0, :, 0], [1.0, 3.0]))
        self.assertTrue(np.allclose(compose(FieldFunction.identity(), doubled).values, doubled.values))
        self.assertTrue(np.allclose(compose(shifted, identity_field(m)).values,
                                    shifted.on_measure(m).values))

    def test_tensor_associativity_on_random_instances(self):
        for seed in range(5):
            m = random_measure(seed, 4, 2)
            rng = np.random.default_rng(seed)
            Y = LiftedField(rng.standard_normal((3, 4, 2)), m)
            A = rng.standard_normal((2, 2))
            X = FieldFunction.deterministic(lambda points: np.sin(points) @ A)
            left = tensor(compose(X, Y))
            right = tensor(X.on_measure(tensor(Y)))
            self.assertTrue(same_weighted_atoms(left, right))

    def test_random_outer_field_matches_outcomes(self):
        m = make_empirical(np.array([[0.0], [1.0]]))
        shifts = np.array([10.0, 20.0])
        outer = FieldFunction(lambda points: points + shifts[:, None, None], numOutcomes=2)
        composed = compose(outer, identity_field(m))
        self.assertTrue(np.allclose(composed.values[:, :, 0], [[10.0, 11.0], [20.0, 21.0]]))

    def test_nearest_atom_extension(self):
        X = LiftedField(np.array([[[5.0], [7.0]]]), self.m)
        extended = nearest_atom_extension(X)
        values = extended.evaluate(np.array([[[0.4], [1.9], [-3.0]]]))
        self.assertTrue(np.allclose(values[0, :, 0], [5.0, 7.0, 5.0]))

    def test_lipschitz_bound_of_push_forward(self):
        for seed in range(5):
            m = random_measure(seed, 5, 1)
            rng = np.random.default_rng(seed)
            X = LiftedField(rng.standard_normal((1, 5, 1)), m)
            Y = LiftedField(rng.standard_normal((1, 5, 1)), m)
            self.assertLessEqual(w2_distance(tensor(X), tensor(Y)), norm(X - Y) + 1e-12)

    def test_gaussian_probe(self):
        probe = make_gaussian_probe(6, 2, seed=4, antithetic=True)
        self.assertEqual(probe.numOutcomes, 6)
        self.assertTrue(np.allclose(probe.samples.mean(axis=0), 0.0))
        field = probe.as_field(make_empirical(np.zeros((2, 2))), sigma=2 * np.eye(2))
        self.assertEqual(field.values.shape, (6, 2, 2))
        self.assertTrue(np.allclose(field.values[:, 0], 2 * probe.samples))
        self.assertTrue(np.allclose(field.values[:, 0], field.values[:, 1]))
        with self.assertRaises(ValueError):
            make_gaussian_probe(5, 1, seed=0, antithetic=True)
        again = make_gaussian_probe(6, 2, seed=4, antithetic=True)
        self.assertTrue(np.array_equal(again.samples, probe.samples))

    def test_save_field_csv(self):
        X = LiftedField(np.arange(4.0).reshape(2, 2, 1), self.m)
        with tempfile.TemporaryDirectory() as directory:
            filepath = os.path.join(directory, "field.csv")
            save_field_csv(X, filepath)
            table = pd.read_csv(filepath)
        self.assertEqual(list(table.columns), ["omega", "atom", "c_1"])
        self.assertTrue(np.allclose(table["c_1"], [0.0, 1.0, 2.0, 3.0]))
        self.assertTrue(np.array_equal(table["omega"], [0, 0, 1, 1]))
