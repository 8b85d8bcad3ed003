import os
import tempfile
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from src.measures.EmpiricalMeasure import (dirac, integrate, load_measure_csv, make_empirical, mix,
                                           perturb_toward_dirac, random_measure, resample_measure,
                                           save_measure_csv, w2_distance, with_probe_atoms)


def measures(maxAtoms=5, d=1):
    """
    Random empirical measures with bounded atoms and weights bounded away from 0
    """
    coordinates = st.floats(min_value=-5, max_value=5, allow_nan=False, allow_infinity=False)
    return st.integers(min_value=1, max_value=maxAtoms).flatmap(
        lambda n: st.tuples(st.lists(st.lists(coordinates, min_size=d, max_size=d), min_size=n, max_size=n),
                            st.lists(st.floats(min_value=0.1, max_value=1.0), min_size=n, max_size=n))
    ).map(lambda pair: make_empirical(np.array(pair[0]), np.array(pair[1])))


class Test(TestCase):
    def test_make_empirical_uniform_default(self):
        m = make_empirical(np.array([[0.0], [1.0]]))
        self.assertTrue(np.allclose(m.atoms, [[0.0], [1.0]]))
        self.assertTrue(np.allclose(m.weights, [0.5, 0.5]))

    def test_make_empirical_normalizes(self):
        m = make_empirical(np.array([[2.0, 3.0]]), [5.0])
        self.assertEqual(m.size, 1)
        self.assertEqual(m.dim, 2)
        self.assertAlmostEqual(m.weights[0], 1.0)

        m = make_empirical(np.array([[0.0], [0.0]]), [1.0, 3.0])
        self.assertTrue(np.allclose(m.weights, [0.25, 0.75]))

    def test_make_empirical_rejects_bad_input(self):
        with self.assertRaises(ValueError):
            make_empirical(np.zeros((0, 1)))
        with self.assertRaises(ValueError):
            make_empirical(np.array([[0.0], [1.0]]), [-1.0, 2.0])
        with self.assertRaises(ValueError):
            make_empirical(np.array([[0.0], [1.0]]), [0.0, 0.0])

    def test_measure_is_immutable(self):
        m = make_empirical(np.array([[0.0], [1.0]]))
        with self.assertRaises(ValueError):
            m.atoms[0, 0] = 3.0

    def test_tag_depends_on_content(self):
        first = make_empirical(np.array([[0.0], [1.0]]))
        second = make_empirical(np.array([[0.0], [1.0]]))
        third = make_empirical(np.array([[0.0], [2.0]]))
        self.assertEqual(first.tag, second.tag)
        self.assertNotEqual(first.tag, third.tag)

    def test_w2_examples(self):
        self.assertAlmostEqual(w2_distance(dirac([1.0, 2.0]), dirac([4.0, 6.0])), 5.0)
        mu = make_empirical(np.array([[0.0], [2.0]]))
        nu = make_empirical(np.array([[1.0], [3.0]]))
        self.assertAlmostEqual(w2_distance(mu, nu), 1.0)
        self.assertAlmostEqual(w2_distance(mu, nu, method="transport"), 1.0)
        self.assertAlmostEqual(w2_distance(mu, mu), 0.0)

    def test_w2_unequal_weights_agree_between_methods(self):
        mu = make_empirical(np.array([[0.0], [1.0], [4.0]]), [0.2, 0.5, 0.3])
        nu = make_empirical(np.array([[0.5], [3.0]]), [0.6, 0.4])
        self.assertAlmostEqual(w2_distance(mu, nu), w2_distance(mu, nu, method="transport"), places=8)

    def test_w2_rejects_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            w2_distance(dirac([0.0]), dirac([0.0, 0.0]))
        with self.assertRaises(ValueError):
            w2_distance(dirac([0.0]), dirac([1.0]), method="sinkhorn")

    @settings(max_examples=30, deadline=None)
    @given(measures(), measures(), measures())
    def test_w2_metric_axioms(self, mu, nu, eta):
        self.assertGreaterEqual(w2_distance(mu, nu), 0.0)
        self.assertAlmostEqual(w2_distance(mu, nu), w2_distance(nu, mu), places=9)
        self.assertAlmostEqual(w2_distance(mu, mu), 0.0, places=9)
        self.assertLessEqual(w2_distance(mu, eta), w2_distance(mu, nu) + w2_distance(nu, eta) + 1e-9)

    @settings(max_examples=15, deadline=None)
    @given(measures(maxAtoms=4, d=2), measures(maxAtoms=4, d=2))
    def test_w2_symmetric_in_two_dimensions(self, mu, nu):
        self.assertAlmostEqual(w2_distance(mu, nu) ** 2, w2_distance(nu, mu) ** 2, places=7)

    def test_integrate_examples(self):
        m = make_empirical(np.array([[0.0], [2.0]]))
        self.assertAlmostEqual(float(integrate(m, lambda x: np.ones(len(x)))), 1.0)
        self.assertAlmostEqual(float(integrate(m, lambda x: x[:, 0])), 1.0)
        self.assertAlmostEqual(float(integrate(m, lambda x: np.sum(x ** 2, axis=1))), 2.0)
        self.assertAlmostEqual(m.second_moment(), 2.0)
        self.assertAlmostEqual(m.variance(), 1.0)

    def test_integrate_rejects_non_finite(self):
        m = make_empirical(np.array([[0.0], [2.0]]))
        with self.assertRaises(ValueError):
            integrate(m, lambda x: 1.0 / x[:, 0])

    def test_mix_and_perturb(self):
        m = make_empirical(np.array([[0.0], [2.0]]))
        mixed = mix(m, dirac([4.0]), 0.25)
        self.assertEqual(mixed.size, 3)
        self.assertTrue(np.allclose(mixed.weights, [0.375, 0.375, 0.25]))
        self.assertAlmostEqual(float(mixed.mean()[0]), 0.75 * 1.0 + 0.25 * 4.0)
        perturbed = perturb_toward_dirac(m, [4.0], 0.25)
        self.assertTrue(np.allclose(perturbed.atoms, mixed.atoms))
        with self.assertRaises(ValueError):
            mix(m, dirac([4.0]), 1.5)

    def test_probe_atoms_keep_the_measure(self):
        m = make_empirical(np.array([[0.0], [2.0]]))
        augmented = with_probe_atoms(m, [[5.0], [7.0]])
        self.assertEqual(augmented.size, 4)
        self.assertTrue(np.allclose(augmented.weights, [0.5, 0.5, 0.0, 0.0]))
        self.assertAlmostEqual(float(augmented.mean()[0]), 1.0)
        with self.assertRaises(ValueError):
            with_probe_atoms(m, [[1.0, 2.0]])

    def test_resample_caps_atom_count(self):
        m = random_measure(3, 50, 2)
        capped = resample_measure(m, 10, seed=1)
        self.assertLessEqual(capped.size, 10)
        self.assertAlmostEqual(capped.weights.sum(), 1.0)
        self.assertIs(resample_measure(m, 50, seed=1), m)
        again = resample_measure(m, 10, seed=1)
        self.assertTrue(np.array_equal(again.atoms, capped.atoms))

    def test_random_measure_is_reproducible(self):
        first = random_measure(4, 6, 2, uniformWeights=False)
        second = random_measure(4, 6, 2, uniformWeights=False)
        self.assertEqual(first.tag, second.tag)
        self.assertNotEqual(first.tag, random_measure(5, 6, 2).tag)

    def test_csv_round_trip(self):
        m = make_empirical(np.array([[0.1, -2.0], [3.5, 1.25]]), [0.3, 0.7])
        with tempfile.TemporaryDirectory() as directory:
            filepath = os.path.join(directory, "measure.csv")
            save_measure_csv(m, filepath)
            loaded = load_measure_csv(filepath)
        self.assertTrue(np.array_equal(loaded.atoms, m.atoms))
        self.assertTrue(np.allclose(loaded.weights, m.weights, atol=1e-15))
