from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.helpers.Errors import MeasureMismatchError
from src.measures.EmpiricalMeasure import EmpiricalMeasure
from src.solvers.RandomStreams import PROBE_STREAM, standard_normals


class LiftedField:
    """
    A random field over (outcomes x atoms of m), i.e. a discretized element of H_m.
    values has shape (M, N, *components): M equiprobable outcomes, N atoms, and either a vector (d,)
    or a matrix (d, d) per entry. A deterministic field has M = 1 and is broadcast on demand
    """

    def __init__(self, values: NDArray, measure: EmpiricalMeasure):
        values = np.array(values, dtype=float)
        if values.ndim < 3:
            raise ValueError("Field values need shape (M, N, d...), got " + str(values.shape))
        if values.shape[1] != measure.size:
            raise MeasureMismatchError("Field has " + str(values.shape[1]) + " atoms but the measure has "
                                       + str(measure.size))
        if values.shape[2] != measure.dim:
            raise MeasureMismatchError("Field components have dimension " + str(values.shape[2])
                                       + " but the measure lives in dimension " + str(measure.dim))
        if not np.all(np.isfinite(values)):
            raise ValueError("Field values must be finite")
        values.setflags(write=False)
        self.values = values
        self.measure = measure
        self.measureTag = measure.tag

    @property
    def numOutcomes(self) -> int:
        return self.values.shape[0]

    @property
    def numAtoms(self) -> int:
        return self.values.shape[1]

    @property
    def componentShape(self) -> tuple:
        return self.values.shape[2:]

    def broadcast(self, numOutcomes: int) -> "LiftedField":
        if self.numOutcomes == numOutcomes:
            return self
        if self.numOutcomes != 1:
            raise ValueError("Cannot broadcast a field with " + str(self.numOutcomes) + " outcomes to "
                             + str(numOutcomes))
        return LiftedField(np.broadcast_to(self.values, (numOutcomes,) + self.values.shape[1:]), self.measure)

    def _combine(self, other, operation) -> "LiftedField":
        if isinstance(other, LiftedField):
            _check_same_measure(self, other)
            return LiftedField(operation(self.values, other.values), self.measure)
        return LiftedField(operation(self.values, other), self.measure)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, scalar: float):
        return LiftedField(scalar * self.values, self.measure)

    __rmul__ = __mul__

    def __neg__(self):
        return LiftedField(-self.values, self.measure)

    def outcome_mean(self) -> NDArray:
        """
        :return: N x components array of the expectation over outcomes at each atom
        """
        return self.values.mean(axis=0)

    def to_string(self):
        return ("LiftedField(M=" + str(self.numOutcomes) + ", N=" + str(self.numAtoms) + ", components="
                + str(self.componentShape) + ", measure=" + self.measureTag + ")")


class FieldFunction:
    """
    A random field defined at every point of R^d rather than on the atoms of one measure.
    func maps an (M, P, d) array of points, one block per outcome, to (M, P, k) values.
    numOutcomes is 1 for deterministic fields, which accept any number of outcome blocks
    """

    def __init__(self, func: Callable, numOutcomes: int = 1):
        self.func = func
        self.numOutcomes = numOutcomes

    @classmethod
    def deterministic(cls, pointwise: Callable) -> "FieldFunction":
        """
        :param pointwise: Function mapping a P x d array of points to a P x k array
        """
        def evaluate(points):
            flat = points.reshape(-1, points.shape[-1])
            values = np.asarray(pointwise(flat), dtype=float)
            return values.reshape(points.shape[:-1] + values.shape[1:])
        return cls(evaluate, 1)

    @classmethod
    def identity(cls) -> "FieldFunction":
        return cls(lambda points: np.array(points, dtype=float), 1)

    def evaluate(self, points: NDArray) -> NDArray:
        points = np.asarray(points, dtype=float)
        if self.numOutcomes != 1 and points.shape[0] not in (1, self.numOutcomes):
            raise ValueError("Field has " + str(self.numOutcomes) + " outcomes but was given "
                             + str(points.shape[0]) + " outcome blocks")
        if self.numOutcomes != 1 and points.shape[0] == 1:
            points = np.broadcast_to(points, (self.numOutcomes,) + points.shape[1:])
        return self.func(points)

    def on_measure(self, m: EmpiricalMeasure) -> LiftedField:
        return LiftedField(self.evaluate(m.atoms[None, :, :]), m)


def nearest_atom_extension(X: LiftedField) -> FieldFunction:
    """
    Extends a field known only on the atoms of its measure to all of R^d by reading the nearest atom
    """
    atoms = X.measure.atoms

    def evaluate(points):
        distances = np.sum((points[..., None, :] - atoms) ** 2, axis=-1)
        nearest = np.argmin(distances, axis=-1)
        outcomes = np.arange(points.shape[0])[:, None] if X.numOutcomes > 1 else np.zeros((points.shape[0], 1), int)
        return X.values[outcomes, nearest]
    return FieldFunction(evaluate, X.numOutcomes)


def _check_same_measure(X: LiftedField, Y: LiftedField):
    if X.measureTag != Y.measureTag:
        raise MeasureMismatchError("Fields are attached to different measures (" + X.measureTag + " vs "
                                   + Y.measureTag + ")")
    if X.numOutcomes != Y.numOutcomes and 1 not in (X.numOutcomes, Y.numOutcomes):
        raise ValueError("Outcome counts " + str(X.numOutcomes) + " and " + str(Y.numOutcomes)
                         + " cannot be broadcast")


def inner(X: LiftedField, Y: LiftedField) -> float:
    """
    :return: (1/M) sum_omega sum_i w_i X(omega, x_i) . Y(omega, x_i)
    """
    _check_same_measure(X, Y)
    products = X.values * Y.values
    products = products.reshape(products.shape[:2] + (-1,)).sum(axis=2)
    return float((products @ X.measure.weights).mean())


def norm(X: LiftedField) -> float:
    return float(np.sqrt(max(inner(X, X), 0.0)))


def tensor(X: LiftedField, m: EmpiricalMeasure = None) -> EmpiricalMeasure:
    """
    :return: X (x) m, the measure with atoms X(omega_j, x_i) and weights w_i / M. Duplicates are not merged
    """
    if m is not None and m.tag != X.measureTag:
        raise MeasureMismatchError("Field is attached to measure " + X.measureTag + ", not " + m.tag)
    if X.componentShape != (X.measure.dim,):
        raise ValueError("Only vector fields can be pushed forward, got components " + str(X.componentShape))
    M = X.numOutcomes
    atoms = X.values.reshape(M * X.numAtoms, X.measure.dim)
    weights = np.tile(X.measure.weights, M) / M
    return EmpiricalMeasure(atoms, weights / weights.sum())


def compose(outer: FieldFunction, inner: LiftedField) -> LiftedField:
    """
    :return: The field (outer o inner)(omega, x) = outer(omega, inner(omega, x)) with matched outcomes
    """
    if outer.numOutcomes not in (1, inner.numOutcomes):
        if inner.numOutcomes != 1:
            raise ValueError("Cannot compose a field with " + str(outer.numOutcomes) + " outcomes with one having "
                             + str(inner.numOutcomes))
        inner = inner.broadcast(outer.numOutcomes)
    values = outer.evaluate(inner.values)
    if values.shape[:2] != inner.values.shape[:2]:
        raise ValueError("Composed field has shape " + str(values.shape) + ", expected leading "
                         + str(inner.values.shape[:2]))
    return LiftedField(values, inner.measure)


def identity_field(m: EmpiricalMeasure) -> LiftedField:
    return LiftedField(m.atoms[None, :, :], m)


def constant_field(m: EmpiricalMeasure, a) -> LiftedField:
    a = np.asarray(a, dtype=float).reshape(-1)
    return LiftedField(np.broadcast_to(a, (1, m.size, len(a))), m)


def zero_field(m: EmpiricalMeasure, numOutcomes: int = 1) -> LiftedField:
    return LiftedField(np.zeros((numOutcomes, m.size, m.dim)), m)


@dataclass(frozen=True)
class GaussianProbe:
    samples: NDArray
    seed: int

    @property
    def numOutcomes(self) -> int:
        return len(self.samples)

    def as_field(self, m: EmpiricalMeasure, sigma=None) -> LiftedField:
        """
        :return: The field (omega, x) -> sigma N(omega), constant across atoms
        """
        directions = self.samples if sigma is None else self.samples @ np.asarray(sigma, dtype=float).T
        return LiftedField(np.broadcast_to(directions[:, None, :], (self.numOutcomes, m.size, m.dim)), m)


def make_gaussian_probe(numOutcomes: int, d: int, seed: int, antithetic: bool = False) -> GaussianProbe:
    """
    Standard normal draws from a stream disjoint from the Brownian one.
    With antithetic=True the second half of the outcomes mirrors the first, so the empirical mean is exactly 0
    """
    if antithetic:
        if numOutcomes % 2 != 0:
            raise ValueError("Antithetic probes need an even number of outcomes, got " + str(numOutcomes))
        half = standard_normals(seed, PROBE_STREAM, numOutcomes // 2, (d,))
        samples = np.concatenate([half, -half])
    else:
        samples = standard_normals(seed, PROBE_STREAM, numOutcomes, (d,))
    return GaussianProbe(samples, seed)


def save_field_csv(X: LiftedField, filepath: str):
    M, N = X.numOutcomes, X.numAtoms
    flat = X.values.reshape(M * N, -1)
    table = pd.DataFrame(flat, columns=["c_" + str(i + 1) for i in range(flat.shape[1])])
    table.insert(0, "atom", np.tile(np.arange(N), M))
    table.insert(0, "omega", np.repeat(np.arange(M), N))
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(filepath, index=False, float_format="%.17g")
