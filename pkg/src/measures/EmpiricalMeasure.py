import hashlib
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix


class EmpiricalMeasure:
    """
    A probability measure on R^d given by N weighted atoms.
    Atoms and weights are copied and frozen at construction, so a measure can be shared freely between workers.
    Use make_empirical to build one from unnormalized weights
    """

    def __init__(self, atoms: NDArray, weights: NDArray):
        atoms = np.array(atoms, dtype=float)
        weights = np.array(weights, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or len(atoms) == 0:
            raise ValueError("Atoms must be a non-empty N x d array, got shape " + str(atoms.shape))
        if weights.shape != (len(atoms),):
            raise ValueError("Expected " + str(len(atoms)) + " weights, got shape " + str(weights.shape))
        if not np.all(np.isfinite(atoms)):
            raise ValueError("Atom coordinates must be finite")
        if np.any(weights < 0):
            raise ValueError("Weights must be nonnegative")
        if abs(weights.sum() - 1) > 1e-12:
            raise ValueError("Weights sum to " + str(weights.sum()) + " instead of 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        self.atoms = atoms
        self.weights = weights
        digest = hashlib.sha1()
        digest.update(np.ascontiguousarray(atoms).tobytes())
        digest.update(np.ascontiguousarray(weights).tobytes())
        self.tag = digest.hexdigest()[:16]

    @property
    def size(self) -> int:
        return len(self.atoms)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> NDArray:
        return self.weights @ self.atoms

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.atoms ** 2, axis=1))

    def variance(self) -> float:
        return self.second_moment() - float(np.sum(self.mean() ** 2))

    def to_string(self):
        return "EmpiricalMeasure(N=" + str(self.size) + ", d=" + str(self.dim) + ", tag=" + self.tag + ")"


def make_empirical(points: NDArray, weights=None) -> EmpiricalMeasure:
    """
    :param points: N x d array of atom positions (a flat array is read as N atoms in dimension 1)
    :param weights: Optional nonnegative weights, normalized to sum to 1. Uniform if omitted
    """
    points = np.array(points, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if points.size == 0 or len(points) == 0:
        raise ValueError("Cannot build an empirical measure from an empty point set")
    if weights is None:
        weights = np.full(len(points), 1.0 / len(points))
    else:
        weights = np.array(weights, dtype=float)
        if np.any(weights < 0):
            raise ValueError("Weights must be nonnegative")
        total = weights.sum()
        if total <= 0:
            raise ValueError("Weights must have a nonzero sum")
        weights = weights / total
        # renormalize once more so the sum is 1 to machine precision
        weights = weights / weights.sum()
    return EmpiricalMeasure(points, weights)


def dirac(point) -> EmpiricalMeasure:
    return make_empirical(np.atleast_2d(np.array(point, dtype=float)))


def mix(m: EmpiricalMeasure, mPrime: EmpiricalMeasure, theta: float) -> EmpiricalMeasure:
    """
    :return: The measure m + theta (mPrime - m), with the atoms of both measures kept side by side
    """
    if m.dim != mPrime.dim:
        raise ValueError("Cannot mix measures of dimension " + str(m.dim) + " and " + str(mPrime.dim))
    if theta < 0 or theta > 1:
        raise ValueError("Mixing weight " + str(theta) + " is outside [0, 1]")
    atoms = np.vstack([m.atoms, mPrime.atoms])
    weights = np.concatenate([(1 - theta) * m.weights, theta * mPrime.weights])
    return make_empirical(atoms, weights)


def perturb_toward_dirac(m: EmpiricalMeasure, x, eps: float) -> EmpiricalMeasure:
    return mix(m, dirac(np.reshape(x, (1, -1))), eps)


def with_probe_atoms(m: EmpiricalMeasure, probes: NDArray) -> EmpiricalMeasure:
    """
    :return: m with the probe points appended as zero-weight atoms. The result equals m as a measure
    """
    probes = np.atleast_2d(np.array(probes, dtype=float))
    if probes.shape[1] != m.dim:
        raise ValueError("Probe points have dimension " + str(probes.shape[1]) + " but the measure has " + str(m.dim))
    return EmpiricalMeasure(np.vstack([m.atoms, probes]), np.concatenate([m.weights, np.zeros(len(probes))]))


def integrate(m: EmpiricalMeasure, g: Callable) -> NDArray:
    """
    :param g: Vectorized function taking an N x d array of points and returning N values or an N x k array
    :return: sum_i w_i g(x_i)
    """
    values = np.asarray(g(m.atoms), dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("Integrand is not finite on every atom")
    if values.ndim == 0:
        values = np.full(m.size, float(values))
    return np.tensordot(m.weights, values, axes=(0, 0))


def _w2_squared_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    # monotone coupling: integrate |F^-1(u) - G^-1(u)|^2 over the merged quantile breakpoints
    orderMu = np.argsort(mu.atoms[:, 0], kind="stable")
    orderNu = np.argsort(nu.atoms[:, 0], kind="stable")
    xMu, wMu = mu.atoms[orderMu, 0], mu.weights[orderMu]
    xNu, wNu = nu.atoms[orderNu, 0], nu.weights[orderNu]
    cdfMu = np.cumsum(wMu)
    cdfNu = np.cumsum(wNu)
    cdfMu[-1] = cdfNu[-1] = 1.0
    breaks = np.union1d(cdfMu, cdfNu)
    lengths = np.diff(np.concatenate([[0.0], breaks]))
    midpoints = breaks - lengths / 2
    iMu = np.minimum(np.searchsorted(cdfMu, midpoints), len(xMu) - 1)
    iNu = np.minimum(np.searchsorted(cdfNu, midpoints), len(xNu) - 1)
    return float(np.sum(lengths * (xMu[iMu] - xNu[iNu]) ** 2))


def _w2_squared_transport(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    cost = np.sum((mu.atoms[:, None, :] - nu.atoms[None, :, :]) ** 2, axis=2)
    uniformMu = np.allclose(mu.weights, mu.weights[0])
    uniformNu = np.allclose(nu.weights, nu.weights[0])
    if mu.size == nu.size and uniformMu and uniformNu:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    n, k = cost.shape
    # marginal constraints of the transportation problem, one row per source and per target atom
    rowIndex = np.concatenate([np.repeat(np.arange(n), k), n + np.tile(np.arange(k), n)])
    colIndex = np.concatenate([np.arange(n * k), np.arange(n * k)])
    constraints = coo_matrix((np.ones(2 * n * k), (rowIndex, colIndex)), shape=(n + k, n * k)).tocsr()
    bounds = np.concatenate([mu.weights, nu.weights])
    result = linprog(cost.reshape(-1), A_eq=constraints[:-1], b_eq=bounds[:-1], bounds=(0, None), method="highs")
    if not result.success:
        raise RuntimeError("Transportation solve failed: " + result.message)
    return max(float(result.fun), 0.0)


def w2_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure, method: str = "auto") -> float:
    """
    :param method: "auto" uses the sorted-quantile coupling in dimension 1 and exact discrete transport otherwise.
    "transport" forces the discrete transport solve in any dimension
    :return: The exact Wasserstein-2 distance between two empirical measures
    """
    if mu.dim != nu.dim:
        raise ValueError("Cannot compare measures of dimension " + str(mu.dim) + " and " + str(nu.dim))
    if method == "auto" and mu.dim == 1:
        return float(np.sqrt(_w2_squared_1d(mu, nu)))
    elif method in ("auto", "transport"):
        return float(np.sqrt(_w2_squared_transport(mu, nu)))
    else:
        raise ValueError(method + " is not a valid W2 method")


def resample_measure(m: EmpiricalMeasure, size: int, seed: int) -> EmpiricalMeasure:
    """
    Caps the atom count of m by multinomial resampling. Atoms drawn k times get weight k / size.
    Measures with at most size atoms are returned unchanged
    """
    if m.size <= size:
        return m
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x5EED]))
    counts = rng.multinomial(size, m.weights)
    kept = counts > 0
    return make_empirical(m.atoms[kept], counts[kept] / size)


def random_measure(seed: int, size: int, d: int, scale: float = 1.0, uniformWeights: bool = True) -> EmpiricalMeasure:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xA70]))
    points = scale * rng.standard_normal((size, d))
    weights = None if uniformWeights else rng.uniform(0.1, 1.0, size)
    return make_empirical(points, weights)


def save_measure_csv(m: EmpiricalMeasure, filepath: str):
    columns = ["x_" + str(i + 1) for i in range(m.dim)]
    table = pd.DataFrame(m.atoms, columns=columns)
    table["weight"] = m.weights
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(filepath, index=False, float_format="%.17g")


def load_measure_csv(filepath: str) -> EmpiricalMeasure:
    table = pd.read_csv(filepath)
    coordinateColumns = [column for column in table.columns if column.startswith("x_")]
    if "weight" not in table.columns or not coordinateColumns:
        raise ValueError(filepath + " must have columns x_1..x_d and weight")
    coordinateColumns.sort(key=lambda column: int(column[2:]))
    return make_empirical(table[coordinateColumns].to_numpy(dtype=float), table["weight"].to_numpy(dtype=float))
