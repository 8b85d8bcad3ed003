import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.functionals.FunctionalModels import FunctionalModel
from src.measures.EmpiricalMeasure import EmpiricalMeasure, make_empirical, resample_measure, with_probe_atoms
from src.measures.LiftedField import identity_field
from src.solvers.ForwardBackward import PathBundle, h_norm, pushed_measure, solve_first_order, solve_x_derivative
from src.solvers.RandomStreams import RESTART_STREAM_BASE
from src.solvers.SolverConfig import SolverConfig, TimeGrid

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)


@dataclass
class ValueReport:
    """
    V(m, t) with its functional derivative at every atom of m followed by the probe points.
    Probe rows have weight 0. hessDeltaV (D^2 dV/dm) is only filled when the x-derivative system was solved
    """
    t: float
    V: float
    atoms: NDArray
    weights: NDArray
    deltaV: NDArray
    gradDeltaV: NDArray
    growthRatio: float
    bundle: PathBundle
    hessDeltaV: NDArray = None
    xDerivative: PathBundle = None
    provenance: dict = field(default_factory=dict)

    @property
    def numRealAtoms(self) -> int:
        return int(self.provenance.get("numRealAtoms", len(self.atoms)))

    def normalization_error(self) -> float:
        """
        :return: |sum_i w_i deltaV(x_i)|
        """
        return float(abs(self.weights @ self.deltaV))

    def to_frame(self) -> pd.DataFrame:
        d = self.atoms.shape[1]
        table = pd.DataFrame(self.atoms, columns=["x_" + str(i + 1) for i in range(d)])
        table["weight"] = self.weights
        table["delta_V"] = self.deltaV
        for i in range(d):
            table["grad_delta_V_" + str(i + 1)] = self.gradDeltaV[:, i]
        return table

    def summary(self) -> dict:
        values = {"t": self.t, "V": self.V, "growth_ratio": self.growthRatio,
                  "normalization_error": self.normalization_error()}
        values.update(self.provenance)
        return values


def grid_from(grid: TimeGrid, t: float) -> TimeGrid:
    """
    :return: The tail of grid that starts at t. Raises GridError when t is not a grid point
    """
    if np.isclose(t, grid.t0):
        return grid
    if np.isclose(t, grid.T):
        return grid.tail(grid.numSteps)
    return grid.tail(grid.steps_for(t - grid.t0))


def running_cost(bundle: PathBundle, F: FunctionalModel, lam: float, steps: int) -> float:
    """
    :return: sum_{k < steps} dt / (2 lambda) ||Z_k||^2 + sum_{1 <= k <= steps} dt F(Y_k (x) m)
    """
    dt = bundle.grid.dt
    weights = bundle.measure.weights
    control = sum(dt / (2 * lam) * h_norm(bundle.Z[k], weights) ** 2 for k in range(steps))
    return control + sum(dt * F.value(bundle.flow(k)) for k in range(1, steps + 1))


def bundle_value(bundle: PathBundle, F: FunctionalModel, F_T: FunctionalModel, lam: float) -> float:
    """
    Cost of the optimal control v = -Z / lambda carried by a converged first-order bundle
    """
    K = bundle.grid.numSteps
    return running_cost(bundle, F, lam, K) + F_T.value(bundle.flow(K))


def _envelope_delta(bundle: PathBundle, F: FunctionalModel, F_T: FunctionalModel, lam: float,
                    realWeights: NDArray) -> NDArray:
    """
    Per-atom cost of the optimally controlled particle started at each atom, with the measure flow frozen:
    E[ sum dt / (2 lambda) |Z_x|^2 + sum dt dF/dm(Y_k (x) m)(Y_x) + dF_T/dm(Y_K (x) m)(Y_x(K)) ],
    normalized to integrate to 0 against m
    """
    K, dt = bundle.grid.numSteps, bundle.grid.dt
    perAtom = np.zeros(bundle.measure.size)
    for k in range(K):
        perAtom += dt / (2 * lam) * np.sum(bundle.Z[k] ** 2, axis=2).mean(axis=0)
    for k in range(1, K + 1):
        values = F.delta(bundle.flow(k), bundle.Y[k].reshape(-1, bundle.measure.dim))
        perAtom += dt * values.reshape(bundle.Y[k].shape[:2]).mean(axis=0)
    terminal = F_T.delta(bundle.flow(K), bundle.Y[K].reshape(-1, bundle.measure.dim))
    perAtom += terminal.reshape(bundle.Y[K].shape[:2]).mean(axis=0)
    return perAtom - realWeights @ perAtom


def value(m: EmpiricalMeasure, t: float, grid: TimeGrid, cfg: SolverConfig, F: FunctionalModel, F_T: FunctionalModel,
          probes: NDArray = None, withHessian: bool = False) -> ValueReport:
    """
    V(m, t) at the identity lift from the first-order system on the tail of grid starting at t.
    deltaV is dV/dm by the envelope identity, gradDeltaV is Z_{x m t}(t), hessDeltaV is calZ_{x m t}(t)
    :param probes: Extra points, carried as zero-weight atoms, at which the derivatives are also reported
    """
    tail = grid_from(grid, t)
    measure = m if probes is None else with_probe_atoms(m, probes)
    realWeights = np.concatenate([m.weights, np.zeros(measure.size - m.size)])
    bundle = solve_first_order(F, F_T, identity_field(measure), tail, cfg)
    V = bundle_value(bundle, F, F_T, cfg.lam)
    deltaV = _envelope_delta(bundle, F, F_T, cfg.lam, realWeights)
    gradDeltaV = bundle.Z[0].mean(axis=0)
    xDerivative, hessDeltaV = None, None
    if withHessian:
        xDerivative = solve_x_derivative(bundle, F, F_T, cfg)
        hessDeltaV = xDerivative.Z[0].mean(axis=0)
    growthRatio = abs(V) / (1.0 + m.second_moment())
    provenance = {"lam": cfg.lam, "numOutcomes": bundle.numOutcomes, "numSteps": tail.numSteps, "dt": tail.dt,
                  "seed": cfg.seed, "basisDegree": cfg.basisDegree, "iterations": bundle.iterations,
                  "residual": bundle.residual, "numRealAtoms": m.size}
    logging.info("Value at t=" + str(t) + ": " + str(V))
    return ValueReport(t, V, measure.atoms, realWeights, deltaV, gradDeltaV, growthRatio, bundle, hessDeltaV,
                       xDerivative, provenance)


def restart_measure(bundle: PathBundle, step: int, cfg: SolverConfig) -> EmpiricalMeasure:
    """
    Y(s_step) (x) m, capped at N * populationCap atoms by multinomial resampling
    """
    population = pushed_measure(bundle.Y[step], bundle.measure.weights)
    kept = population.weights > 0
    population = make_empirical(population.atoms[kept], population.weights[kept])
    cap = bundle.measure.size * cfg.populationCap
    if population.size > cap:
        logging.warning("Restart population of " + str(population.size) + " atoms resampled to " + str(cap))
    return resample_measure(population, cap, cfg.seed + RESTART_STREAM_BASE + step)


@dataclass
class DPPReport:
    t: float
    V: float
    rows: List[dict]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["h", "steps", "running", "restart_value", "restart_atoms",
                                                "residual"])

    @property
    def residuals(self) -> NDArray:
        return np.array([row["residual"] for row in self.rows])


def dpp_residual(m: EmpiricalMeasure, t: float, hs: Sequence[float], grid: TimeGrid, cfg: SolverConfig,
                 F: FunctionalModel, F_T: FunctionalModel) -> DPPReport:
    """
    |V(m, t) - [running cost on [t, t + h] + V(Y(t + h) (x) m, t + h)]| for every h, the inner value coming from a
    solve restarted from the population Y(t + h) (x) m on the same Brownian increments
    """
    tail = grid_from(grid, t)
    bundle = solve_first_order(F, F_T, identity_field(m), tail, cfg)
    K = tail.numSteps
    V = running_cost(bundle, F, cfg.lam, K) + F_T.value(bundle.flow(K))
    rows = []
    for h in hs:
        steps = tail.steps_for(h)
        running = running_cost(bundle, F, cfg.lam, steps)
        if steps == K:
            restartValue, restartAtoms = F_T.value(bundle.flow(K)), bundle.numOutcomes * m.size
        else:
            restart = restart_measure(bundle, steps, cfg)
            restartBundle = solve_first_order(F, F_T, identity_field(restart), tail.tail(steps), cfg)
            restartValue, restartAtoms = bundle_value(restartBundle, F, F_T, cfg.lam), restart.size
        residual = abs(V - (running + restartValue))
        logging.info("DPP residual at h=" + str(h) + ": " + str(residual))
        rows.append({"h": h, "steps": steps, "running": running, "restart_value": restartValue,
                     "restart_atoms": restartAtoms, "residual": residual})
    return DPPReport(t, V, rows)


def _identity_size(m: EmpiricalMeasure) -> float:
    """
    :return: ||X||_H for the identity lift, sqrt(int |x|^2 dm)
    """
    return float(np.sqrt(m.second_moment()))


def _field_gap(first: NDArray, second: NDArray, weights: NDArray) -> float:
    return float(np.sqrt(weights @ np.sum((first - second) ** 2, axis=1)))


@dataclass
class RegularityReport:
    rows: List[dict]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def time_regularity_probe(m: EmpiricalMeasure, t: float, hs: Sequence[float], grid: TimeGrid, cfg: SolverConfig,
                          F: FunctionalModel, F_T: FunctionalModel) -> RegularityReport:
    """
    Forward differences of V and D_X V in time:
        valueRatio = |V(t + h) - V(t)| / (h (1 + ||X||^2))
        gradientRatio = ||D_X V(t + h) - D_X V(t)|| / ((sqrt(h) + h)(1 + ||X||))
    """
    size = _identity_size(m)
    base = value(m, t, grid, cfg, F, F_T)
    rows = []
    for h in hs:
        later = value(m, t + h, grid, cfg, F, F_T)
        gradientGap = _field_gap(later.gradDeltaV, base.gradDeltaV, m.weights)
        rows.append({"h": h, "V_t": base.V, "V_t_plus_h": later.V,
                     "forward_difference": (later.V - base.V) / h,
                     "value_ratio": abs(later.V - base.V) / (h * (1 + size ** 2)),
                     "gradient_ratio": gradientGap / ((np.sqrt(h) + h) * (1 + size))})
    return RegularityReport(rows)


def growth_probe(m: EmpiricalMeasure, t: float, grid: TimeGrid, cfg: SolverConfig, F: FunctionalModel,
                 F_T: FunctionalModel, scales: Sequence[float] = (1.0, 2.0)) -> RegularityReport:
    """
    Growth of V, Y and Z and the Lipschitz ratio of D_X V along the lifts X = scale * identity
    """
    rows = []
    previous = None
    for scale in scales:
        scaled = make_empirical(scale * m.atoms, m.weights)
        report = value(scaled, t, grid, cfg, F, F_T)
        size = _identity_size(scaled)
        bundle = report.bundle
        row = {"scale": scale, "norm_X": size, "V": report.V,
               "value_ratio": abs(report.V) / (1 + size ** 2),
               "Y_ratio": max(bundle.h_norms(bundle.Y)) / (1 + size),
               "Z_ratio": max(bundle.h_norms(bundle.Z)) / (1 + size),
               "lipschitz_ratio": float("nan")}
        if previous is not None and scale != previous[0]:
            gap = _field_gap(report.gradDeltaV, previous[1], m.weights)
            row["lipschitz_ratio"] = gap / (abs(scale - previous[0]) * _identity_size(m))
        previous = (scale, report.gradDeltaV)
        rows.append(row)
    return RegularityReport(rows)


@dataclass
class ReplicationResult:
    values: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def stderr(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return float(np.std(self.values, ddof=1) / np.sqrt(len(self.values)))


def replicate(fn: Callable[[int], float], seed: int, replications: int = 8, threads: int = 1) -> ReplicationResult:
    """
    Runs fn(seed + k) for k < replications. Results are returned in replication order whatever the thread count
    """
    if replications < 1:
        raise ValueError("At least one replication is required")
    seeds = [seed + k for k in range(replications)]
    if threads <= 1:
        return ReplicationResult([float(fn(s)) for s in seeds])
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return ReplicationResult([float(result) for result in executor.map(fn, seeds)])
