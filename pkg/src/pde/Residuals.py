import logging
import sys
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.control.ValueFunction import grid_from, restart_measure, value
from src.functionals.FunctionalModels import FunctionalModel
from src.helpers.Errors import ConvergenceError, InvariantViolation
from src.measures.EmpiricalMeasure import EmpiricalMeasure, dirac, mix, with_probe_atoms
from src.measures.LiftedField import GaussianProbe, identity_field, make_gaussian_probe
from src.oracle.LQOracle import LQSpec, RiccatiSolution, lq_functionals, lq_time_derivative, lq_value, riccati_solve
from src.solvers.ForwardBackward import (PathBundle, flatten_outcomes, solve_first_order, solve_measure_derivative,
                                         solve_second_order, solve_x_derivative)
from src.solvers.RandomStreams import brownian_increments
from src.solvers.SolverConfig import SolverConfig, TimeGrid

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)

ACCOUNTING_TOLERANCE = 1e-12


def operator_A(hessian: NDArray, sigma: NDArray) -> NDArray:
    """
    A H = -1/2 tr(sigma sigma^* H), for a single d x d matrix or a stack of them
    """
    hessian = np.asarray(hessian, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    if sigma.shape != (d, d) or hessian.shape[-2:] != (d, d):
        raise ValueError("Hessian of shape " + str(hessian.shape) + " does not match sigma of shape "
                         + str(sigma.shape))
    values = -0.5 * np.einsum("ab,...ba->...", sigma @ sigma.T, hessian)
    return float(values) if values.ndim == 0 else values


@dataclass
class ResidualReport:
    """
    Residual of the Bellman (one row) or Master (one row per probe x) equation with its additive components
    """
    kind: str
    t: float
    components: Dict[str, NDArray]
    probes: NDArray = None
    terminalError: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.components = {name: np.atleast_1d(np.asarray(values, dtype=float))
                           for name, values in self.components.items()}
        self.residual = np.sum(list(self.components.values()), axis=0) if self.components else np.zeros(1)
        self.check_accounting()

    def check_accounting(self):
        total = np.zeros_like(self.residual)
        for values in self.components.values():
            total = total + values
        if np.max(np.abs(total - self.residual)) > ACCOUNTING_TOLERANCE * max(1.0, np.max(np.abs(total))):
            raise InvariantViolation("Residual components do not add up to the " + self.kind + " residual")

    @property
    def maxAbsResidual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for index in range(len(self.residual)):
            row = {"probe": index, "t": self.t}
            if self.probes is not None:
                for i, coordinate in enumerate(self.probes[index]):
                    row["x_" + str(i + 1)] = coordinate
            row["residual"] = self.residual[index]
            for name, values in self.components.items():
                row[name] = values[index]
            row.update(self.metadata)
            rows.append(row)
        return pd.DataFrame(rows)


def _metadata(cfg: SolverConfig, grid: TimeGrid) -> dict:
    return {"dt": grid.dt, "M": cfg.numOutcomes, "seed": cfg.seed}


def _trace_terms(hessians: NDArray, sigma: NDArray) -> NDArray:
    return operator_A(hessians, sigma)


def bellman_residual(m: EmpiricalMeasure, t: float, grid: TimeGrid, cfg: SolverConfig, F: FunctionalModel,
                     F_T: FunctionalModel) -> ResidualReport:
    """
    -dV/dt + int A_x dV/dm dm + 1/(2 lambda) int |D dV/dm|^2 dm - F(m), with the right-hand time difference over one
    grid step and D^2 dV/dm taken from the x-derivative system
    """
    terminal = value(m, grid.T, grid, cfg, F, F_T)
    terminalError = abs(terminal.V - F_T.value(m))
    tail = grid_from(grid, t)
    if tail.numSteps == 0:
        return ResidualReport("bellman", t, {}, terminalError=terminalError, metadata=_metadata(cfg, tail))
    now = value(m, t, grid, cfg, F, F_T, withHessian=True)
    later = value(m, t + tail.dt, grid, cfg, F, F_T)
    weights = m.weights
    components = {
        "time": -(later.V - now.V) / tail.dt,
        "operator_A": float(weights @ _trace_terms(now.hessDeltaV, cfg.sigma)),
        "kinetic": float(weights @ np.sum(now.gradDeltaV ** 2, axis=1)) / (2 * cfg.lam),
        "source": -F.value(m),
    }
    report = ResidualReport("bellman", t, components, terminalError=terminalError, metadata=_metadata(cfg, tail))
    logging.info("Bellman residual at t=" + str(t) + ": " + str(report.maxAbsResidual))
    return report


def master_residual(x: NDArray, m: EmpiricalMeasure, t: float, grid: TimeGrid, cfg: SolverConfig,
                    F: FunctionalModel, F_T: FunctionalModel, fdCrossCheck: bool = False,
                    eps: float = 1e-3) -> ResidualReport:
    """
    Master equation residual at every probe x for U = dV/dm (normalized):
        -dU/dt - 1/2 tr(sigma sigma^* calZ_x) - 1/2 int tr(sigma sigma^* calZbar(xi, x)) dm(xi) + 1/(2 lambda) |Z_x|^2
        + 1/lambda int Z_xi . Zbar(xi, x) dm(xi) - dF/dm(m)(x)
    plus the normalization component 1/2 int tr(sigma sigma^* calZ_xi) dm - 1/(2 lambda) int |Z_xi|^2 dm, which is
    what differentiating the normalization int U dm = 0 in time contributes
    """
    probes = np.atleast_2d(np.asarray(x, dtype=float))
    terminal = value(m, grid.T, grid, cfg, F, F_T, probes=probes)
    terminalError = float(np.max(np.abs(terminal.deltaV[m.size:] - F_T.delta(m, probes))))
    tail = grid_from(grid, t)
    metadata = _metadata(cfg, tail)
    if tail.numSteps == 0:
        return ResidualReport("master", t, {}, probes, terminalError, metadata)

    N, P = m.size, len(probes)
    weights = m.weights
    now = value(m, t, grid, cfg, F, F_T, probes=probes, withHessian=True)
    later = value(m, t + tail.dt, grid, cfg, F, F_T, probes=probes)
    first, xDerivative = now.bundle, now.xDerivative

    Zxi = now.gradDeltaV[:N]
    traceXi = -2 * _trace_terms(now.hessDeltaV[:N], cfg.sigma)
    components = {name: np.zeros(P) for name in ("time", "operator_A", "measure_operator_A", "kinetic", "cross",
                                                 "source", "normalization")}
    components["time"] = -(later.deltaV[N:] - now.deltaV[N:]) / tail.dt
    components["operator_A"] = _trace_terms(now.hessDeltaV[N:], cfg.sigma)
    components["kinetic"] = np.sum(now.gradDeltaV[N:] ** 2, axis=1) / (2 * cfg.lam)
    components["source"] = -F.delta(m, probes)
    components["normalization"] = np.full(P, 0.5 * float(weights @ traceXi)
                                          - float(weights @ np.sum(Zxi ** 2, axis=1)) / (2 * cfg.lam))
    crossChecks = []
    for p in range(P):
        bars = solve_measure_derivative(first, xDerivative, F, F_T, N + p, cfg)
        Zbar = bars.first.Z[0].mean(axis=0)[:N]
        calZbar = bars.second.Z[0].mean(axis=0)[:N]
        components["measure_operator_A"][p] = float(weights @ _trace_terms(calZbar, cfg.sigma))
        components["cross"][p] = float(weights @ np.sum(Zxi * Zbar, axis=1)) / cfg.lam
        for name, bound in bars.bounds.items():
            metadata["bound_" + name] = max(bound, metadata.get("bound_" + name, 0.0))
        if fdCrossCheck:
            crossChecks.append(measure_derivative_fd_check(m, probes[p], t, grid, cfg, F, F_T, eps, Zbar))
    if fdCrossCheck:
        metadata["fd_cross_check"] = max(crossChecks)
    report = ResidualReport("master", t, components, probes, terminalError, metadata)
    logging.info("Master residual at t=" + str(t) + ": " + str(report.maxAbsResidual))
    return report


def measure_derivative_fd_check(m: EmpiricalMeasure, x: NDArray, t: float, grid: TimeGrid, cfg: SolverConfig,
                                F: FunctionalModel, F_T: FunctionalModel, eps: float = 1e-3,
                                Zbar: NDArray = None) -> float:
    """
    Largest gap over the atoms xi of m between Zbar(t, xi, x) and [Z_xi(t; m + eps (delta_x - m)) - Z_xi(t; m)] / eps,
    both solves sharing the Brownian increments. Zbar is solved here when not given
    """
    tail = grid_from(grid, t)
    base = with_probe_atoms(m, x)
    perturbed = mix(m, dirac(np.reshape(x, (1, -1))), eps)
    baseBundle = solve_first_order(F, F_T, identity_field(base), tail, cfg)
    perturbedBundle = solve_first_order(F, F_T, identity_field(perturbed), tail, cfg, dW=baseBundle.dW)
    quotient = (perturbedBundle.Z[0].mean(axis=0) - baseBundle.Z[0].mean(axis=0))[:m.size] / eps
    if Zbar is None:
        xDerivative = solve_x_derivative(baseBundle, F, F_T, cfg)
        bars = solve_measure_derivative(baseBundle, xDerivative, F, F_T, m.size, cfg)
        Zbar = bars.first.Z[0].mean(axis=0)[:m.size]
    return float(np.max(np.abs(quotient - Zbar)))


@dataclass
class FlowReport:
    """
    Trajectories (K + 1, M, P, d) of the probe points x driven by the decoupling field DU along the measure flow
    """
    grid: TimeGrid
    probes: NDArray
    paths: NDArray
    nestedSolves: int

    def mismatch(self, bundle: PathBundle, probeIndices) -> float:
        """
        :return: max over steps and probes of the outcome RMS distance to the matching bundle paths
        """
        reference = bundle.Y[:, :, probeIndices, :]
        return float(np.max(np.sqrt(np.mean(np.sum((self.paths - reference) ** 2, axis=3), axis=1))))


def decoupled_flow(x: NDArray, m: EmpiricalMeasure, t: float, grid: TimeGrid, cfg: SolverConfig,
                   F: FunctionalModel, F_T: FunctionalModel) -> FlowReport:
    """
    Y(s_{k+1}) = Y(s_k) - dt / lambda DU(Y(s_k), mu_k, s_k) + sigma dW_k, where DU at step k comes from a fresh value
    solve started at mu_k = (population at s_k) (x) m. The probes ride along as zero-weight atoms, and the
    Brownian increments are those of solve_first_order with the same config
    """
    tail = grid_from(grid, t)
    K, dt = tail.numSteps, tail.dt
    if K > cfg.maxNestedSolves:
        raise ConvergenceError("Decoupled flow needs " + str(K) + " nested solves, budget is "
                               + str(cfg.maxNestedSolves), float("nan"))
    probes = np.atleast_2d(np.asarray(x, dtype=float))
    augmented = with_probe_atoms(m, probes)
    M, d = cfg.numOutcomes, m.dim
    noise = brownian_increments(seed=cfg.seed, numOutcomes=M, numSteps=K, d=d, dt=dt,
                                firstStep=tail.offset) @ cfg.sigma.T
    states = np.empty((K + 1, M, augmented.size, d))
    states[0] = augmented.atoms
    for k in range(K):
        if k == 0:
            nested = m
        else:
            flowBundle = PathBundle(tail, augmented, states[:k + 1], np.zeros_like(states[:k + 1]), noise, 0, 0.0,
                                    True, 1.0)
            nested = restart_measure(flowBundle, k, cfg)
        nestedBundle = solve_first_order(F, F_T, identity_field(nested), tail.tail(k), cfg)
        fit = nestedBundle.initialFit
        gradients = fit.predict(flatten_outcomes(states[k])).reshape(states[k].shape)
        states[k + 1] = states[k] - dt / cfg.lam * gradients + noise[:, k, None, :]
        logging.info("Decoupled flow step " + str(k + 1) + " of " + str(K))
    return FlowReport(tail, probes, states[:, :, m.size:, :], K)


@dataclass
class GaussianProbeReport:
    lhs: float
    rhs: float
    stderr: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def passed(self) -> bool:
        return self.gap <= 3 * self.stderr + 1e-8 * max(1.0, abs(self.rhs))


def gaussian_probe_check(m: EmpiricalMeasure, t: float, grid: TimeGrid, cfg: SolverConfig, F: FunctionalModel,
                         F_T: FunctionalModel, probe: GaussianProbe = None) -> GaussianProbeReport:
    """
    Compares <D_X^2 V(sigma N), sigma N>, from the second-order system in the direction sigma N, with the trace
    formula int tr(sigma sigma^* D^2 dV/dm) dm from the x-derivative system
    """
    tail = grid_from(grid, t)
    probe = make_gaussian_probe(cfg.numOutcomes, m.dim, cfg.seed) if probe is None else probe
    first = solve_first_order(F, F_T, identity_field(m), tail, cfg)
    direction = probe.as_field(m, cfg.sigma)
    second = solve_second_order(first, direction, F, F_T, cfg)
    xDerivative = solve_x_derivative(first, F, F_T, cfg)
    perOutcome = np.sum(second.Z[0] * direction.values, axis=2) @ m.weights
    rhs = -2 * float(m.weights @ _trace_terms(xDerivative.Z[0].mean(axis=0), cfg.sigma))
    stderr = float(np.std(perOutcome, ddof=1) / np.sqrt(len(perOutcome))) if len(perOutcome) > 1 else 0.0
    return GaussianProbeReport(float(perOutcome.mean()), rhs, stderr)


def oracle_bellman_residual(spec: LQSpec, m: EmpiricalMeasure, t: float,
                            solution: RiccatiSolution = None) -> ResidualReport:
    """
    Bellman residual assembled from the closed-form LQ value and its derivatives
    """
    solution = riccati_solve(spec) if solution is None else solution
    F, F_T = lq_functionals(spec)
    closed = lq_value(spec, m, t, solution)
    dV, _ = lq_time_derivative(spec, m, t, solution=solution)
    components = {
        "time": -dV,
        "operator_A": float(m.weights @ _trace_terms(closed.D2U(m.atoms), spec.sigma)),
        "kinetic": float(m.weights @ np.sum(closed.DU(m.atoms) ** 2, axis=1)) / (2 * spec.lam),
        "source": -F.value(m),
    }
    terminalError = abs(lq_value(spec, m, spec.T, solution).V - F_T.value(m))
    return ResidualReport("bellman", t, components, terminalError=terminalError, metadata={"oracle": True})


def oracle_master_residual(spec: LQSpec, x: NDArray, m: EmpiricalMeasure, t: float,
                           solution: RiccatiSolution = None) -> ResidualReport:
    """
    Master residual assembled from the closed-form U, DU, D^2U, Zbar and calZbar of the LQ oracle
    """
    solution = riccati_solve(spec) if solution is None else solution
    F, F_T = lq_functionals(spec)
    probes = np.atleast_2d(np.asarray(x, dtype=float))
    closed = lq_value(spec, m, t, solution)
    _, dU = lq_time_derivative(spec, m, t, probes, solution)
    weights = m.weights
    Zxi = closed.DU(m.atoms)
    traceXi = -2 * _trace_terms(closed.D2U(m.atoms), spec.sigma)
    P = len(probes)
    cross = np.array([float(weights @ np.sum(Zxi * closed.Zbar(m.atoms, probes[p]), axis=1)) for p in range(P)])
    barTrace = np.array([float(weights @ _trace_terms(closed.calZbar(m.atoms, probes[p]), spec.sigma))
                         for p in range(P)])
    components = {
        "time": -dU,
        "operator_A": _trace_terms(closed.D2U(probes), spec.sigma),
        "measure_operator_A": barTrace,
        "kinetic": np.sum(closed.DU(probes) ** 2, axis=1) / (2 * spec.lam),
        "cross": cross / spec.lam,
        "source": -F.delta(m, probes),
        "normalization": np.full(P, 0.5 * float(weights @ traceXi)
                                 - float(weights @ np.sum(Zxi ** 2, axis=1)) / (2 * spec.lam)),
    }
    terminal = lq_value(spec, m, spec.T, solution)
    terminalError = float(np.max(np.abs(terminal.U(probes) - F_T.delta(m, probes))))
    return ResidualReport("master", t, components, probes, terminalError, {"oracle": True})
