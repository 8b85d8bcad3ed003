import logging
import sys
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.functionals.FunctionalModels import FunctionalModel
from src.helpers.Errors import ConvergenceError
from src.measures.EmpiricalMeasure import EmpiricalMeasure
from src.measures.LiftedField import LiftedField
from src.solvers.ForwardBackward import (PathBundle, cumulative_targets, first_order_sources, forward_states,
                                         flatten_outcomes, pushed_measure, regress_steps)
from src.solvers.RandomStreams import brownian_increments
from src.solvers.Regression import regress_conditional
from src.solvers.SolverConfig import SolverConfig, TimeGrid, assumption_constants

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)

REPRESENTATIONS = ("open-loop", "feedback")
MAX_HALVINGS = 10


@dataclass
class ControlPath:
    """
    Control v(s_k) for k = 0..K-1, stored as a (K, M, N, d) array over outcomes and atoms of `measure`.
    "open-loop" controls are arbitrary per-outcome arrays; "feedback" controls are polynomial functions of the
    current state, which makes them adapted by construction
    """
    grid: TimeGrid
    v: NDArray
    measure: EmpiricalMeasure
    representation: str = "open-loop"

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if self.representation not in REPRESENTATIONS:
            raise ValueError(self.representation + " is not a valid control representation")
        if self.v.ndim != 4 or self.v.shape[0] != self.grid.numSteps or self.v.shape[2] != self.measure.size \
                or self.v.shape[3] != self.measure.dim:
            raise ValueError("Control array of shape " + str(self.v.shape) + " does not match the grid and measure")
        if not np.all(np.isfinite(self.v)):
            raise ValueError("Control values must be finite")

    @property
    def numOutcomes(self) -> int:
        return self.v.shape[1]

    def step(self, k: int) -> LiftedField:
        return LiftedField(self.v[k], self.measure)

    def inner(self, other: "ControlPath") -> float:
        """
        :return: int_t^T <v(s), w(s)>_H ds with the grid's left-point rule
        """
        weights = self.measure.weights
        products = np.sum(self.v * other.v, axis=3)
        return float(self.grid.dt * np.sum(products.mean(axis=1) @ weights))

    def squared_norm(self) -> float:
        return self.inner(self)

    def with_values(self, v: NDArray) -> "ControlPath":
        return ControlPath(self.grid, v, self.measure, self.representation)

    def __add__(self, other: "ControlPath") -> "ControlPath":
        return self.with_values(self.v + other.v)

    def __sub__(self, other: "ControlPath") -> "ControlPath":
        return self.with_values(self.v - other.v)

    def __mul__(self, scalar: float) -> "ControlPath":
        return self.with_values(scalar * self.v)

    __rmul__ = __mul__


def zero_control(grid: TimeGrid, m: EmpiricalMeasure, numOutcomes: int,
                 representation: str = "open-loop") -> ControlPath:
    return ControlPath(grid, np.zeros((grid.numSteps, numOutcomes, m.size, m.dim)), m, representation)


def control_from_adjoint(bundle: PathBundle, lam: float) -> ControlPath:
    """
    :return: The optimal control v = -Z / lambda of a first-order bundle
    """
    return ControlPath(bundle.grid, -bundle.Z[:-1] / lam, bundle.measure, "feedback")


def _initial_states(X0: LiftedField, M: int) -> NDArray:
    return np.broadcast_to(X0.values, (M,) + X0.values.shape[1:]).copy()


def _noise(cfg: SolverConfig, grid: TimeGrid, M: int, d: int) -> NDArray:
    dW = brownian_increments(seed=cfg.seed, numOutcomes=M, numSteps=grid.numSteps, d=d, dt=grid.dt,
                             firstStep=grid.offset)
    return dW @ cfg.sigma.T


def simulate_state(v: ControlPath, X0: LiftedField, cfg: SolverConfig) -> NDArray:
    """
    X(s_{k+1}) = X(s_k) + dt v(s_k) + sigma dW_k with the Brownian increments of cfg.seed, shape (K + 1, M, N, d)
    """
    if X0.measureTag != v.measure.tag:
        raise ValueError("Initial field and control are attached to different measures")
    M = v.numOutcomes
    return forward_states(_initial_states(X0, M), v.v, _noise(cfg, v.grid, M, v.measure.dim), v.grid.dt)


def cost(v: ControlPath, X0: LiftedField, cfg: SolverConfig, F: FunctionalModel, F_T: FunctionalModel) -> float:
    """
    J(v) = lambda/2 int ||v||^2 ds + int F(X(s) (x) m) ds + F_T(X(T) (x) m), with the running cost taken at the
    right end of every step
    """
    states = simulate_state(v, X0, cfg)
    return _cost_of_states(v, states, cfg, F, F_T)


def _cost_of_states(v: ControlPath, states: NDArray, cfg: SolverConfig, F: FunctionalModel,
                    F_T: FunctionalModel) -> float:
    K, dt = v.grid.numSteps, v.grid.dt
    weights = v.measure.weights
    running = sum(dt * F.value(pushed_measure(states[k], weights)) for k in range(1, K + 1))
    return 0.5 * cfg.lam * v.squared_norm() + running + F_T.value(pushed_measure(states[K], weights))


def cost_gradient(v: ControlPath, X0: LiftedField, cfg: SolverConfig, F: FunctionalModel, F_T: FunctionalModel,
                  conditional: bool = True) -> ControlPath:
    """
    D_v J(v)(s) = lambda v(s) + E[ int_s^T D_X F(X (x) m) dtau + D_X F_T(X(T) (x) m) | state at s ].
    conditional=False keeps the pathwise integrand, which is the exact gradient of the sampled cost for
    arbitrary (not necessarily adapted) controls
    """
    states = simulate_state(v, X0, cfg)
    return _gradient_of_states(v, states, cfg, F, F_T, conditional)


def _gradient_of_states(v: ControlPath, states: NDArray, cfg: SolverConfig, F: FunctionalModel,
                        F_T: FunctionalModel, conditional: bool) -> ControlPath:
    K = v.grid.numSteps
    if K == 0:
        return v.with_values(np.zeros_like(v.v))
    weights = v.measure.weights
    sources, terminal = first_order_sources(F, F_T, states, weights)
    targets = cumulative_targets(sources, terminal, v.grid.dt)
    if conditional:
        targets, _ = regress_steps(targets, lambda k: flatten_outcomes(states[k]), weights, cfg.basisDegree)
    return v.with_values(cfg.lam * v.v + targets)


def project_feedback(v: ControlPath, states: NDArray, degree: int) -> ControlPath:
    """
    :return: v with every step replaced by its least-squares projection on polynomials of the step state
    """
    pooled = np.tile(v.measure.weights, v.numOutcomes)
    projected = np.empty_like(v.v)
    for k in range(v.grid.numSteps):
        fit = regress_conditional(flatten_outcomes(v.v[k]), flatten_outcomes(states[k]), degree, pooled)
        projected[k] = fit.fitted.reshape(v.v[k].shape)
    return ControlPath(v.grid, projected, v.measure, "feedback")


@dataclass
class MinimizeReport:
    cost: float
    gradientNorm: float
    iterations: int
    learningRate: float
    halvings: int
    converged: bool
    history: List[dict] = field(default_factory=list)

    @property
    def V(self) -> float:
        """
        :return: The value reached by the descent, J at the returned control
        """
        return self.cost

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["iteration", "cost", "gradient_norm", "learning_rate"])


def default_learning_rate(F: FunctionalModel, F_T: FunctionalModel, cfg: SolverConfig, grid: TimeGrid) -> float:
    """
    Inverse of a bound on the curvature of J: lambda + T (c_T + c T)
    """
    constants = assumption_constants(F, F_T, cfg.lam, grid.T - grid.t0)
    horizon = grid.T - grid.t0
    return 1.0 / (cfg.lam + horizon * (constants.cT + constants.c * horizon))


def minimize(X0: LiftedField, grid: TimeGrid, cfg: SolverConfig, F: FunctionalModel, F_T: FunctionalModel,
             learningRate: float = None, maxIters: int = 1000, tol: float = None,
             representation: str = "open-loop"):
    """
    Gradient descent on J from v = 0 with the conditional gradient, which keeps every iterate adapted.
    A step that increases J is undone and the learning rate halved; ConvergenceError after 10 halvings or when
    maxIters is reached with ||D_v J|| > tol
    :return: (ControlPath, MinimizeReport), the minimizing control together with its report; the value itself is
    report.V
    """
    tol = cfg.tol if tol is None else tol
    learningRate = default_learning_rate(F, F_T, cfg, grid) if learningRate is None else learningRate
    M = X0.numOutcomes if X0.numOutcomes > 1 else cfg.numOutcomes
    v = zero_control(grid, X0.measure, M, representation)
    states = simulate_state(v, X0, cfg)
    currentCost = _cost_of_states(v, states, cfg, F, F_T)
    gradient = _gradient_of_states(v, states, cfg, F, F_T, conditional=True)
    gradientNorm = np.sqrt(gradient.squared_norm())
    history = [{"iteration": 0, "cost": currentCost, "gradient_norm": gradientNorm, "learning_rate": learningRate}]
    halvings = 0
    iteration = 0

    while gradientNorm > tol and iteration < maxIters:
        iteration += 1
        candidate = v - learningRate * gradient
        candidateStates = simulate_state(candidate, X0, cfg)
        if representation == "feedback":
            candidate = project_feedback(candidate, candidateStates, cfg.basisDegree)
            candidateStates = simulate_state(candidate, X0, cfg)
        candidateCost = _cost_of_states(candidate, candidateStates, cfg, F, F_T)
        if candidateCost > currentCost + 1e-9 * max(1.0, abs(currentCost)):
            halvings += 1
            learningRate /= 2
            logging.warning("Descent step increased the cost, learning rate halved to " + str(learningRate))
            if halvings >= MAX_HALVINGS:
                report = MinimizeReport(currentCost, gradientNorm, iteration, learningRate, halvings, False, history)
                raise ConvergenceError("Gradient descent diverged after " + str(MAX_HALVINGS) + " halvings",
                                       gradientNorm, (v, report))
            continue
        v, states, currentCost = candidate, candidateStates, candidateCost
        gradient = _gradient_of_states(v, states, cfg, F, F_T, conditional=True)
        gradientNorm = np.sqrt(gradient.squared_norm())
        history.append({"iteration": iteration, "cost": currentCost, "gradient_norm": gradientNorm,
                        "learning_rate": learningRate})

    converged = gradientNorm <= tol
    report = MinimizeReport(currentCost, gradientNorm, iteration, learningRate, halvings, converged, history)
    logging.info("Gradient descent: " + str(iteration) + " iterations, cost " + str(currentCost)
                 + ", gradient norm " + str(gradientNorm))
    if not converged:
        raise ConvergenceError("Gradient descent did not reach tolerance " + str(tol) + " in " + str(maxIters)
                               + " iterations", gradientNorm, (v, report))
    return v, report


@dataclass
class ConvexityReport:
    """
    lhs = int <D_v J(v1) - D_v J(v2), v1 - v2> ds, rhs = (lambda - T (c'_T + c' T / 2)) int ||v1 - v2||^2 ds
    """
    lhs: float
    rhs: float
    margin: float
    midpointGap: float
    tolerance: float

    @property
    def violated(self) -> bool:
        return self.margin < -self.tolerance


def convexity_check(v1: ControlPath, v2: ControlPath, X0: LiftedField, cfg: SolverConfig, F: FunctionalModel,
                    F_T: FunctionalModel, tolerance: float = 1e-10, conditional: bool = False) -> ConvexityReport:
    """
    Strong monotonicity of the cost gradient. midpointGap is J((v1 + v2) / 2) - (J(v1) + J(v2)) / 2, which is
    nonpositive for a convex cost
    """
    grid = v1.grid
    constants = assumption_constants(F, F_T, cfg.lam, grid.T - grid.t0)
    difference = v1 - v2
    gradientGap = cost_gradient(v1, X0, cfg, F, F_T, conditional) - cost_gradient(v2, X0, cfg, F, F_T, conditional)
    lhs = gradientGap.inner(difference)
    rhs = constants.first_order_margin() * difference.squared_norm()
    midpoint = (v1 + v2) * 0.5
    midpointGap = cost(midpoint, X0, cfg, F, F_T) - 0.5 * (cost(v1, X0, cfg, F, F_T) + cost(v2, X0, cfg, F, F_T))
    return ConvexityReport(lhs, rhs, lhs - rhs, midpointGap, tolerance)

