import logging
import sys
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.functionals.FunctionalModels import FunctionalModel
from src.helpers.Errors import ConvergenceError
from src.measures.EmpiricalMeasure import EmpiricalMeasure
from src.measures.LiftedField import LiftedField
from src.solvers.RandomStreams import brownian_increments, outcome_derangement
from src.solvers.Regression import RegressionFit, regress_conditional
from src.solvers.SolverConfig import SolverConfig, TimeGrid, validate_margins

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)


@dataclass
class PathBundle:
    """
    Discrete solution of a forward-backward system on a time grid.
    Y and Z have shape (K + 1, M, N, *components); step k is time t0 + k dt. Z[K] is the terminal value of the
    backward component. dW holds the M x K x d Brownian increments shared by every atom
    """
    grid: TimeGrid
    measure: EmpiricalMeasure
    Y: NDArray
    Z: NDArray
    dW: NDArray
    iterations: int
    residual: float
    converged: bool
    damping: float
    residualHistory: List[float] = field(default_factory=list)
    stepResiduals: NDArray = None
    fallbackSteps: int = 0
    growthConstant: float = float("nan")
    initialFit: RegressionFit = None

    @property
    def numOutcomes(self) -> int:
        return self.Y.shape[1]

    def state(self, k: int) -> LiftedField:
        return LiftedField(self.Y[k], self.measure)

    def adjoint(self, k: int) -> LiftedField:
        return LiftedField(self.Z[k], self.measure)

    def flow(self, k: int) -> EmpiricalMeasure:
        """
        :return: Y(s_k) (x) m
        """
        return pushed_measure(self.Y[k], self.measure.weights)

    def h_norms(self, values: NDArray) -> NDArray:
        return np.array([h_norm(values[k], self.measure.weights) for k in range(len(values))])

    def to_frame(self) -> pd.DataFrame:
        weights = self.measure.weights
        meanSize = [float((np.sqrt(np.sum(self.Y[k].reshape(self.Y[k].shape[:2] + (-1,)) ** 2, axis=2))
                           @ weights).mean()) for k in range(len(self.Y))]
        stepResiduals = self.stepResiduals if self.stepResiduals is not None else np.full(len(self.Y), np.nan)
        return pd.DataFrame({"step": np.arange(len(self.Y)), "s": self.grid.times(), "mean_abs_Y": meanSize,
                             "norm_Y": self.h_norms(self.Y), "norm_Z": self.h_norms(self.Z),
                             "residual": stepResiduals})


def h_norm(values: NDArray, weights: NDArray) -> float:
    """
    :param values: (M, N, *components) array
    :return: sqrt((1/M) sum_omega sum_i w_i |values(omega, i)|^2)
    """
    squares = np.sum(values.reshape(values.shape[:2] + (-1,)) ** 2, axis=2)
    return float(np.sqrt((squares @ weights).mean()))


def pushed_measure(values: NDArray, weights: NDArray) -> EmpiricalMeasure:
    M = values.shape[0]
    tiled = np.tile(weights, M) / M
    return EmpiricalMeasure(values.reshape(-1, values.shape[-1]), tiled / tiled.sum())


def flatten_outcomes(values: NDArray) -> NDArray:
    return values.reshape((values.shape[0] * values.shape[1],) + values.shape[2:])


def _pooled_weights(weights: NDArray, M: int) -> NDArray:
    return np.tile(weights, M)


def forward_states(X0: NDArray, drift: NDArray, noise: NDArray, dt: float) -> NDArray:
    """
    Euler-Maruyama: Y[k + 1] = Y[k] + dt drift[k] + noise[:, k]
    :param drift: (K, M, N, d) drift per step
    :param noise: (M, K, d) sigma dW per outcome and step, shared by the atoms
    """
    K = len(drift)
    Y = np.empty((K + 1,) + drift.shape[1:])
    Y[0] = X0
    for k in range(K):
        Y[k + 1] = Y[k] + dt * drift[k] + noise[:, k, None, :]
    return Y


def cumulative_targets(sources: NDArray, terminal: NDArray, dt: float) -> NDArray:
    """
    :param sources: (K, ...) running sources at steps 1..K
    :return: S with S[k] = sum_{j > k} dt sources[j] + terminal for k = 0..K-1 (right-endpoint quadrature)
    """
    K = len(sources)
    targets = np.empty_like(sources)
    running = terminal.copy()
    for k in range(K - 1, -1, -1):
        running = running + dt * sources[k]
        targets[k] = running
    return targets


def first_order_sources(F: FunctionalModel, F_T: FunctionalModel, Y: NDArray, weights: NDArray):
    """
    :return: (sources at steps 1..K, terminal), where the source at step k is D_X F(Y(s_k) (x) m)
    """
    K = len(Y) - 1
    sources = np.empty_like(Y[1:])
    for k in range(1, K + 1):
        sources[k - 1] = F.grad_delta(pushed_measure(Y[k], weights), flatten_outcomes(Y[k])).reshape(Y[k].shape)
    terminal = F_T.grad_delta(pushed_measure(Y[K], weights), flatten_outcomes(Y[K])).reshape(Y[K].shape)
    return sources, terminal


def regress_steps(targets: NDArray, features: Callable, weights: NDArray, degree: int):
    """
    Regresses targets[k] on features(k) for every step, pooling outcomes and atoms with the atom weights
    :return: (fitted array shaped like targets, list of fits)
    """
    M = targets.shape[1]
    pooledWeights = _pooled_weights(weights, M)
    fitted = np.empty_like(targets)
    fits = []
    for k in range(len(targets)):
        fit = regress_conditional(flatten_outcomes(targets[k]), features(k), degree, pooledWeights)
        fitted[k] = fit.fitted.reshape(targets[k].shape)
        fits.append(fit)
    return fitted, fits


class _PicardLoop:
    """
    Damped fixed-point iteration Z <- (1 - theta) Z + theta Phi(Z) with theta halved whenever the residual
    sup_k ||Phi(Z)_k - Z_k|| fails to decrease
    """

    def __init__(self, cfg: SolverConfig, label: str):
        self.cfg = cfg
        self.label = label
        self.damping = cfg.damping
        self.history = []

    def step(self, current: NDArray, proposal: NDArray, weights: NDArray):
        stepResiduals = np.array([h_norm(proposal[k] - current[k], weights) for k in range(len(current))])
        residual = float(stepResiduals.max()) if len(stepResiduals) else 0.0
        if self.history and residual >= self.history[-1] and self.damping > self.cfg.minDamping:
            self.damping = max(self.damping / 2, self.cfg.minDamping)
            logging.warning(self.label + ": residual " + str(residual) + " did not decrease, damping halved to "
                            + str(self.damping))
        self.history.append(residual)
        if residual <= self.cfg.tol:
            return proposal, residual, stepResiduals, True
        return (1 - self.damping) * current + self.damping * proposal, residual, stepResiduals, False


def _growth_constant(Y, Z, X0, weights):
    size = 1.0 + h_norm(X0, weights)
    return max(max(h_norm(Y[k], weights), h_norm(Z[k], weights)) for k in range(len(Y))) / size


def solve_first_order(F: FunctionalModel, F_T: FunctionalModel, X0: LiftedField, grid: TimeGrid, cfg: SolverConfig,
                      dW: NDArray = None, raiseOnFailure: bool = True) -> PathBundle:
    """
    Picard solution of the first-order optimality system
        Y(s) = X0 - (1/lambda) int_t^s Z + sigma (w(s) - w(t))
        Z(s) = E[ int_s^T D_X F(Y(tau) (x) m) dtau + D_X F_T(Y(T) (x) m) | state at s ]
    with Euler steps, right-endpoint quadrature, and pooled least-squares regression on Y(s).
    :param dW: Brownian increments to reuse (common random numbers); drawn from cfg.seed otherwise
    """
    validate_margins(F, F_T, cfg, grid)
    m = X0.measure
    d = m.dim
    M = X0.numOutcomes if X0.numOutcomes > 1 else cfg.numOutcomes
    K, dt = grid.numSteps, grid.dt
    if dW is None:
        dW = brownian_increments(seed=cfg.seed, numOutcomes=M, numSteps=K, d=d, dt=dt, firstStep=grid.offset)
    noise = dW @ cfg.sigma.T
    start = np.broadcast_to(X0.values, (M, m.size, d)).copy()
    weights = m.weights

    if K == 0:
        terminal = F_T.grad_delta(pushed_measure(start, weights), flatten_outcomes(start)).reshape(start.shape)
        return PathBundle(grid, m, start[None], terminal[None], dW, 0, 0.0, True, cfg.damping, [],
                          np.zeros(1), 0, _growth_constant(start[None], terminal[None], start, weights))

    Z = np.zeros((K + 1, M, m.size, d))
    loop = _PicardLoop(cfg, "first-order solve")
    converged, residual, stepResiduals, fits = False, float("inf"), None, []
    iteration = 0
    for iteration in range(1, cfg.maxIters + 1):
        Y = forward_states(start, -Z[:K] / cfg.lam, noise, dt)
        sources, terminal = first_order_sources(F, F_T, Y, weights)
        targets = cumulative_targets(sources, terminal, dt)
        fitted, fits = regress_steps(targets, lambda k: flatten_outcomes(Y[k]), weights, cfg.basisDegree)
        proposal = np.concatenate([fitted, terminal[None]])
        Z, residual, stepResiduals, converged = loop.step(Z, proposal, weights)
        if converged:
            break

    Y = forward_states(start, -Z[:K] / cfg.lam, noise, dt)
    fallbackSteps = sum(1 for fit in fits if fit.degraded)
    bundle = PathBundle(grid, m, Y, Z, dW, iteration, residual, converged, loop.damping, loop.history,
                        stepResiduals, fallbackSteps, _growth_constant(Y, Z, start, weights),
                        fits[0] if fits else None)
    logging.info("First-order solve: " + str(iteration) + " iterations, residual " + str(residual))
    if not converged and raiseOnFailure:
        raise ConvergenceError("First-order solve did not converge in " + str(cfg.maxIters) + " iterations",
                               residual, bundle)
    return bundle


def _solve_linear_system(first: PathBundle, initial: NDArray, sourceAt: Callable, terminalAt: Callable,
                         featuresAt: Callable, cfg: SolverConfig, label: str, raiseOnFailure: bool) -> PathBundle:
    """
    Picard solution of a linear forward-backward system driven by a converged first-order bundle:
        D(s_{k+1}) = D(s_k) - (dt / lambda) E(s_k),   D(t) = initial
        E(s_k) = E[ sum_{j > k} dt sourceAt(j, D_j) + terminalAt(D_K) | featuresAt(k, D_k) ]
    """
    K, dt = first.grid.numSteps, first.grid.dt
    M = first.numOutcomes
    weights = first.measure.weights
    start = np.broadcast_to(initial, (M,) + initial.shape[1:]).copy()
    noNoise = np.zeros((M, K, first.measure.dim))

    if K == 0:
        terminal = terminalAt(start)
        return PathBundle(first.grid, first.measure, start[None], terminal[None], first.dW, 0, 0.0, True,
                          cfg.damping, [], np.zeros(1))

    E = np.zeros((K + 1,) + start.shape)
    loop = _PicardLoop(cfg, label)
    converged, residual, stepResiduals, fits = False, float("inf"), None, []
    iteration = 0
    for iteration in range(1, cfg.maxIters + 1):
        D = _linear_forward(start, E[:K], cfg.lam, dt)
        sources = np.stack([sourceAt(j, D[j]) for j in range(1, K + 1)])
        terminal = terminalAt(D[K])
        targets = cumulative_targets(sources, terminal, dt)
        fitted, fits = regress_steps(targets, lambda k: featuresAt(k, D[k]), weights, cfg.basisDegree)
        proposal = np.concatenate([fitted, terminal[None]])
        E, residual, stepResiduals, converged = loop.step(E, proposal, weights)
        if converged:
            break

    D = _linear_forward(start, E[:K], cfg.lam, dt)
    bundle = PathBundle(first.grid, first.measure, D, E, first.dW, iteration, residual, converged, loop.damping,
                        loop.history, stepResiduals, sum(1 for fit in fits if fit.degraded),
                        _growth_constant(D, E, start, weights), fits[0] if fits else None)
    logging.info(label + ": " + str(iteration) + " iterations, residual " + str(residual))
    if not converged and raiseOnFailure:
        raise ConvergenceError(label + " did not converge in " + str(cfg.maxIters) + " iterations", residual, bundle)
    return bundle


def _linear_forward(start: NDArray, E: NDArray, lam: float, dt: float) -> NDArray:
    D = np.empty((len(E) + 1,) + start.shape)
    D[0] = start
    for k in range(len(E)):
        D[k + 1] = D[k] - (dt / lam) * E[k]
    return D


def _features(*arrays: NDArray) -> NDArray:
    columns = [flatten_outcomes(array).reshape(array.shape[0] * array.shape[1], -1) for array in arrays]
    return np.concatenate(columns, axis=1)


class _StepCache:
    """
    Flows Y(s_k) (x) m and per-step derivative tensors of a converged first-order bundle, computed once and
    shared by the Picard iterations of the linear systems
    """

    def __init__(self, first: PathBundle):
        self.first = first
        self._flows = {}
        self._tensors = {}

    def flow(self, k: int) -> EmpiricalMeasure:
        if k not in self._flows:
            self._flows[k] = self.first.flow(k)
        return self._flows[k]

    def hessian(self, F: FunctionalModel, k: int) -> NDArray:
        return self._cached("hess", F, k, lambda Yk: F.hess_delta(self.flow(k), flatten_outcomes(Yk)))

    def third(self, F: FunctionalModel, k: int) -> NDArray:
        return self._cached("third", F, k, lambda Yk: F.third_delta(self.flow(k), flatten_outcomes(Yk)))

    def _cached(self, kind: str, F: FunctionalModel, k: int, compute: Callable) -> NDArray:
        key = (kind, id(F), k)
        if key not in self._tensors:
            Yk = self.first.Y[k]
            values = compute(Yk)
            self._tensors[key] = values.reshape(Yk.shape[:2] + values.shape[1:])
        return self._tensors[key]


def solve_x_derivative(first: PathBundle, F: FunctionalModel, F_T: FunctionalModel, cfg: SolverConfig,
                       raiseOnFailure: bool = True) -> PathBundle:
    """
    Derivative of the first-order system with respect to the starting point x: matrix-valued (calY, calZ)
    with calY(t) = I and
        calZ(s) = E[ int_s^T D^2 dF/dm(Y (x) m)(Y) calY dtau + D^2 dF_T/dm(...)(Y(T)) calY(T) | state ]
    calZ(t) at atom x is D^2 U(x, m, t)
    """
    K = first.grid.numSteps
    d = first.measure.dim
    cache = _StepCache(first)
    identity = np.broadcast_to(np.eye(d), (1, first.measure.size, d, d))
    return _solve_linear_system(
        first, identity,
        lambda j, D: np.einsum("mnab,mnbc->mnac", cache.hessian(F, j), D),
        lambda D: np.einsum("mnab,mnbc->mnac", cache.hessian(F_T, K), D),
        lambda k, D: _features(first.Y[k], D),
        cfg, "x-derivative solve", raiseOnFailure)


def cross_term(F: FunctionalModel, mu: EmpiricalMeasure, points: NDArray, tildePoints: NDArray,
               vectors: NDArray, weights: NDArray, mode: str, seed: int, apply: str = "d2d1") -> NDArray:
    """
    The independent-copy term E~ int C(points(omega, x), tildePoints~(eta)) vectors~(eta) dm(eta), where C is
    d2d1_delta2 (apply="d2d1", result (M, N, d)) or d1sq_d2_delta2 (apply="d1sq_d2", result (M, N, d, d)).
    points, tildePoints and vectors are (M, N, ...) arrays over the same outcomes.
    mode "product" averages over every outcome of the copy, "derangement" pairs outcome omega with a single
    partner outcome
    """
    M, N, d = points.shape
    operator = F.apply_d2d1_delta2 if apply == "d2d1" else F.apply_d1sq_d2_delta2
    if mode == "product":
        result = operator(mu, flatten_outcomes(points), flatten_outcomes(tildePoints), np.tile(weights, M) / M,
                          flatten_outcomes(vectors))
        return result.reshape((M, N) + result.shape[1:])
    permutation = outcome_derangement(M, seed)
    blocks = [operator(mu, points[omega], tildePoints[permutation[omega]], weights, vectors[permutation[omega]])
              for omega in range(M)]
    return np.stack(blocks)


def _mass_term(F: FunctionalModel, mu: EmpiricalMeasure, points: NDArray, probePath: NDArray, mode: str, seed: int,
               second: bool) -> NDArray:
    """
    E~ D_1 d2F/dm2(mu)(points, probe~) (or D_1^2 when second=True), averaged over an independent copy of the
    probe path probePath (M, d)
    """
    M, N, d = points.shape
    operator = F.average_d1sq_delta2 if second else F.average_d1_delta2
    if mode == "product":
        result = operator(mu, flatten_outcomes(points), probePath, np.full(M, 1.0 / M))
        return result.reshape((M, N) + result.shape[1:])
    permutation = outcome_derangement(M, seed)
    return np.stack([operator(mu, points[omega], probePath[permutation[omega]][None, :], np.ones(1))
                     for omega in range(M)])


def solve_second_order(first: PathBundle, Xdir: LiftedField, F: FunctionalModel, F_T: FunctionalModel,
                       cfg: SolverConfig, raiseOnFailure: bool = True) -> PathBundle:
    """
    Second-order system in the direction Xdir (independent of the Brownian stream):
        calY(t) = Xdir,  calZ(s) = E[ int_s^T D_X^2 F(Y (x) m)(calY) dtau + D_X^2 F_T(Y(T) (x) m)(calY(T)) | ... ]
    calZ(t) is D_X^2 V(X (x) m, t)(Xdir)
    """
    if Xdir.measureTag != first.measure.tag:
        raise ValueError("Direction field is attached to a different measure than the bundle")
    K = first.grid.numSteps
    weights = first.measure.weights
    cache = _StepCache(first)

    def lifted_hessian(functional, k, D):
        Yk = first.Y[k]
        pointwise = np.einsum("mnab,mnb->mna", cache.hessian(functional, k), D)
        return pointwise + cross_term(functional, cache.flow(k), Yk, Yk, D, weights, cfg.independentCopy,
                                      cfg.seed)

    return _solve_linear_system(
        first, Xdir.values,
        lambda j, D: lifted_hessian(F, j, D),
        lambda D: lifted_hessian(F_T, K, D),
        lambda k, D: _features(first.Y[k], D),
        cfg, "second-order solve", raiseOnFailure)


@dataclass
class MeasureDerivativeBundles:
    """
    (Ybar, Zbar) and (calYbar, calZbar) for one probe x. Arrays cover every atom of the bundle measure;
    zero-weight probe atoms carry no mass in any integral.
    bounds holds sup_s ||.||^2 / (1 + |x|^2) for each of the four processes
    """
    first: PathBundle
    second: PathBundle
    probeIndex: int
    bounds: dict


def solve_measure_derivative(first: PathBundle, xDeriv: PathBundle, F: FunctionalModel, F_T: FunctionalModel,
                             probeIndex: int, cfg: SolverConfig, raiseOnFailure: bool = True
                             ) -> MeasureDerivativeBundles:
    """
    Linear systems for the derivative of (Y, Z) and (calY, calZ) with respect to m in the direction of the
    probe atom x = first.measure.atoms[probeIndex]. Both start from 0 and are driven by
        Zbar:    D^2 dF/dm(Y_xi) Ybar_xi + E~ D_1 d2F/dm2(Y_xi, Y~_x) + E~ int D_2 D_1 d2F/dm2(Y_xi, Y~_eta) Ybar~_eta
        calZbar: D^2 dF/dm(Y_xi) calYbar_xi + [D^3 dF/dm(Y_xi) Ybar_xi + E~ D_1^2 d2F/dm2(Y_xi, Y~_x)
                 + E~ int D_1^2 D_2 d2F/dm2(Y_xi, Y~_eta) Ybar~_eta] calY_xi
    """
    K = first.grid.numSteps
    m = first.measure
    d = m.dim
    weights = m.weights
    probePath = first.Y[:, :, probeIndex, :]
    mode, seed = cfg.independentCopy, cfg.seed
    cache = _StepCache(first)
    massTerms = {}

    def mass(functional, k, second):
        key = (id(functional), k, second)
        if key not in massTerms:
            massTerms[key] = _mass_term(functional, cache.flow(k), first.Y[k], probePath[k], mode, seed, second)
        return massTerms[key]

    def first_source(functional, k, D):
        Yk = first.Y[k]
        pointwise = np.einsum("mnab,mnb->mna", cache.hessian(functional, k), D)
        return pointwise + mass(functional, k, False) + cross_term(functional, cache.flow(k), Yk, Yk, D, weights,
                                                                   mode, seed)

    barFirst = _solve_linear_system(
        first, np.zeros((1, m.size, d)),
        lambda j, D: first_source(F, j, D),
        lambda D: first_source(F_T, K, D),
        lambda k, D: _features(first.Y[k], D),
        cfg, "measure-derivative solve", raiseOnFailure)
    Ybar = barFirst.Y
    drivers = {}

    def driver(functional, k):
        # Coefficient multiplying calY, fixed once Ybar is known
        key = (id(functional), k)
        if key not in drivers:
            Yk = first.Y[k]
            value = np.einsum("mnabc,mnc->mnab", cache.third(functional, k), Ybar[k])
            value = value + mass(functional, k, True)
            value = value + cross_term(functional, cache.flow(k), Yk, Yk, Ybar[k], weights, mode, seed,
                                       apply="d1sq_d2")
            drivers[key] = value
        return drivers[key]

    def second_source(functional, k, D):
        pointwise = np.einsum("mnab,mnbc->mnac", cache.hessian(functional, k), D)
        return pointwise + np.einsum("mnab,mnbc->mnac", driver(functional, k), xDeriv.Y[k])

    barSecond = _solve_linear_system(
        first, np.zeros((1, m.size, d, d)),
        lambda j, D: second_source(F, j, D),
        lambda D: second_source(F_T, K, D),
        lambda k, D: _features(first.Y[k], Ybar[k], xDeriv.Y[k], D),
        cfg, "measure-derivative (second) solve", raiseOnFailure)

    scale = 1.0 + float(np.sum(m.atoms[probeIndex] ** 2))
    bounds = {name: float(max(h_norm(values[k], weights) ** 2 for k in range(len(values))) / scale)
              for name, values in (("Ybar", barFirst.Y), ("Zbar", barFirst.Z), ("calYbar", barSecond.Y),
                                   ("calZbar", barSecond.Z))}
    return MeasureDerivativeBundles(barFirst, barSecond, probeIndex, bounds)
