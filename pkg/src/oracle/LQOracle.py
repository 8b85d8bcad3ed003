from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.optimize import minimize

from src.functionals.FunctionalModels import FunctionalModel, LQFunctional
from src.helpers.Errors import InadmissibleSpecError
from src.measures.EmpiricalMeasure import EmpiricalMeasure
from src.solvers.SolverConfig import AssumptionConstants, SolverConfig, TimeGrid, assumption_constants

BLOW_UP = 1e6


@dataclass(frozen=True, eq=False)
class LQSpec:
    """
    Mean-field linear-quadratic problem: running cost (q/2) int |x|^2 dm + (qBar/2) |int x dm|^2, terminal cost
    with (qT, qBarT), control cost lambda/2 |v|^2 and diffusion sigma on [t0, T] in dimension d
    """
    q: float
    qBar: float
    qT: float
    qBarT: float
    lam: float
    sigma: NDArray
    t0: float
    T: float
    d: int = 1

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = float(sigma) * np.eye(self.d)
        object.__setattr__(self, "sigma", np.atleast_2d(sigma))
        if self.sigma.shape != (self.d, self.d):
            raise ValueError("sigma must be " + str(self.d) + " x " + str(self.d) + ", got " + str(self.sigma.shape))
        if self.lam <= 0:
            raise ValueError("lambda must be positive, got " + str(self.lam))
        if not self.t0 < self.T:
            raise ValueError("t0 must be before T")

    @property
    def noiseTrace(self) -> float:
        """
        :return: tr(sigma sigma^*)
        """
        return float(np.trace(self.sigma @ self.sigma.T))

    def functionals(self) -> Tuple[FunctionalModel, FunctionalModel]:
        return lq_functionals(self)

    def constants(self) -> AssumptionConstants:
        F, F_T = self.functionals()
        return assumption_constants(F, F_T, self.lam, self.T - self.t0)

    def solver_config(self, **options) -> SolverConfig:
        return SolverConfig(lam=self.lam, sigma=self.sigma, **options)

    def grid(self, numSteps: int) -> TimeGrid:
        return TimeGrid(self.t0, self.T, numSteps)


def lq_functionals(spec: LQSpec) -> Tuple[FunctionalModel, FunctionalModel]:
    """
    :return: (F, F_T) of the LQ family matching the LQSpec weights
    """
    return LQFunctional(spec.q, spec.qBar), LQFunctional(spec.qT, spec.qBarT)


def _riccati_rhs(spec: LQSpec, state: NDArray) -> NDArray:
    P, R = state[0], state[1]
    return np.array([P * P / spec.lam - spec.q,
                     (2 * P * R + R * R) / spec.lam - spec.qBar,
                     -0.5 * spec.noiseTrace * P])


def _rk4_step(spec: LQSpec, state: NDArray, h: float) -> NDArray:
    k1 = _riccati_rhs(spec, state)
    k2 = _riccati_rhs(spec, state + 0.5 * h * k1)
    k3 = _riccati_rhs(spec, state + 0.5 * h * k2)
    k4 = _riccati_rhs(spec, state + h * k3)
    return state + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _check_finite(spec: LQSpec, state: NDArray, t: float):
    if not np.all(np.isfinite(state)) or max(abs(state[0]), abs(state[1])) > BLOW_UP:
        raise InadmissibleSpecError("Riccati solution blows up at t=" + str(t) + " for q=" + str(spec.q)
                                    + ", qBar=" + str(spec.qBar) + ", lambda=" + str(spec.lam))


@dataclass
class RiccatiSolution:
    """
    P, R and the noise-accumulation term noise(t) = 1/2 int_t^T tr(sigma sigma^*) P(s) ds on an ascending fine grid
    """
    spec: LQSpec
    times: NDArray
    P: NDArray
    R: NDArray
    noise: NDArray

    def at(self, t: float) -> Tuple[float, float, float]:
        """
        :return: (P(t), R(t), noise(t)), stepping back from the nearest fine node at or after t
        """
        if t < self.spec.t0 - 1e-12 or t > self.spec.T + 1e-12:
            raise ValueError("t=" + str(t) + " is outside [" + str(self.spec.t0) + ", " + str(self.spec.T) + "]")
        index = min(int(np.searchsorted(self.times, t - 1e-14)), len(self.times) - 1)
        state = np.array([self.P[index], self.R[index], self.noise[index]])
        h = self.times[index] - t
        if h > 1e-15:
            state = _rk4_step(self.spec, state, -h)
            _check_finite(self.spec, state, t)
        return float(state[0]), float(state[1]), float(state[2])

    def derivatives(self, t: float) -> Tuple[float, float]:
        """
        :return: (P'(t), R'(t)) from the Riccati right-hand side
        """
        P, R, noise = self.at(t)
        rates = _riccati_rhs(self.spec, np.array([P, R, noise]))
        return float(rates[0]), float(rates[1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "P": self.P, "R": self.R, "Pi": self.P + self.R, "noise": self.noise})


def riccati_solve(spec: LQSpec, numSteps: int = 100, refinement: int = 10) -> RiccatiSolution:
    """
    Integrates backward from T
        P' = P^2 / lambda - q,              P(T) = qT
        R' = (2 P R + R^2) / lambda - qBar, R(T) = qBarT
    with the classical Runge-Kutta method on a grid `refinement` times finer than a numSteps solver grid.
    Raises InadmissibleSpecError when |P| or |R| exceeds 1e6
    """
    fineSteps = numSteps * refinement
    h = (spec.T - spec.t0) / fineSteps
    states = np.empty((fineSteps + 1, 3))
    states[fineSteps] = [spec.qT, spec.qBarT, 0.0]
    for j in range(fineSteps, 0, -1):
        states[j - 1] = _rk4_step(spec, states[j], -h)
        _check_finite(spec, states[j - 1], spec.t0 + (j - 1) * h)
    times = np.linspace(spec.t0, spec.T, fineSteps + 1)
    return RiccatiSolution(spec, times, states[:, 0], states[:, 1], states[:, 2])


@dataclass
class LQValue:
    """
    Closed-form value V(m, t) and its derivatives. U is the normalized functional derivative
        U(x) = 1/2 P (|x|^2 - int |y|^2 dm) + R xbar . (x - xbar)
    """
    t: float
    V: float
    P: float
    R: float
    noise: float
    mean: NDArray
    secondMoment: float

    def U(self, points: NDArray) -> NDArray:
        points = np.atleast_2d(points)
        squares = np.sum(points ** 2, axis=1)
        return 0.5 * self.P * (squares - self.secondMoment) + self.R * (points - self.mean) @ self.mean

    def DU(self, points: NDArray) -> NDArray:
        return self.P * np.atleast_2d(points) + self.R * self.mean

    def D2U(self, points: NDArray) -> NDArray:
        points = np.atleast_2d(points)
        d = points.shape[1]
        return self.P * np.broadcast_to(np.eye(d), (len(points), d, d)).copy()

    def Zbar(self, xi: NDArray, x: NDArray) -> NDArray:
        """
        :return: derivative of DU(xi) in the measure direction delta_x - m, R (x - xbar) for every xi
        """
        xi = np.atleast_2d(xi)
        return np.broadcast_to(self.R * (np.asarray(x, dtype=float) - self.mean), xi.shape).copy()

    def calZbar(self, xi: NDArray, x: NDArray) -> NDArray:
        xi = np.atleast_2d(xi)
        d = xi.shape[1]
        return np.zeros((len(xi), d, d))


def lq_value(spec: LQSpec, m: EmpiricalMeasure, t: float, solution: RiccatiSolution = None) -> LQValue:
    """
    V(m, t) = 1/2 P(t) Var(m) + 1/2 (P(t) + R(t)) |xbar|^2 + 1/2 int_t^T tr(sigma sigma^*) P(s) ds
    """
    solution = riccati_solve(spec) if solution is None else solution
    P, R, noise = solution.at(t)
    mean = m.mean()
    value = 0.5 * P * m.variance() + 0.5 * (P + R) * float(mean @ mean) + noise
    return LQValue(t, value, P, R, noise, mean, m.second_moment())


def lq_time_derivative(spec: LQSpec, m: EmpiricalMeasure, t: float, points: NDArray = None,
                       solution: RiccatiSolution = None) -> Tuple[float, NDArray]:
    """
    :return: (dV/dt(m, t), dU/dt(x, m, t) at points), points defaulting to the atoms of m
    """
    solution = riccati_solve(spec) if solution is None else solution
    P, R, noise = solution.at(t)
    dP, dR = solution.derivatives(t)
    mean = m.mean()
    points = m.atoms if points is None else np.atleast_2d(points)
    dV = 0.5 * dP * m.second_moment() + 0.5 * dR * float(mean @ mean) - 0.5 * spec.noiseTrace * P
    dU = 0.5 * dP * (np.sum(points ** 2, axis=1) - m.second_moment()) + dR * (points - mean) @ mean
    return float(dV), dU


@dataclass
class DiscreteRiccati:
    """
    Exact solution of the time-discretized LQ problem (Euler state, right-endpoint running cost).
    p drives the fluctuation around the mean, pi the mean, r accumulates the noise cost
    """
    grid: TimeGrid
    p: NDArray
    pi: NDArray
    r: NDArray

    def adjoint(self, k: int, Y: NDArray, mean: NDArray) -> NDArray:
        """
        :return: optimal Z at step k, p_k Y + (pi_k - p_k) mean
        """
        return self.p[k] * Y + (self.pi[k] - self.p[k]) * mean


def _discrete_recursion(terminal: float, running: float, lam: float, dt: float, K: int):
    values = np.empty(K + 1)
    slopes = np.empty(K)
    values[K] = terminal
    for k in range(K - 1, -1, -1):
        slopes[k] = dt * running + values[k + 1]
        values[k] = lam * slopes[k] / (lam + slopes[k] * dt)
    return values, slopes


def discrete_riccati_solve(spec: LQSpec, grid: TimeGrid) -> DiscreteRiccati:
    K, dt = grid.numSteps, grid.dt
    p, slopes = _discrete_recursion(spec.qT, spec.q, spec.lam, dt, K)
    pi, _ = _discrete_recursion(spec.qT + spec.qBarT, spec.q + spec.qBar, spec.lam, dt, K)
    r = np.zeros(K + 1)
    for k in range(K - 1, -1, -1):
        r[k] = r[k + 1] + 0.5 * slopes[k] * dt * spec.noiseTrace
    return DiscreteRiccati(grid, p, pi, r)


def lq_discrete_value(spec: LQSpec, m: EmpiricalMeasure, grid: TimeGrid, step: int = 0) -> float:
    """
    :return: optimal discretized cost from grid step `step`, 1/2 p Var(m) + 1/2 pi |xbar|^2 + r
    """
    solution = discrete_riccati_solve(spec, grid)
    mean = m.mean()
    return float(0.5 * solution.p[step] * m.variance() + 0.5 * solution.pi[step] * mean @ mean + solution.r[step])


def discrete_cost_and_gradient(controls: NDArray, F: FunctionalModel, F_T: FunctionalModel, m: EmpiricalMeasure,
                               grid: TimeGrid, lam: float) -> Tuple[float, NDArray]:
    """
    Deterministic discretized cost of adjoint-form controls z (K, N, d):
        sum_k dt / (2 lambda) int |z_k|^2 dm + sum_{k >= 1} dt F(Y_k (x) m) + F_T(Y_K (x) m),
        with Y_{k+1} = Y_k - dt z_k / lambda
    and its gradient with respect to z
    """
    K, dt = grid.numSteps, grid.dt
    weights = m.weights
    Y = np.empty((K + 1,) + m.atoms.shape)
    Y[0] = m.atoms
    for k in range(K):
        Y[k + 1] = Y[k] - dt / lam * controls[k]
    flows = [EmpiricalMeasure(Y[k], weights) for k in range(K + 1)]
    total = sum(dt / (2 * lam) * float(weights @ np.sum(controls[k] ** 2, axis=1)) for k in range(K))
    total += sum(dt * F.value(flows[k]) for k in range(1, K + 1)) + F_T.value(flows[K])

    gradient = np.empty_like(controls)
    running = F_T.grad_delta(flows[K], Y[K])
    for k in range(K - 1, -1, -1):
        running = running + dt * F.grad_delta(flows[k + 1], Y[k + 1])
        gradient[k] = weights[:, None] * dt / lam * (controls[k] - running)
    return float(total), gradient


def brute_force_discrete_value(spec: LQSpec, m: EmpiricalMeasure, grid: TimeGrid) -> float:
    """
    Minimizes the deterministic discretized cost over all controls with L-BFGS-B. Needs sigma = 0
    """
    if not np.allclose(spec.sigma, 0):
        raise ValueError("Brute-force minimization needs deterministic dynamics (sigma = 0)")
    F, F_T = lq_functionals(spec)
    shape = (grid.numSteps,) + m.atoms.shape

    def objective(flat):
        total, gradient = discrete_cost_and_gradient(flat.reshape(shape), F, F_T, m, grid, spec.lam)
        return total, gradient.ravel()

    result = minimize(objective, np.zeros(int(np.prod(shape))), jac=True, method="L-BFGS-B",
                      options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
    return float(result.fun)
