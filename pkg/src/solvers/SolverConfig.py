import logging
import sys
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from src.helpers.Errors import GridError

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)


@dataclass(frozen=True)
class TimeGrid:
    """
    Uniform grid t0 < t0 + dt < ... < T with numSteps steps.
    offset is the index of t0 on the grid the Brownian increments were keyed on, so a tail grid keeps drawing
    the same increments as the full one
    """
    t0: float
    T: float
    numSteps: int
    offset: int = 0

    def __post_init__(self):
        if self.numSteps < 0:
            raise ValueError("Number of steps must be nonnegative, got " + str(self.numSteps))
        if self.numSteps == 0 and not np.isclose(self.t0, self.T):
            raise ValueError("A grid with no steps must have t0 == T")
        if self.numSteps > 0 and not self.t0 < self.T:
            raise ValueError("Grid start " + str(self.t0) + " must be before its end " + str(self.T))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.numSteps if self.numSteps > 0 else 0.0

    def times(self) -> NDArray:
        return np.linspace(self.t0, self.T, self.numSteps + 1)

    def tail(self, steps: int) -> "TimeGrid":
        """
        :return: The grid starting `steps` steps later, with the same dt and end
        """
        if steps < 0 or steps > self.numSteps:
            raise GridError("Cannot drop " + str(steps) + " steps from a grid with " + str(self.numSteps))
        if steps == self.numSteps:
            return TimeGrid(self.T, self.T, 0, self.offset + steps)
        return TimeGrid(self.t0 + steps * self.dt, self.T, self.numSteps - steps, self.offset + steps)

    def steps_for(self, h: float) -> int:
        """
        :return: The number of steps spanning h. Raises GridError if h is not a positive multiple of dt
        """
        if self.numSteps == 0:
            raise GridError("The grid has no steps")
        ratio = h / self.dt
        steps = int(round(ratio))
        if steps < 1 or steps > self.numSteps or abs(ratio - steps) > 1e-9 * max(1.0, ratio):
            raise GridError(str(h) + " is not a multiple of dt=" + str(self.dt) + " within the horizon")
        return steps

    def refined(self) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, 2 * self.numSteps, 2 * self.offset)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """
    :param lam: Control cost weight lambda
    :param sigma: d x d symmetric positive semi-definite diffusion matrix (zero gives deterministic dynamics)
    :param numOutcomes: Monte-Carlo outcomes M
    :param damping: Initial Picard damping theta in (0, 1], halved whenever the residual fails to decrease
    :param basisDegree: Polynomial degree of the regression basis
    :param populationCap: Outcomes kept per atom when a restarted solve starts from a random field
    :param independentCopy: "derangement" (default) pairs each outcome with one partner outcome from a seeded
        derangement; "product" averages over every outcome, see lifted_hessian_apply
    """
    lam: float
    sigma: NDArray
    numOutcomes: int = 512
    damping: float = 1.0
    basisDegree: int = 2
    tol: float = 1e-6
    maxIters: int = 100
    seed: int = 0
    populationCap: int = 16
    independentCopy: str = "derangement"
    minDamping: float = 1.0 / 64
    maxNestedSolves: int = 256

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", sigma)
        if self.lam <= 0:
            raise ValueError("lambda must be positive, got " + str(self.lam))
        if sigma.shape[0] != sigma.shape[1]:
            raise ValueError("sigma must be square, got shape " + str(sigma.shape))
        if not np.allclose(sigma, sigma.T):
            raise ValueError("sigma must be symmetric")
        if np.min(np.linalg.eigvalsh(sigma)) < -1e-12:
            raise ValueError("sigma must be positive semi-definite")
        if self.numOutcomes < 1:
            raise ValueError("At least one Monte-Carlo outcome is required")
        if not 0 < self.damping <= 1:
            raise ValueError("Damping must be in (0, 1], got " + str(self.damping))
        if self.basisDegree < 0:
            raise ValueError("Basis degree must be nonnegative")
        if self.independentCopy not in ("product", "derangement"):
            raise ValueError(self.independentCopy + " is not a valid independent copy mode")

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def diffusion(self) -> NDArray:
        """
        :return: sigma sigma^*
        """
        return self.sigma @ self.sigma.T

    def with_changes(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class AssumptionConstants:
    c: float
    cT: float
    cPrime: float
    cPrimeT: float
    lam: float
    T: float

    def first_order_margin(self) -> float:
        return self.lam - self.T * (self.cPrimeT + self.cPrime * self.T / 2)

    def master_margin(self) -> float:
        return self.lam - self.T * (self.cT + self.c * self.T / 2)


def assumption_constants(F, F_T, lam: float, horizon: float) -> AssumptionConstants:
    running = F.declared_constants()
    terminal = F_T.declared_constants()
    return AssumptionConstants(running["c"], terminal["c"], running["cPrime"], terminal["cPrime"], lam, horizon)


def validate_margins(F, F_T, cfg: SolverConfig, grid: TimeGrid) -> AssumptionConstants:
    """
    Raises ValueError when the convexity margin fails, and only warns when the stronger margin used for the
    second-order and measure-derivative systems fails
    """
    constants = assumption_constants(F, F_T, cfg.lam, grid.T - grid.t0)
    if constants.first_order_margin() <= 0:
        raise ValueError("lambda=" + str(cfg.lam) + " violates the convexity margin (margin "
                         + str(constants.first_order_margin()) + ")")
    if constants.master_margin() <= 0:
        logging.warning("lambda=" + str(cfg.lam) + " fails the second-order margin (margin "
                        + str(constants.master_margin()) + "); derivative systems may not converge")
    return constants
