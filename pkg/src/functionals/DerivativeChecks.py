import math
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.functionals.FunctionalModels import FunctionalModel
from src.helpers.Errors import MissingDerivativeError
from src.measures.EmpiricalMeasure import EmpiricalMeasure, make_empirical, mix
from src.measures.LiftedField import (FieldFunction, LiftedField, inner, nearest_atom_extension, norm, tensor)
from src.solvers.RandomStreams import outcome_derangement
from src.solvers.SolverConfig import AssumptionConstants

DEFAULT_THETAS = (1e-1, 1e-2, 1e-3, 1e-4)
# errors below this are treated as exact and carry no order information
EXACT_FLOOR = 1e-11
# relative cancellation error of a difference of a few function values
ROUNDOFF = 64 * np.finfo(float).eps


@dataclass
class ConvergenceReport:
    """
    One row per theta. estOrder[i] compares row i with row i - 1 and is nan for the first row
    or when either error is at round-off level
    """
    thetas: List[float]
    lhs: List[float]
    rhs: List[float]
    absErr: List[float]
    estOrder: List[float]
    theoreticalOrder: float
    tolerance: float
    passed: bool
    extra: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"theta": self.thetas, "lhs": self.lhs, "rhs": self.rhs, "abs_err": self.absErr,
                             "est_order": self.estOrder})


def _estimated_orders(thetas: Sequence[float], errors: Sequence[float],
                      floors: Sequence[float] = None) -> List[float]:
    floors = [EXACT_FLOOR] * len(thetas) if floors is None else floors
    orders = [math.nan]
    for i in range(1, len(thetas)):
        if errors[i] <= floors[i] or errors[i - 1] <= floors[i - 1]:
            orders.append(math.nan)
        else:
            orders.append(math.log(errors[i - 1] / errors[i]) / math.log(thetas[i - 1] / thetas[i]))
    return orders


def _roundoff_floors(thetas: Sequence[float], scale: float, power: int) -> List[float]:
    """
    :return: Per-theta error level reachable by cancellation alone in a quotient divided by theta^power
    """
    return [max(EXACT_FLOOR, ROUNDOFF * max(1.0, scale) / theta ** power) for theta in thetas]


def _verdict(errors, orders, theoreticalOrder, tolerance) -> bool:
    if errors[-1] > tolerance:
        return False
    observed = [order for order in orders if not math.isnan(order)]
    return all(order >= 0.9 * theoreticalOrder for order in observed)


def _check_thetas(thetas, upper=1.0):
    if len(thetas) == 0:
        raise ValueError("At least one theta is required")
    for theta in thetas:
        if theta <= 0 or theta > upper:
            raise ValueError("theta " + str(theta) + " is outside (0, " + str(upper) + "]")
    if any(thetas[i] <= thetas[i + 1] for i in range(len(thetas) - 1)):
        raise ValueError("thetas must be strictly decreasing")


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise ValueError(what + " is not finite")
    return value


def _signed_integral(F: FunctionalModel, m: EmpiricalMeasure, mPrime: EmpiricalMeasure) -> float:
    """
    :return: int delta(m, .) d(mPrime - m)
    """
    return float(mPrime.weights @ F.delta(m, mPrime.atoms) - m.weights @ F.delta(m, m.atoms))


def check_first_derivative(F: FunctionalModel, m: EmpiricalMeasure, mPrime: EmpiricalMeasure,
                           thetas: Sequence[float] = DEFAULT_THETAS, tolerance: float = 1e-3) -> ConvergenceReport:
    """
    Compares [F(m + theta (mPrime - m)) - F(m)] / theta with int delta(m, .) d(mPrime - m).
    Passes when the smallest-theta error is within tolerance and the observed order is at least 0.9
    """
    _check_thetas(thetas)
    base = _finite(F.value(m), "F(m)")
    rhs = _finite(_signed_integral(F, m, mPrime), "int delta d(m' - m)")
    lhs, errors, scale = [], [], abs(base)
    for theta in thetas:
        mixed = _finite(F.value(mix(m, mPrime, theta)), "F(m + theta(m' - m))")
        scale = max(scale, abs(mixed))
        quotient = (mixed - base) / theta
        lhs.append(quotient)
        errors.append(abs(quotient - rhs))
    orders = _estimated_orders(thetas, errors, _roundoff_floors(thetas, scale, 1))
    return ConvergenceReport(list(thetas), lhs, [rhs] * len(thetas), errors, orders, 1.0, tolerance,
                             _verdict(errors, orders, 1.0, tolerance))


def _two_direction_mix(m, mPrime, mTilde, theta, thetaTilde) -> EmpiricalMeasure:
    atoms = np.vstack([m.atoms, mPrime.atoms, mTilde.atoms])
    weights = np.concatenate([(1 - theta - thetaTilde) * m.weights, theta * mPrime.weights,
                              thetaTilde * mTilde.weights])
    return make_empirical(atoms, weights)


def _double_signed_integral(F, m, mPrime, mTilde) -> float:
    """
    :return: int int delta2(m, x, x~) d(mPrime - m)(x) d(mTilde - m)(x~)
    """
    left = np.vstack([mPrime.atoms, m.atoms])
    leftWeights = np.concatenate([mPrime.weights, -m.weights])
    right = np.vstack([mTilde.atoms, m.atoms])
    rightWeights = np.concatenate([mTilde.weights, -m.weights])
    return float(leftWeights @ F.delta2(m, left, right) @ rightWeights)


def check_second_derivative(F: FunctionalModel, m: EmpiricalMeasure, mPrime: EmpiricalMeasure,
                            mTilde: EmpiricalMeasure, thetas: Sequence[float] = DEFAULT_THETAS,
                            tolerance: float = 1e-3) -> ConvergenceReport:
    """
    Compares the double difference quotient
        [F(m + t(m' - m) + t(m~ - m)) - F(m + t(m' - m)) - F(m + t(m~ - m)) + F(m)] / t^2
    with int int delta2 d(m' - m) d(m~ - m). The second-order Taylor remainder along m' is reported in
    extra["taylorErr"] and must shrink at the same rate
    """
    _check_thetas(thetas, upper=0.5)
    base = _finite(F.value(m), "F(m)")
    rhs = _finite(_double_signed_integral(F, m, mPrime, mTilde), "double integral of delta2")
    firstAlong = _signed_integral(F, m, mPrime)
    secondAlong = _double_signed_integral(F, m, mPrime, mPrime)
    lhs, errors, taylorErrors, scale = [], [], [], abs(base)
    for theta in thetas:
        both = F.value(_two_direction_mix(m, mPrime, mTilde, theta, theta))
        alongPrime = F.value(mix(m, mPrime, theta))
        alongTilde = F.value(mix(m, mTilde, theta))
        scale = max(scale, abs(both), abs(alongPrime), abs(alongTilde))
        quotient = _finite((both - alongPrime - alongTilde + base) / theta ** 2, "double difference")
        lhs.append(quotient)
        errors.append(abs(quotient - rhs))
        remainder = alongPrime - base - theta * firstAlong - 0.5 * theta ** 2 * secondAlong
        taylorErrors.append(abs(remainder) / theta ** 2)
    floors = _roundoff_floors(thetas, scale, 2)
    orders = _estimated_orders(thetas, errors, floors)
    taylorOrders = _estimated_orders(thetas, taylorErrors, floors)
    passed = (_verdict(errors, orders, 1.0, tolerance) and _verdict(taylorErrors, taylorOrders, 1.0, tolerance))
    return ConvergenceReport(list(thetas), lhs, [rhs] * len(thetas), errors, orders, 1.0, tolerance, passed,
                             {"taylorErr": taylorErrors, "taylorOrder": taylorOrders})


def _flat_points(X: LiftedField) -> NDArray:
    return X.values.reshape(-1, X.measure.dim)


def lifted_gradient(F: FunctionalModel, X: LiftedField, m: EmpiricalMeasure = None) -> LiftedField:
    """
    :return: D_X F(X (x) m), the field (omega, x) -> grad_delta(X (x) m, X(omega, x))
    """
    pushed = tensor(X, m)
    gradients = F.grad_delta(pushed, _flat_points(X))
    return LiftedField(gradients.reshape(X.values.shape), X.measure)


def lifted_hessian_apply(F: FunctionalModel, X: LiftedField, Z: LiftedField, m: EmpiricalMeasure = None,
                         independentCopy: str = "derangement", seed: int = 0) -> LiftedField:
    """
    :param independentCopy: "derangement" pairs outcome omega with the single outcome pi(omega) of
    outcome_derangement(M, seed). "product" averages the tilde term over every outcome, which is the exact
    expectation under the empirical product law
    :return: D_X^2 F(X (x) m)(Z)
    """
    if X.measureTag != Z.measureTag:
        raise ValueError("X and Z must be attached to the same measure")
    M = max(X.numOutcomes, Z.numOutcomes)
    X, Z = X.broadcast(M), Z.broadcast(M)
    pushed = tensor(X, m)
    N, d = X.numAtoms, X.measure.dim
    points = _flat_points(X)
    directions = Z.values.reshape(-1, d)
    pointwise = np.einsum("pab,pb->pa", F.hess_delta(pushed, points), directions)
    if independentCopy == "product":
        tildeWeights = np.tile(X.measure.weights, M) / M
        crossTerm = F.apply_d2d1_delta2(pushed, points, points, tildeWeights, directions)
    elif independentCopy == "derangement":
        permutation = outcome_derangement(M, seed)
        crossTerm = np.zeros_like(points)
        for omega in range(M):
            rows = slice(omega * N, (omega + 1) * N)
            partner = permutation[omega]
            crossTerm[rows] = F.apply_d2d1_delta2(pushed, X.values[omega], X.values[partner], X.measure.weights,
                                                  Z.values[partner])
    else:
        raise ValueError(independentCopy + " is not a valid independent copy mode")
    return LiftedField((pointwise + crossTerm).reshape(X.values.shape), X.measure)


def _as_field_function(X) -> FieldFunction:
    if isinstance(X, FieldFunction):
        return X
    if isinstance(X, LiftedField):
        return nearest_atom_extension(X)
    raise ValueError("Expected a FieldFunction or LiftedField, got " + type(X).__name__)


def partial_m(F: FunctionalModel, X, m: EmpiricalMeasure, x) -> float:
    """
    :param X: Field defined everywhere (FieldFunction), or a LiftedField extended by its nearest atom
    :return: dF/dm (X (x) m)(x) = mean over outcomes of delta(X (x) m, X(omega, x))
    """
    fieldFunction = _as_field_function(X)
    x = np.asarray(x, dtype=float).reshape(1, 1, -1)
    if x.shape[2] != m.dim or not np.all(np.isfinite(x)):
        raise ValueError("Probe point must be a finite vector of dimension " + str(m.dim))
    onMeasure = fieldFunction.on_measure(m)
    pushed = tensor(onMeasure)
    images = fieldFunction.evaluate(np.broadcast_to(x, (max(1, onMeasure.numOutcomes), 1, m.dim)))
    return float(np.mean(F.delta(pushed, images.reshape(-1, m.dim))))


def chain_rule_total_delta(F: FunctionalModel, X, dXdm: Union[LiftedField, Callable], m: EmpiricalMeasure,
                           x) -> float:
    """
    :param dXdm: The field xi -> dX/dm(m, xi)(x) over the atoms of m, or a callable x -> that field
    :return: d/dm [F(X(m, .) (x) m)](x) = partial_m + < D_X F, dX/dm(., x) >
    """
    if dXdm is None:
        raise ValueError("The measure derivative of X is required")
    derivativeField = dXdm(x) if callable(dXdm) else dXdm
    onMeasure = _as_field_function(X).on_measure(m)
    gradient = lifted_gradient(F, onMeasure)
    return partial_m(F, X, m, x) + inner(gradient, derivativeField)


def monotonicity_gap(F: FunctionalModel, m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """
    :return: int (delta(m1, x) - delta(m2, x)) d(m1 - m2)(x)
    """
    onFirst = F.delta(m1, m1.atoms) - F.delta(m2, m1.atoms)
    onSecond = F.delta(m1, m2.atoms) - F.delta(m2, m2.atoms)
    return float(m1.weights @ onFirst - m2.weights @ onSecond)


def gateaux_gradient_check(F: FunctionalModel, X: LiftedField, Y: LiftedField, eps: float = 1e-4) -> float:
    """
    :return: Relative error between [F((X + eps Y) (x) m) - F(X (x) m)] / eps and < D_X F, Y >
    """
    M = max(X.numOutcomes, Y.numOutcomes)
    X, Y = X.broadcast(M), Y.broadcast(M)
    quotient = (F.value(tensor(X + Y * eps)) - F.value(tensor(X))) / eps
    exact = inner(lifted_gradient(F, X), Y)
    return abs(quotient - exact) / max(abs(exact), 1e-12)


def hessian_consistency_check(F: FunctionalModel, X: LiftedField, Z: LiftedField, eps: float = 1e-4) -> float:
    """
    :return: Relative H_m error between the central difference of D_X F along Z and D_X^2 F(Z)
    """
    M = max(X.numOutcomes, Z.numOutcomes)
    X, Z = X.broadcast(M), Z.broadcast(M)
    difference = (lifted_gradient(F, X + Z * eps) - lifted_gradient(F, X - Z * eps)) * (0.5 / eps)
    exact = lifted_hessian_apply(F, X, Z, independentCopy="product")
    return norm(difference - exact) / max(norm(exact), 1e-12)


@dataclass
class ConstantsEstimate:
    c: float
    cPrime: float
    numProbes: int
    numSkipped: int
    caveat: str = "lower-bound estimate from finite probes"


def estimate_constants(F: FunctionalModel, probes: List[Tuple[LiftedField, LiftedField]]) -> ConstantsEstimate:
    """
    Probes the Lipschitz constant of D_X F, its semi-monotonicity constant and, when available, the operator
    norm and lower bound of D_X^2 F, over (X, Z) pairs. Each pair gives ratios along the direction Z
    """
    if len(probes) < 10:
        raise ValueError("At least 10 probes are required, got " + str(len(probes)))
    c, cPrime, skipped = 0.0, 0.0, 0
    for X, Z in probes:
        M = max(X.numOutcomes, Z.numOutcomes)
        X, Z = X.broadcast(M), Z.broadcast(M)
        size = norm(Z)
        if size <= 1e-12:
            skipped += 1
            continue
        change = lifted_gradient(F, X + Z) - lifted_gradient(F, X)
        c = max(c, norm(change) / size)
        cPrime = max(cPrime, -inner(change, Z) / size ** 2)
        try:
            applied = lifted_hessian_apply(F, X, Z, independentCopy="product")
        except MissingDerivativeError:
            continue
        c = max(c, norm(applied) / size)
        cPrime = max(cPrime, -inner(applied, Z) / size ** 2)
    if skipped == len(probes):
        raise ValueError("Every probe direction had zero norm")
    return ConstantsEstimate(c, cPrime, len(probes), skipped)


def estimate_assumption_constants(F: FunctionalModel, F_T: FunctionalModel,
                                  probes: List[Tuple[LiftedField, LiftedField]], lam: float,
                                  horizon: float) -> AssumptionConstants:
    """
    Sampled counterpart of assumption_constants: c and c' of the running and terminal functionals are measured
    on the same probes. The estimates are lower bounds, so the margins they give are upper bounds on the
    declared ones
    """
    running = estimate_constants(F, probes)
    terminal = estimate_constants(F_T, probes)
    return AssumptionConstants(running.c, terminal.c, running.cPrime, terminal.cPrime, lam, horizon)
