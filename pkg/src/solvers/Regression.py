import logging
import sys
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from sklearn.linear_model import LinearRegression
from sklearn.preprocessing import PolynomialFeatures

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)


@dataclass
class RegressionFit:
    """
    Least-squares projection of targets on a polynomial basis of the kept state columns.
    coefficients has one row per basis function (PolynomialFeatures order) and one column per flattened target.
    degraded is set when the requested degree had to be lowered because the design matrix lost rank
    """
    fitted: NDArray
    coefficients: NDArray
    keptColumns: NDArray
    requestedDegree: int
    degree: int
    degraded: bool
    targetShape: tuple

    def basis(self, state: NDArray) -> NDArray:
        state = np.asarray(state, dtype=float).reshape(len(state), -1)[:, self.keptColumns]
        return PolynomialFeatures(degree=self.degree).fit_transform(state)

    def predict(self, state: NDArray) -> NDArray:
        values = self.basis(state) @ self.coefficients
        return values.reshape((len(values),) + self.targetShape)


def _varying_columns(state: NDArray) -> NDArray:
    spread = state.max(axis=0) - state.min(axis=0)
    scale = 1.0 + np.abs(state).max(axis=0)
    return np.flatnonzero(spread > 1e-12 * scale)


def regress_conditional(targets: NDArray, state: NDArray, degree: int, weights: NDArray = None) -> RegressionFit:
    """
    :param targets: S x ... samples of the quantity whose conditional expectation is wanted
    :param state: S x p samples of the conditioning state. Constant columns carry no information and are dropped
    :param degree: Requested polynomial degree. Lowered one step at a time while the design matrix is rank
    deficient or has more columns than samples; degree 0 is the weighted mean
    :param weights: Nonnegative sample weights (atom weights in a pooled regression)
    """
    targets = np.asarray(targets, dtype=float)
    numSamples = len(targets)
    targetShape = targets.shape[1:]
    flatTargets = targets.reshape(numSamples, -1)
    state = np.asarray(state, dtype=float).reshape(numSamples, -1)
    weights = np.ones(numSamples) if weights is None else np.asarray(weights, dtype=float)
    kept = _varying_columns(state)

    currentDegree = degree if len(kept) > 0 else 0
    while currentDegree > 0:
        design = PolynomialFeatures(degree=currentDegree).fit_transform(state[:, kept])
        if design.shape[1] <= np.count_nonzero(weights):
            model = LinearRegression(fit_intercept=False)
            model.fit(design, flatTargets, sample_weight=weights)
            if model.rank_ == design.shape[1]:
                coefficients = np.atleast_2d(model.coef_).T
                fitted = design @ coefficients
                return RegressionFit(fitted.reshape(targets.shape), coefficients, kept, degree, currentDegree,
                                     currentDegree < degree and len(kept) > 0, targetShape)
        currentDegree -= 1

    if degree > 0 and len(kept) > 0:
        logging.warning("Regression design matrix is rank deficient at every degree, using the weighted mean")
    mean = (weights @ flatTargets) / weights.sum()
    fitted = np.broadcast_to(mean, flatTargets.shape).reshape(targets.shape).copy()
    return RegressionFit(fitted, mean[None, :], kept, degree, 0, degree > 0 and len(kept) > 0, targetShape)


def regression_orthogonality(fit: RegressionFit, state: NDArray, targets: NDArray, weights: NDArray = None) -> float:
    """
    :return: Largest weighted correlation between the regression residual and a basis function.
    A consistent conditional expectation estimate leaves residuals orthogonal to the basis
    """
    basis = fit.basis(state)
    residual = (np.asarray(targets, dtype=float) - fit.fitted).reshape(len(basis), -1)
    weights = np.ones(len(basis)) if weights is None else np.asarray(weights, dtype=float)
    crossProducts = basis.T @ (weights[:, None] * residual)
    scales = np.sqrt(np.outer(weights @ basis ** 2, weights @ residual ** 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        correlations = np.where(scales > 1e-300, np.abs(crossProducts) / scales, 0.0)
    return float(correlations.max()) if correlations.size else 0.0
