from typing import Dict

import numpy as np
from numpy.typing import NDArray

from src.helpers.Errors import MissingDerivativeError
from src.measures.EmpiricalMeasure import EmpiricalMeasure

# Upper bound on the number of floats held by one block of a pairwise evaluation
PAIRWISE_BLOCK = 4_000_000


class FunctionalModel:
    """
    A functional F on P_2(R^d) together with its derivative ladder.

    Every method is vectorized over points: `points` is a P x d array, `tildePoints` a Q x d array, and the
    return shapes are
        delta (P,), grad_delta (P, d), hess_delta (P, d, d), third_delta (P, d, d, d),
        delta2 (P, Q), d1_delta2 (P, Q, d), d2d1_delta2 (P, Q, d, d), d1sq_delta2 (P, Q, d, d),
        d1sq_d2_delta2 (P, Q, d, d, d).
    In the two-point tensors the first point is x and the second is x_tilde, so d2d1_delta2[p, q, a, b] is the
    derivative in x_a and x_tilde_b, and d1sq_d2_delta2[p, q, a, b, c] differentiates twice in x and once in x_tilde.
    delta is normalized to integrate to 0 against m, and delta2 in each of its arguments.

    Subclasses override what they support; anything missing raises MissingDerivativeError.
    The aggregated operators at the bottom are what the solvers call; subclasses with separable
    structure override them to avoid forming P x Q tensors
    """
    name = "functional"

    def value(self, m: EmpiricalMeasure) -> float:
        raise MissingDerivativeError(self.name + " does not define its value")

    def delta(self, m: EmpiricalMeasure, points: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " does not define delta")

    def grad_delta(self, m: EmpiricalMeasure, points: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " does not define grad_delta")

    def hess_delta(self, m: EmpiricalMeasure, points: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " does not define hess_delta")

    def delta2(self, m: EmpiricalMeasure, points: NDArray, tildePoints: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " does not define delta2")

    def d1_delta2(self, m: EmpiricalMeasure, points: NDArray, tildePoints: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " does not define d1_delta2")

    def d2d1_delta2(self, m: EmpiricalMeasure, points: NDArray, tildePoints: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " does not define d2d1_delta2")

    def third_delta(self, m: EmpiricalMeasure, points: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " is not of class S_c (no third_delta)")

    def d1sq_delta2(self, m: EmpiricalMeasure, points: NDArray, tildePoints: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " is not of class S_c (no d1sq_delta2)")

    def d1sq_d2_delta2(self, m: EmpiricalMeasure, points: NDArray, tildePoints: NDArray) -> NDArray:
        raise MissingDerivativeError(self.name + " is not of class S_c (no d1sq_d2_delta2)")

    def declared_constants(self) -> Dict[str, float]:
        """
        :return: {"c": bound on the operator norm of D_X^2 F, "cPrime": semi-monotonicity constant},
        valid on every measure
        """
        raise MissingDerivativeError(self.name + " does not declare its constants")

    # Aggregated operators. tildeWeights need not sum to one.

    def average_d1_delta2(self, m, points, tildePoints, tildeWeights) -> NDArray:
        """
        :return: sum_q w_q d1_delta2(m, p, q), shape (P, d)
        """
        total = np.zeros(points.shape)
        for block in _blocks(len(points), len(tildePoints), points.shape[1]):
            total += np.einsum("pqa,q->pa", self.d1_delta2(m, points, tildePoints[block]), tildeWeights[block])
        return total

    def apply_d2d1_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors) -> NDArray:
        """
        :return: sum_q w_q d2d1_delta2(m, p, q) @ v_q, shape (P, d)
        """
        total = np.zeros(points.shape)
        d = points.shape[1]
        for block in _blocks(len(points), len(tildePoints), d * d):
            weighted = tildeWeights[block, None] * tildeVectors[block]
            total += np.einsum("pqab,qb->pa", self.d2d1_delta2(m, points, tildePoints[block]), weighted)
        return total

    def average_d1sq_delta2(self, m, points, tildePoints, tildeWeights) -> NDArray:
        d = points.shape[1]
        total = np.zeros((len(points), d, d))
        for block in _blocks(len(points), len(tildePoints), d * d):
            total += np.einsum("pqab,q->pab", self.d1sq_delta2(m, points, tildePoints[block]), tildeWeights[block])
        return total

    def apply_d1sq_d2_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors) -> NDArray:
        """
        :return: sum_q w_q d1sq_d2_delta2(m, p, q) contracted with v_q on the x_tilde slot, shape (P, d, d)
        """
        d = points.shape[1]
        total = np.zeros((len(points), d, d))
        for block in _blocks(len(points), len(tildePoints), d * d * d):
            weighted = tildeWeights[block, None] * tildeVectors[block]
            total += np.einsum("pqabc,qc->pab", self.d1sq_d2_delta2(m, points, tildePoints[block]), weighted)
        return total

    def to_string(self):
        return self.name


def _blocks(numPoints: int, numTilde: int, floatsPerPair: int):
    blockSize = max(1, PAIRWISE_BLOCK // max(1, numPoints * floatsPerPair))
    for start in range(0, numTilde, blockSize):
        yield slice(start, min(start + blockSize, numTilde))


def _eye_stack(count: int, d: int) -> NDArray:
    return np.broadcast_to(np.eye(d), (count, d, d)).copy()


class ConstantFunctional(FunctionalModel):
    """
    F(m) = c. Every derivative vanishes
    """
    name = "constant"

    def __init__(self, c: float = 0.0):
        self.c = float(c)

    def value(self, m):
        return self.c

    def delta(self, m, points):
        return np.zeros(len(points))

    def grad_delta(self, m, points):
        return np.zeros(points.shape)

    def hess_delta(self, m, points):
        return np.zeros((len(points), points.shape[1], points.shape[1]))

    def third_delta(self, m, points):
        d = points.shape[1]
        return np.zeros((len(points), d, d, d))

    def delta2(self, m, points, tildePoints):
        return np.zeros((len(points), len(tildePoints)))

    def d1_delta2(self, m, points, tildePoints):
        return np.zeros((len(points), len(tildePoints), points.shape[1]))

    def d2d1_delta2(self, m, points, tildePoints):
        d = points.shape[1]
        return np.zeros((len(points), len(tildePoints), d, d))

    def d1sq_delta2(self, m, points, tildePoints):
        return self.d2d1_delta2(m, points, tildePoints)

    def d1sq_d2_delta2(self, m, points, tildePoints):
        d = points.shape[1]
        return np.zeros((len(points), len(tildePoints), d, d, d))

    def average_d1_delta2(self, m, points, tildePoints, tildeWeights):
        return np.zeros(points.shape)

    def apply_d2d1_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        return np.zeros(points.shape)

    def average_d1sq_delta2(self, m, points, tildePoints, tildeWeights):
        d = points.shape[1]
        return np.zeros((len(points), d, d))

    def apply_d1sq_d2_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        return self.average_d1sq_delta2(m, points, tildePoints, tildeWeights)

    def declared_constants(self):
        return {"c": 0.0, "cPrime": 0.0}


class LinearFunctional(ConstantFunctional):
    """
    F(m) = a . int x dm + c
    """
    name = "linear"

    def __init__(self, a, c: float = 0.0):
        super().__init__(c)
        self.a = np.atleast_1d(np.asarray(a, dtype=float))

    def value(self, m):
        return float(self.a @ m.mean()) + self.c

    def delta(self, m, points):
        return (points - m.mean()) @ self.a

    def grad_delta(self, m, points):
        return np.broadcast_to(self.a, points.shape).copy()


class LQFunctional(FunctionalModel):
    """
    F(m) = (q/2) int |x|^2 dm + (qBar/2) |int x dm|^2
    """
    name = "lq"

    def __init__(self, q: float, qBar: float = 0.0):
        self.q = float(q)
        self.qBar = float(qBar)

    def value(self, m):
        return 0.5 * self.q * m.second_moment() + 0.5 * self.qBar * float(np.sum(m.mean() ** 2))

    def delta(self, m, points):
        mean = m.mean()
        squares = np.sum(points ** 2, axis=1)
        return 0.5 * self.q * (squares - m.second_moment()) + self.qBar * (points - mean) @ mean

    def grad_delta(self, m, points):
        return self.q * points + self.qBar * m.mean()

    def hess_delta(self, m, points):
        return self.q * _eye_stack(len(points), points.shape[1])

    def third_delta(self, m, points):
        d = points.shape[1]
        return np.zeros((len(points), d, d, d))

    def delta2(self, m, points, tildePoints):
        mean = m.mean()
        return self.qBar * (points - mean) @ (tildePoints - mean).T

    def d1_delta2(self, m, points, tildePoints):
        shifted = self.qBar * (tildePoints - m.mean())
        return np.broadcast_to(shifted[None, :, :], (len(points),) + shifted.shape).copy()

    def d2d1_delta2(self, m, points, tildePoints):
        d = points.shape[1]
        return self.qBar * np.broadcast_to(np.eye(d), (len(points), len(tildePoints), d, d)).copy()

    def d1sq_delta2(self, m, points, tildePoints):
        d = points.shape[1]
        return np.zeros((len(points), len(tildePoints), d, d))

    def d1sq_d2_delta2(self, m, points, tildePoints):
        d = points.shape[1]
        return np.zeros((len(points), len(tildePoints), d, d, d))

    def average_d1_delta2(self, m, points, tildePoints, tildeWeights):
        average = self.qBar * (tildeWeights @ tildePoints - tildeWeights.sum() * m.mean())
        return np.broadcast_to(average, points.shape).copy()

    def apply_d2d1_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        return np.broadcast_to(self.qBar * (tildeWeights @ tildeVectors), points.shape).copy()

    def average_d1sq_delta2(self, m, points, tildePoints, tildeWeights):
        d = points.shape[1]
        return np.zeros((len(points), d, d))

    def apply_d1sq_d2_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        return self.average_d1sq_delta2(m, points, tildePoints, tildeWeights)

    def declared_constants(self):
        # D_X^2 F acts as q on mean-zero directions and q + qBar on constants
        return {"c": max(abs(self.q), abs(self.q + self.qBar)),
                "cPrime": max(0.0, -self.q, -(self.q + self.qBar))}

    def to_string(self):
        return "lq(q=" + str(self.q) + ", qBar=" + str(self.qBar) + ")"


class CylindricalFunctional(FunctionalModel):
    """
    F(m) = phi(int g_1 dm, ..., int g_k dm) with g_l(x) = sin(A_l . x + b_l) and
    phi(y) = y^T K y / 2 + h . y
    """
    name = "cylindrical"

    def __init__(self, frequencies, phases=None, curvature=None, slope=None):
        self.frequencies = np.atleast_2d(np.asarray(frequencies, dtype=float))
        k = len(self.frequencies)
        self.phases = np.zeros(k) if phases is None else np.asarray(phases, dtype=float).reshape(k)
        self.curvature = np.eye(k) if curvature is None else np.asarray(curvature, dtype=float).reshape(k, k)
        self.slope = np.zeros(k) if slope is None else np.asarray(slope, dtype=float).reshape(k)
        if not np.allclose(self.curvature, self.curvature.T):
            raise ValueError("Curvature matrix of a cylindrical functional must be symmetric")

    def _phase(self, points):
        return points @ self.frequencies.T + self.phases

    def _g(self, points):
        return np.sin(self._phase(points))

    def _grad_g(self, points):
        return np.cos(self._phase(points))[:, :, None] * self.frequencies[None, :, :]

    def _hess_g(self, points):
        outer = np.einsum("la,lb->lab", self.frequencies, self.frequencies)
        return -np.sin(self._phase(points))[:, :, None, None] * outer[None]

    def _third_g(self, points):
        outer = np.einsum("la,lb,lc->labc", self.frequencies, self.frequencies, self.frequencies)
        return -np.cos(self._phase(points))[:, :, None, None, None] * outer[None]

    def _moments(self, m):
        return m.weights @ self._g(m.atoms)

    def _dphi(self, m):
        return self.curvature @ self._moments(m) + self.slope

    def value(self, m):
        y = self._moments(m)
        return float(0.5 * y @ self.curvature @ y + self.slope @ y)

    def delta(self, m, points):
        return (self._g(points) - self._moments(m)) @ self._dphi(m)

    def grad_delta(self, m, points):
        return np.einsum("pla,l->pa", self._grad_g(points), self._dphi(m))

    def hess_delta(self, m, points):
        return np.einsum("plab,l->pab", self._hess_g(points), self._dphi(m))

    def third_delta(self, m, points):
        return np.einsum("plabc,l->pabc", self._third_g(points), self._dphi(m))

    def delta2(self, m, points, tildePoints):
        y = self._moments(m)
        return (self._g(points) - y) @ self.curvature @ (self._g(tildePoints) - y).T

    def d1_delta2(self, m, points, tildePoints):
        centred = (self._g(tildePoints) - self._moments(m)) @ self.curvature
        return np.einsum("pla,ql->pqa", self._grad_g(points), centred)

    def d2d1_delta2(self, m, points, tildePoints):
        coupled = np.einsum("lr,qrb->qlb", self.curvature, self._grad_g(tildePoints))
        return np.einsum("pla,qlb->pqab", self._grad_g(points), coupled)

    def d1sq_delta2(self, m, points, tildePoints):
        centred = (self._g(tildePoints) - self._moments(m)) @ self.curvature
        return np.einsum("plab,ql->pqab", self._hess_g(points), centred)

    def d1sq_d2_delta2(self, m, points, tildePoints):
        coupled = np.einsum("lr,qrc->qlc", self.curvature, self._grad_g(tildePoints))
        return np.einsum("plab,qlc->pqabc", self._hess_g(points), coupled)

    def _weighted_centred(self, m, tildePoints, tildeWeights):
        return self.curvature @ (tildeWeights @ self._g(tildePoints) - tildeWeights.sum() * self._moments(m))

    def _weighted_slopes(self, tildePoints, tildeWeights, tildeVectors):
        projected = np.einsum("qrb,qb->qr", self._grad_g(tildePoints), tildeVectors)
        return self.curvature @ (tildeWeights @ projected)

    def average_d1_delta2(self, m, points, tildePoints, tildeWeights):
        return np.einsum("pla,l->pa", self._grad_g(points), self._weighted_centred(m, tildePoints, tildeWeights))

    def apply_d2d1_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        coefficients = self._weighted_slopes(tildePoints, tildeWeights, tildeVectors)
        return np.einsum("pla,l->pa", self._grad_g(points), coefficients)

    def average_d1sq_delta2(self, m, points, tildePoints, tildeWeights):
        return np.einsum("plab,l->pab", self._hess_g(points), self._weighted_centred(m, tildePoints, tildeWeights))

    def apply_d1sq_d2_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        coefficients = self._weighted_slopes(tildePoints, tildeWeights, tildeVectors)
        return np.einsum("plab,l->pab", self._hess_g(points), coefficients)

    def declared_constants(self):
        squaredFrequencies = np.sum(self.frequencies ** 2, axis=1)
        # |int g dm| <= 1, so |d phi| <= row sums of |K| plus |h|
        slopeBound = np.sum(np.abs(self.curvature), axis=1) + np.abs(self.slope)
        pointwise = float(slopeBound @ squaredFrequencies)
        crossTerm = float(np.linalg.norm(self.curvature, 2) * squaredFrequencies.sum())
        return {"c": pointwise + crossTerm, "cPrime": pointwise + crossTerm}

    def to_string(self):
        return "cylindrical(k=" + str(len(self.frequencies)) + ")"


class InteractionEnergy(FunctionalModel):
    """
    F(m) = 1/2 int int phi(x - y) dm(x) dm(y) with the Gaussian kernel phi(z) = kappa exp(-|z|^2 / (2 width^2)).
    Evaluation is exact and pairwise, so its cost grows with the product of the atom counts involved
    """
    name = "interaction"

    def __init__(self, kappa: float = 1.0, width: float = 1.0):
        if width <= 0:
            raise ValueError("Kernel width must be positive")
        self.kappa = float(kappa)
        self.width = float(width)

    def _kernel(self, z):
        return self.kappa * np.exp(-np.sum(z ** 2, axis=-1) / (2 * self.width ** 2))

    def _kernel_grad(self, z):
        return -(self._kernel(z) / self.width ** 2)[..., None] * z

    def _kernel_hess(self, z):
        d = z.shape[-1]
        s2 = self.width ** 2
        outer = z[..., :, None] * z[..., None, :] / s2 ** 2 - np.eye(d) / s2
        return self._kernel(z)[..., None, None] * outer

    def _kernel_third(self, z):
        d = z.shape[-1]
        s2 = self.width ** 2
        eye = np.eye(d)
        cubic = -z[..., :, None, None] * z[..., None, :, None] * z[..., None, None, :] / s2 ** 3
        mixed = (eye[:, :, None] * z[..., None, None, :] + eye[:, None, :] * z[..., None, :, None]
                 + eye[None, :, :] * z[..., :, None, None]) / s2 ** 2
        return self._kernel(z)[..., None, None, None] * (cubic + mixed)

    def _against(self, derivative, m, points, floatsPerPair):
        """
        :return: sum_j w_j derivative(p - a_j) over the atoms a_j of m
        """
        result = None
        for block in _blocks(len(points), m.size, floatsPerPair):
            z = points[:, None, :] - m.atoms[None, block, :]
            part = np.einsum("pq...,q->p...", derivative(z), m.weights[block])
            result = part if result is None else result + part
        return result

    def value(self, m):
        return 0.5 * float(m.weights @ self._against(self._kernel, m, m.atoms, 1))

    def _potential(self, m, points):
        return self._against(self._kernel, m, points, 1)

    def delta(self, m, points):
        return self._potential(m, points) - 2 * self.value(m)

    def grad_delta(self, m, points):
        return self._against(self._kernel_grad, m, points, points.shape[1])

    def hess_delta(self, m, points):
        return self._against(self._kernel_hess, m, points, points.shape[1] ** 2)

    def third_delta(self, m, points):
        return self._against(self._kernel_third, m, points, points.shape[1] ** 3)

    def delta2(self, m, points, tildePoints):
        z = points[:, None, :] - tildePoints[None, :, :]
        return (self._kernel(z) - self._potential(m, points)[:, None] - self._potential(m, tildePoints)[None, :]
                + 2 * self.value(m))

    def d1_delta2(self, m, points, tildePoints):
        z = points[:, None, :] - tildePoints[None, :, :]
        return self._kernel_grad(z) - self.grad_delta(m, points)[:, None, :]

    def d2d1_delta2(self, m, points, tildePoints):
        return -self._kernel_hess(points[:, None, :] - tildePoints[None, :, :])

    def d1sq_delta2(self, m, points, tildePoints):
        z = points[:, None, :] - tildePoints[None, :, :]
        return self._kernel_hess(z) - self.hess_delta(m, points)[:, None, :, :]

    def d1sq_d2_delta2(self, m, points, tildePoints):
        return -self._kernel_third(points[:, None, :] - tildePoints[None, :, :])

    def average_d1_delta2(self, m, points, tildePoints, tildeWeights):
        tilde = make_weighted_cloud(tildePoints, tildeWeights)
        return (self._against(self._kernel_grad, tilde, points, points.shape[1])
                - tildeWeights.sum() * self.grad_delta(m, points))

    def apply_d2d1_delta2(self, m, points, tildePoints, tildeWeights, tildeVectors):
        total = np.zeros(points.shape)
        d = points.shape[1]
        for block in _blocks(len(points), len(tildePoints), d * d):
            z = points[:, None, :] - tildePoints[None, block, :]
            weighted = tildeWeights[block, None] * tildeVectors[block]
            total -= np.einsum("pqab,qb->pa", self._kernel_hess(z), weighted)
        return total

    def average_d1sq_delta2(self, m, points, tildePoints, tildeWeights):
        tilde = make_weighted_cloud(tildePoints, tildeWeights)
        d = points.shape[1]
        return (self._against(self._kernel_hess, tilde, points, d * d)
                - tildeWeights.sum() * self.hess_delta(m, points))

    def declared_constants(self):
        # |hess phi| <= kappa / width^2, once for the pointwise term and once for the cross term
        bound = 2 * abs(self.kappa) / self.width ** 2
        return {"c": bound, "cPrime": bound}

    def to_string(self):
        return "interaction(kappa=" + str(self.kappa) + ", width=" + str(self.width) + ")"


class _WeightedCloud:
    """
    Atoms with arbitrary nonnegative weights, used where a tilde population is integrated against a kernel
    """

    def __init__(self, atoms, weights):
        self.atoms = atoms
        self.weights = weights
        self.size = len(atoms)


def make_weighted_cloud(atoms: NDArray, weights: NDArray) -> _WeightedCloud:
    return _WeightedCloud(np.asarray(atoms, dtype=float), np.asarray(weights, dtype=float))


def get_functional(spec: dict) -> FunctionalModel:
    """
    :param spec: Parameter block with a "name" key, as read from an experiment config
    """
    if spec is None:
        raise ValueError("A functional block is required")
    name = spec.get("name")
    if name == "zero":
        return ConstantFunctional(0.0)
    elif name == "constant":
        return ConstantFunctional(spec.get("c", 0.0))
    elif name == "linear":
        return LinearFunctional(spec["a"], spec.get("c", 0.0))
    elif name == "lq":
        return LQFunctional(spec["q"], spec.get("qBar", 0.0))
    elif name == "cylindrical":
        return CylindricalFunctional(spec["frequencies"], spec.get("phases"), spec.get("curvature"),
                                     spec.get("slope"))
    elif name == "interaction":
        return InteractionEnergy(spec.get("kappa", 1.0), spec.get("width", 1.0))
    else:
        raise ValueError(str(name) + " is not a valid functional type")
