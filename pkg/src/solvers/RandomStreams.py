import numpy as np
from numpy.typing import NDArray

# Stream identifiers. Arrays drawn from different streams are independent, which is how a field is
# declared independent of the Brownian filtration
BROWNIAN_STREAM = 0
PROBE_STREAM = 1
DIRECTION_STREAM = 2
DERANGEMENT_STREAM = 3
RESTART_STREAM_BASE = 1000


def get_generator(seed: int, stream: int, outcome: int = 0) -> np.random.Generator:
    """
    :return: A Philox generator keyed by (seed, stream) whose counter starts at a block reserved for this outcome.
    Draws for an outcome never depend on how many other outcomes were generated, or by which worker
    """
    key = np.array([seed % 2 ** 64, stream % 2 ** 64], dtype=np.uint64)
    counter = np.array([0, 0, outcome, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def standard_normals(seed: int, stream: int, numOutcomes: int, shape: tuple) -> NDArray:
    """
    :return: Array of shape (numOutcomes, *shape) with one independent row per outcome
    """
    rows = [get_generator(seed, stream, outcome).standard_normal(shape) for outcome in range(numOutcomes)]
    return np.stack(rows)


def brownian_increments(*, seed: int, numOutcomes: int, numSteps: int, d: int, dt: float, firstStep: int = 0,
                        stream: int = BROWNIAN_STREAM) -> NDArray:
    """
    :param firstStep: Index of the first returned step on the global grid. A solve restarted at step k with
    firstStep=k sees exactly the increments the full solve used from step k on
    :return: M x numSteps x d array of increments with variance dt per component
    """
    if numSteps < 0 or firstStep < 0:
        raise ValueError("Step counts must be nonnegative")
    normals = standard_normals(seed, stream, numOutcomes, (firstStep + numSteps, d))
    return np.sqrt(dt) * normals[:, firstStep:, :]


def outcome_derangement(numOutcomes: int, seed: int) -> NDArray:
    """
    :return: A permutation of range(numOutcomes) with no fixed point (Sattolo's cycle), identity when numOutcomes is 1
    """
    permutation = np.arange(numOutcomes)
    rng = get_generator(seed, DERANGEMENT_STREAM)
    for i in range(numOutcomes - 1, 0, -1):
        j = int(rng.integers(0, i))
        permutation[i], permutation[j] = permutation[j], permutation[i]
    return permutation
