from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import yaml
from numpy.typing import NDArray

from src.control.ControlProblem import REPRESENTATIONS
from src.functionals.FunctionalModels import FunctionalModel, LQFunctional, get_functional
from src.helpers.Errors import ConfigError, MissingDerivativeError
from src.helpers.FilepathUtils import resolve_config_path
from src.measures.EmpiricalMeasure import EmpiricalMeasure, load_measure_csv, make_empirical, random_measure
from src.oracle.LQOracle import LQSpec
from src.solvers.SolverConfig import SolverConfig, TimeGrid, assumption_constants

REQUIRED_KEYS = ("seed", "functional", "grid", "solver", "measure")
SOLVER_KEYS = {"lambda": "lam", "sigma": "sigma", "numOutcomes": "numOutcomes", "damping": "damping",
               "basisDegree": "basisDegree", "tol": "tol", "maxIters": "maxIters",
               "populationCap": "populationCap", "independentCopy": "independentCopy",
               "minDamping": "minDamping", "maxNestedSolves": "maxNestedSolves"}
# option name -> (kind, smallest allowed value or the allowed choices)
OPTION_RULES = {"learningRate": (float, 0.0), "maxIters": (int, 1), "tol": (float, 0.0), "tolerance": (float, 0.0),
                "representation": (str, REPRESENTATIONS), "routeTolerance": (float, 0.0),
                "valueTolerance": (float, 0.0), "gradientTolerance": (float, 0.0), "eps": (float, 0.0),
                "numProbes": (int, 10), "probeOutcomes": (int, 1), "regularity": (bool, None),
                "fdCrossCheck": (bool, None), "decoupledFlow": (bool, None), "gaussianProbe": (bool, None)}


@dataclass(frozen=True, eq=False)
class ProbeConfig:
    """
    :param points: Probe points x for value, master and flow experiments
    :param times: Times t at which value, bellman, master and lq-compare are evaluated
    :param steps: Step sizes h for the DPP ladder and the time-regularity probe
    :param thetas: Mixing weights for the derivative checks
    :param numPairs: Random measure pairs per derivative check
    """
    points: NDArray
    times: List[float]
    steps: List[float]
    thetas: List[float]
    numPairs: int = 5


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    seed: int
    F: FunctionalModel
    F_T: FunctionalModel
    functionalSpec: dict
    terminalSpec: dict
    grid: TimeGrid
    solver: SolverConfig
    measure: EmpiricalMeasure
    probes: ProbeConfig
    replications: int = 1
    refinements: int = 0
    outputDirectory: Optional[str] = None
    options: dict = field(default_factory=dict)

    def lq_spec(self) -> LQSpec:
        """
        :return: The LQ problem described by the functional blocks. Raises ConfigError for other families
        """
        if not isinstance(self.F, LQFunctional) or not isinstance(self.F_T, LQFunctional):
            raise ConfigError("functional.name", "lq-compare needs the lq family for both functional and terminal")
        return LQSpec(self.F.q, self.F.qBar, self.F_T.q, self.F_T.qBar, self.solver.lam, self.solver.sigma,
                      self.grid.t0, self.grid.T, self.measure.dim)

    def option(self, name: str, default=None):
        return self.options.get(name, default)


def _require(block: dict, key: str, path: str):
    if not isinstance(block, dict) or key not in block or block[key] is None:
        raise ConfigError(path + key, "is required")
    return block[key]


def _number(value, path: str, kind=float):
    if isinstance(value, bool):
        raise ConfigError(path, str(value) + " is not a valid number")
    try:
        converted = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(path, str(value) + " is not a valid number")
    if kind is int and converted != value:
        raise ConfigError(path, str(value) + " is not a valid integer")
    return converted


def _functional(block, path: str) -> FunctionalModel:
    if not isinstance(block, dict):
        raise ConfigError(path, "must be a mapping with a name")
    try:
        return get_functional(block)
    except KeyError as missing:
        raise ConfigError(path + "." + str(missing.args[0]), "is required for " + str(block.get("name")))
    except (TypeError, ValueError) as error:
        raise ConfigError(path, str(error))


def _grid(block: dict) -> TimeGrid:
    try:
        return TimeGrid(_number(block.get("t0", 0.0), "grid.t0"), _number(_require(block, "T", "grid."), "grid.T"),
                        _number(_require(block, "numSteps", "grid."), "grid.numSteps", int))
    except ValueError as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError("grid", str(error))


def _sigma(value, d: int) -> NDArray:
    sigma = np.asarray(value, dtype=float)
    if sigma.ndim == 0:
        return float(sigma) * np.eye(d)
    if sigma.ndim == 1:
        return np.diag(sigma)
    return sigma


def _solver(block: dict, seed: int, d: int) -> SolverConfig:
    unknown = set(block) - set(SOLVER_KEYS)
    if unknown:
        raise ConfigError("solver." + sorted(unknown)[0], "is not a valid solver option")
    _require(block, "lambda", "solver.")
    options = {SOLVER_KEYS[key]: value for key, value in block.items()}
    options["lam"] = _number(options["lam"], "solver.lambda")
    options["sigma"] = _sigma(options.get("sigma", 0.0), d)
    try:
        return SolverConfig(seed=seed, **options)
    except (TypeError, ValueError) as error:
        raise ConfigError("solver", str(error))


def _measure(block: dict, configPath: str, seed: int) -> EmpiricalMeasure:
    try:
        if "csv" in block:
            return load_measure_csv(resolve_config_path(configPath, block["csv"]))
        if "atoms" in block:
            return make_empirical(np.asarray(block["atoms"], dtype=float), block.get("weights"))
        if "random" in block:
            random = block["random"]
            return random_measure(seed, _number(_require(random, "size", "measure.random."), "measure.random.size",
                                                int),
                                  _number(random.get("d", 1), "measure.random.d", int),
                                  _number(random.get("scale", 1.0), "measure.random.scale"))
    except (OSError, KeyError) as error:
        raise ConfigError("measure", str(error))
    except ValueError as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError("measure", str(error))
    raise ConfigError("measure", "needs one of csv, atoms or random")


def _probes(block: dict, measure: EmpiricalMeasure, grid: TimeGrid) -> ProbeConfig:
    block = block or {}
    points = np.asarray(block.get("points", measure.atoms[:1].tolist()), dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, measure.dim)
    if points.shape[1] != measure.dim:
        raise ConfigError("probes.points", "must have dimension " + str(measure.dim))
    times = [_number(t, "probes.times") for t in block.get("times", [grid.t0])]
    steps = [_number(h, "probes.steps") for h in block.get("steps", [grid.dt])]
    thetas = [_number(theta, "probes.thetas") for theta in block.get("thetas", [1e-1, 1e-2, 1e-3, 1e-4])]
    return ProbeConfig(points, times, steps, thetas, _number(block.get("numPairs", 5), "probes.numPairs", int))


def _options(block) -> dict:
    block = block or {}
    if not isinstance(block, dict):
        raise ConfigError("options", "must be a mapping")
    options = {}
    for name, value in block.items():
        path = "options." + str(name)
        if name not in OPTION_RULES:
            raise ConfigError(path, "is not a valid option")
        kind, rule = OPTION_RULES[name]
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(path, str(value) + " is not true or false")
            options[name] = value
        elif kind is str:
            if value not in rule:
                raise ConfigError(path, str(value) + " is not one of " + ", ".join(rule))
            options[name] = value
        else:
            converted = _number(value, path, kind)
            if (kind is float and converted <= rule) or (kind is int and converted < rule):
                raise ConfigError(path, "must be " + ("positive" if kind is float else "at least " + str(rule)))
            options[name] = converted
    return options


def parse_experiment_config(raw: dict, configPath: str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "the config must be a mapping")
    for key in REQUIRED_KEYS:
        _require(raw, key, "")
    seed = _number(raw["seed"], "seed", int)
    if seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    F = _functional(raw["functional"], "functional")
    terminalSpec = raw.get("terminal", {"name": "zero"})
    F_T = _functional(terminalSpec, "terminal")
    grid = _grid(raw["grid"])
    measure = _measure(raw["measure"], configPath, seed)
    solver = _solver(raw["solver"], seed, measure.dim)
    if solver.dim != measure.dim:
        raise ConfigError("solver.sigma", "must be " + str(measure.dim) + " x " + str(measure.dim))
    try:
        constants = assumption_constants(F, F_T, solver.lam, grid.T - grid.t0)
    except MissingDerivativeError as error:
        raise ConfigError("functional", str(error))
    if constants.first_order_margin() <= 0:
        raise ConfigError("solver.lambda", str(solver.lam) + " violates the convexity margin (margin "
                          + str(constants.first_order_margin()) + ")")
    replications = _number(raw.get("replications", 1), "replications", int)
    if replications < 1:
        raise ConfigError("replications", "must be at least 1")
    refinements = _number(raw.get("refinements", 0), "refinements", int)
    output = raw.get("output")
    return ExperimentConfig(seed, F, F_T, dict(raw["functional"]), dict(terminalSpec), grid, solver, measure,
                            _probes(raw.get("probes"), measure, grid), replications, refinements,
                            None if output is None else resolve_config_path(configPath, output),
                            _options(raw.get("options")))


def load_experiment_config(configPath: str) -> ExperimentConfig:
    try:
        with open(configPath, encoding="utf-8") as file:
            raw = yaml.safe_load(file)
    except OSError as error:
        raise ConfigError("<file>", str(error))
    except yaml.YAMLError as error:
        raise ConfigError("<file>", "not valid YAML: " + str(error))
    return parse_experiment_config(raw, configPath)
