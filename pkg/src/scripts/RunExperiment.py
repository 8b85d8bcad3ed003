import argparse
import logging
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
import pandas as pd

from src.control.ControlProblem import MinimizeReport, control_from_adjoint, cost, cost_gradient, minimize
from src.control.ValueFunction import (bundle_value, dpp_residual, grid_from, growth_probe, replicate,
                                       time_regularity_probe, value)
from src.functionals.DerivativeChecks import (check_first_derivative, check_second_derivative,
                                              estimate_assumption_constants, estimate_constants)
from src.helpers.Errors import ConfigError, ConvergenceError, GridError, InvariantViolation, MissingDerivativeError
from src.helpers.ExperimentConfig import ExperimentConfig, load_experiment_config
from src.helpers.FilepathUtils import get_output_directory
from src.helpers.Reports import Summary, write_frame
from src.measures.EmpiricalMeasure import random_measure, with_probe_atoms
from src.measures.LiftedField import LiftedField, identity_field
from src.oracle.LQOracle import LQSpec, lq_discrete_value, lq_value, riccati_solve
from src.pde.Residuals import (bellman_residual, decoupled_flow, gaussian_probe_check, master_residual,
                               oracle_bellman_residual, oracle_master_residual)
from src.solvers.ForwardBackward import PathBundle, solve_first_order
from src.solvers.RandomStreams import DIRECTION_STREAM, standard_normals
from src.solvers.SolverConfig import assumption_constants

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_INVARIANT = 4

ORACLE_TOLERANCE = 1e-8
TERMINAL_TOLERANCE = 1e-10
RATE_THRESHOLD = 1.7
RESIDUAL_FLOOR = 1e-12
MIN_ROUTE_REPLICATIONS = 4
ROUTE_STDERRS = 3.0


@dataclass
class RunContext:
    config: ExperimentConfig
    outputDirectory: str
    summary: Summary
    replications: int
    threads: int

    def write(self, frame: pd.DataFrame, artifactName: str):
        write_frame(frame, self.outputDirectory, artifactName)


def _rungs(config: ExperimentConfig):
    """
    Yields (rung, grid, cfg) with dt halved and the outcome count doubled at every rung
    """
    grid, cfg = config.grid, config.solver
    for rung in range(config.refinements + 1):
        yield rung, grid, cfg
        grid, cfg = grid.refined(), cfg.with_changes(numOutcomes=2 * cfg.numOutcomes)


def _rate_check(summary: Summary, name: str, residuals: List[float]):
    if len(residuals) < 2:
        return
    ratios = []
    for coarse, fine in zip(residuals, residuals[1:]):
        ratios.append(float("inf") if fine <= RESIDUAL_FLOOR else coarse / fine)
    summary.add(name + ".min_ratio", min(ratios))
    summary.check(name + "_rate", min(ratios) >= RATE_THRESHOLD)


def _lq_spec_or_none(config: ExperimentConfig):
    try:
        return config.lq_spec()
    except ConfigError:
        return None


def _tagged(frame: pd.DataFrame, **columns) -> pd.DataFrame:
    for position, (name, column) in enumerate(columns.items()):
        frame.insert(position, name, column)
    return frame


def run_verify_derivatives(context: RunContext):
    config, summary = context.config, context.summary
    m = config.measure
    frames = []
    for label, functional in (("running", config.F), ("terminal", config.F_T)):
        firstPassed, secondPassed, normalization = True, True, 0.0
        for pair in range(config.probes.numPairs):
            mPrime = random_measure(config.seed + 2 * pair + 1, m.size, m.dim)
            mTilde = random_measure(config.seed + 2 * pair + 2, m.size, m.dim)
            normalization = max(normalization, abs(float(m.weights @ functional.delta(m, m.atoms))))
            first = check_first_derivative(functional, m, mPrime, config.probes.thetas)
            firstPassed = firstPassed and first.passed
            frames.append(_tagged(first.to_frame(), functional=label, pair=pair, order=1))
            try:
                second = check_second_derivative(functional, m, mPrime, mTilde,
                                                 [theta for theta in config.probes.thetas if theta <= 0.5])
            except MissingDerivativeError as error:
                logging.warning(str(error))
                secondPassed = False
                continue
            secondPassed = secondPassed and second.passed
            frames.append(_tagged(second.to_frame(), functional=label, pair=pair, order=2))
        summary.add(label + ".normalization_error", normalization)
        summary.check(label + "_first_derivative", firstPassed)
        summary.check(label + "_second_derivative", secondPassed)
        summary.check(label + "_normalization", normalization <= 1e-12)
    context.write(pd.concat(frames, ignore_index=True), "derivative_checks")


def run_solve(context: RunContext):
    config, summary = context.config, context.summary
    bundle = solve_first_order(config.F, config.F_T, identity_field(config.measure), config.grid, config.solver)
    context.write(bundle.to_frame(), "bundle")
    summary.add_all({"V": bundle_value(bundle, config.F, config.F_T, config.solver.lam),
                     "iterations": bundle.iterations, "residual": bundle.residual, "damping": bundle.damping,
                     "fallback_steps": bundle.fallbackSteps, "growth_constant": bundle.growthConstant})
    summary.check("converged", bundle.converged)


def run_minimize(context: RunContext):
    config, summary = context.config, context.summary
    X0 = identity_field(config.measure)
    reports, gradientNorms = {}, {}

    def descent_cost(seed: int) -> float:
        _, report = minimize(X0, config.grid, config.solver.with_changes(seed=seed), config.F, config.F_T,
                             config.option("learningRate"), config.option("maxIters", 1000), config.option("tol"),
                             config.option("representation", "open-loop"))
        reports[seed] = report
        return report.cost

    def fbsde_cost(seed: int) -> float:
        cfg = config.solver.with_changes(seed=seed)
        optimal = control_from_adjoint(solve_first_order(config.F, config.F_T, X0, config.grid, cfg), cfg.lam)
        gradientNorms[seed] = float(np.sqrt(cost_gradient(optimal, X0, cfg, config.F, config.F_T).squared_norm()))
        return cost(optimal, X0, cfg, config.F, config.F_T)

    stochastic = bool(np.any(config.solver.sigma != 0.0))
    replications = max(context.replications, MIN_ROUTE_REPLICATIONS) if stochastic else 1
    descent = replicate(descent_cost, config.seed, replications, context.threads)
    fbsde = replicate(fbsde_cost, config.seed, replications, context.threads)
    report = reports[config.seed]
    context.write(report.to_frame(), "minimize")
    context.write(pd.DataFrame({"replication": np.arange(replications), "cost_descent": descent.values,
                                "cost_fbsde": fbsde.values}), "minimize_replications")
    gap = abs(descent.mean - fbsde.mean)
    if stochastic:
        tolerance = ROUTE_STDERRS * float(np.sqrt(descent.stderr ** 2 + fbsde.stderr ** 2))
    else:
        tolerance = config.option("routeTolerance", 1e-2) * max(1.0, abs(fbsde.mean))
    summary.add_all({"cost_descent": descent.mean, "cost_descent.stderr": descent.stderr,
                     "cost_fbsde": fbsde.mean, "cost_fbsde.stderr": fbsde.stderr, "route_gap": gap,
                     "route_tolerance": tolerance, "replications": replications,
                     "gradient_norm_descent": report.gradientNorm,
                     "gradient_norm_fbsde": gradientNorms[config.seed], "iterations": report.iterations,
                     "halvings": report.halvings})
    summary.check("descent_converged", all(reports[seed].converged for seed in reports))
    summary.check("route_agreement", gap <= tolerance)


def run_value(context: RunContext):
    config, summary = context.config, context.summary
    frames = []
    for t in config.probes.times:
        report = value(config.measure, t, config.grid, config.solver, config.F, config.F_T,
                       probes=config.probes.points)
        frames.append(_tagged(report.to_frame(), t=t))
        summary.add("V.t" + str(t), report.V)
        summary.add("growth_ratio.t" + str(t), report.growthRatio)
        summary.check("normalization.t" + str(t), report.normalization_error() <= 1e-10)
    context.write(pd.concat(frames, ignore_index=True), "value_atoms")
    if context.replications > 1:
        t = config.probes.times[0]

        def replicated_value(seed: int) -> float:
            return value(config.measure, t, config.grid, config.solver.with_changes(seed=seed), config.F,
                         config.F_T).V

        replicated = replicate(replicated_value, config.seed, context.replications, context.threads)
        context.write(pd.DataFrame({"replication": np.arange(context.replications), "V": replicated.values}),
                      "value_replications")
        summary.add_all({"V.mean": replicated.mean, "V.stderr": replicated.stderr})
    if config.option("regularity", False):
        t = config.probes.times[0]
        context.write(time_regularity_probe(config.measure, t, config.probes.steps, config.grid, config.solver,
                                            config.F, config.F_T).to_frame(), "time_regularity")
        context.write(growth_probe(config.measure, t, config.grid, config.solver, config.F, config.F_T).to_frame(),
                      "growth")


def run_dpp(context: RunContext):
    config, summary = context.config, context.summary
    t = config.probes.times[0]
    frames, ladder = [], []
    for rung, grid, cfg in _rungs(config):
        hs = list(config.probes.steps)
        if not any(np.isclose(h, grid.dt) for h in hs):
            hs.append(grid.dt)
        report = dpp_residual(config.measure, t, hs, grid, cfg, config.F, config.F_T)
        frame = report.to_frame()
        frames.append(_tagged(frame, rung=rung, dt=grid.dt, M=cfg.numOutcomes))
        ladder.append(float(frame.loc[np.isclose(frame["h"], grid.dt), "residual"].iloc[0]))
        if rung == 0:
            summary.add("V", report.V)
            summary.add("max_residual", float(np.max(report.residuals)))
            if config.option("tolerance") is not None:
                summary.check("dpp", float(np.max(report.residuals)) <= config.option("tolerance"))
    context.write(pd.concat(frames, ignore_index=True), "dpp")
    _rate_check(summary, "dpp", ladder)


def run_bellman(context: RunContext):
    config, summary = context.config, context.summary
    frames, ladder = [], []
    for rung, grid, cfg in _rungs(config):
        worst, terminal = 0.0, 0.0
        for t in config.probes.times:
            report = bellman_residual(config.measure, t, grid, cfg, config.F, config.F_T)
            frames.append(_tagged(report.to_frame(), source="solver", rung=rung))
            worst, terminal = max(worst, report.maxAbsResidual), max(terminal, report.terminalError)
        ladder.append(worst)
        summary.add("max_residual.rung" + str(rung), worst)
        summary.check("terminal.rung" + str(rung), terminal <= TERMINAL_TOLERANCE)
    spec = _lq_spec_or_none(config)
    if spec is not None:
        solution = riccati_solve(spec, config.grid.numSteps)
        worst = 0.0
        for t in config.probes.times:
            report = oracle_bellman_residual(spec, config.measure, t, solution)
            frames.append(_tagged(report.to_frame(), source="oracle", rung=0))
            worst = max(worst, report.maxAbsResidual)
        summary.add("oracle.max_residual", worst)
        summary.check("oracle_bellman", worst <= ORACLE_TOLERANCE)
    context.write(pd.concat(frames, ignore_index=True), "bellman")
    _rate_check(summary, "bellman", ladder)


def run_master(context: RunContext):
    config, summary = context.config, context.summary
    points = config.probes.points
    frames, ladder = [], []
    for rung, grid, cfg in _rungs(config):
        worst, terminal = 0.0, 0.0
        for t in config.probes.times:
            report = master_residual(points, config.measure, t, grid, cfg, config.F, config.F_T,
                                     config.option("fdCrossCheck", False), config.option("eps", 1e-3))
            frames.append(_tagged(report.to_frame(), source="solver", rung=rung))
            worst, terminal = max(worst, report.maxAbsResidual), max(terminal, report.terminalError)
        ladder.append(worst)
        summary.add("max_residual.rung" + str(rung), worst)
        summary.check("terminal.rung" + str(rung), terminal <= TERMINAL_TOLERANCE)
    spec = _lq_spec_or_none(config)
    if spec is not None:
        solution = riccati_solve(spec, config.grid.numSteps)
        worst = 0.0
        for t in config.probes.times:
            report = oracle_master_residual(spec, points, config.measure, t, solution)
            frames.append(_tagged(report.to_frame(), source="oracle", rung=0))
            worst = max(worst, report.maxAbsResidual)
        summary.add("oracle.max_residual", worst)
        summary.check("oracle_master", worst <= ORACLE_TOLERANCE)
    context.write(pd.concat(frames, ignore_index=True), "master")
    _rate_check(summary, "master", ladder)

    t = config.probes.times[0]
    if config.option("decoupledFlow", False):
        flow = decoupled_flow(points, config.measure, t, config.grid, config.solver, config.F, config.F_T)
        augmented = with_probe_atoms(config.measure, points)
        bundle = solve_first_order(config.F, config.F_T, identity_field(augmented), grid_from(config.grid, t),
                                   config.solver)
        probeIndices = np.arange(config.measure.size, augmented.size)
        summary.add("decoupled_flow.mismatch", flow.mismatch(bundle, probeIndices))
    if config.option("gaussianProbe", False):
        check = gaussian_probe_check(config.measure, t, config.grid, config.solver, config.F, config.F_T)
        summary.add_all({"gaussian_probe.lhs": check.lhs, "gaussian_probe.rhs": check.rhs,
                         "gaussian_probe.stderr": check.stderr})
        summary.check("gaussian_probe", check.passed)


def _oracle_comparison(spec: LQSpec, context: RunContext) -> pd.DataFrame:
    config = context.config
    solution = riccati_solve(spec, config.grid.numSteps)
    context.write(solution.to_frame(), "riccati")
    rows = []
    for t in config.probes.times:
        report = value(config.measure, t, config.grid, config.solver, config.F, config.F_T)
        closed = lq_value(spec, config.measure, t, solution)
        exactGradient = closed.DU(config.measure.atoms)
        gradientScale = max(float(np.max(np.linalg.norm(exactGradient, axis=1))), RESIDUAL_FLOOR)
        step = config.grid.steps_for(t - config.grid.t0) if not np.isclose(t, config.grid.t0) else 0
        rows.append({"t": t, "V_solver": report.V, "V_oracle": closed.V,
                     "V_discrete": lq_discrete_value(spec, config.measure, config.grid, step),
                     "value_rel_err": abs(report.V - closed.V) / max(abs(closed.V), RESIDUAL_FLOOR),
                     "gradient_rel_err": float(np.max(np.linalg.norm(report.gradDeltaV - exactGradient, axis=1)))
                                         / gradientScale,
                     "P": closed.P, "R": closed.R})
    return pd.DataFrame(rows)


def run_lq_compare(context: RunContext):
    config, summary = context.config, context.summary
    table = _oracle_comparison(config.lq_spec(), context)
    context.write(table, "lq_compare")
    summary.add_all({"max_value_rel_err": float(table["value_rel_err"].max()),
                     "max_gradient_rel_err": float(table["gradient_rel_err"].max())})
    summary.check("value", table["value_rel_err"].max() <= config.option("valueTolerance", 0.02))
    summary.check("gradient", table["gradient_rel_err"].max() <= config.option("gradientTolerance", 0.03))


def _constant_probes(context: RunContext) -> List:
    config = context.config
    m = config.measure
    probes = []
    for k in range(config.option("numProbes", 12)):
        draws = standard_normals(config.seed + k, DIRECTION_STREAM, config.option("probeOutcomes", 8),
                                 (2, m.size, m.dim))
        probes.append((LiftedField(draws[:, 0], m), LiftedField(draws[:, 1], m)))
    return probes


def run_constants(context: RunContext):
    config, summary = context.config, context.summary
    probes = _constant_probes(context)
    rows = []
    for label, functional in (("running", config.F), ("terminal", config.F_T)):
        declared = functional.declared_constants()
        estimate = estimate_constants(functional, probes)
        rows.append({"functional": label, "name": functional.name, "c_declared": declared["c"],
                     "cPrime_declared": declared["cPrime"], "c_estimate": estimate.c,
                     "cPrime_estimate": estimate.cPrime, "probes": estimate.numProbes,
                     "skipped": estimate.numSkipped})
        summary.check(label + "_declared_bounds", estimate.c <= declared["c"] + 1e-8
                      and estimate.cPrime <= declared["cPrime"] + 1e-8)
    context.write(pd.DataFrame(rows), "constants")
    horizon = config.grid.T - config.grid.t0
    constants = assumption_constants(config.F, config.F_T, config.solver.lam, horizon)
    estimated = estimate_assumption_constants(config.F, config.F_T, probes, config.solver.lam, horizon)
    summary.add_all({"first_order_margin": constants.first_order_margin(),
                     "master_margin": constants.master_margin(),
                     "estimated.first_order_margin": estimated.first_order_margin(),
                     "estimated.master_margin": estimated.master_margin()})
    summary.check("first_order_margin", constants.first_order_margin() > 0)


SUBCOMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "verify-derivatives": run_verify_derivatives,
    "solve": run_solve,
    "minimize": run_minimize,
    "value": run_value,
    "dpp": run_dpp,
    "bellman": run_bellman,
    "master": run_master,
    "lq-compare": run_lq_compare,
    "constants": run_constants,
}


def _write_partial(partialResult, context: RunContext):
    if isinstance(partialResult, PathBundle):
        context.write(partialResult.to_frame(), "bundle")
    elif isinstance(partialResult, tuple) and len(partialResult) == 2 and isinstance(partialResult[1],
                                                                                      MinimizeReport):
        context.write(partialResult[1].to_frame(), "minimize")


def run(subcommand: str, configPath: str, outputOverride: str = None, replications: int = None,
        threads: int = 1) -> int:
    """
    Runs one subcommand and writes summary.txt plus its CSV artifacts.
    :return: 0 when every check passed, 1 when a check failed, 2 for an invalid config, 3 when a solve did not
    converge (artifacts are still written) and 4 for an internal invariant violation
    """
    if subcommand not in SUBCOMMANDS:
        logging.error(subcommand + " is not a valid subcommand")
        return EXIT_CONFIG
    try:
        config = load_experiment_config(configPath)
    except ConfigError as error:
        logging.error("Invalid config " + configPath + ": " + str(error))
        return EXIT_CONFIG
    outputDirectory = get_output_directory(subcommand, outputOverride, config.outputDirectory)
    summary = Summary(subcommand, config.seed)
    context = RunContext(config, outputDirectory, summary, replications or config.replications, threads)
    try:
        SUBCOMMANDS[subcommand](context)
        status = EXIT_OK if summary.allPassed else EXIT_CHECK_FAILED
        if status == EXIT_CHECK_FAILED:
            summary.add("status", "checks_failed")
    except (ConfigError, GridError) as error:
        logging.error("Invalid config " + configPath + ": " + str(error))
        summary.add_all({"status": "invalid_config", "error": str(error)})
        status = EXIT_CONFIG
    except ConvergenceError as error:
        logging.error(str(error))
        _write_partial(error.partialResult, context)
        summary.add_all({"status": "not_converged", "last_residual": error.residual, "error": str(error)})
        status = EXIT_NOT_CONVERGED
    except InvariantViolation as error:
        logging.error("Invariant violated: " + str(error))
        summary.add_all({"status": "invariant_violation", "error": str(error)})
        status = EXIT_INVARIANT
    except (ValueError, MissingDerivativeError) as error:
        logging.error("Invalid experiment " + configPath + ": " + str(error))
        summary.add_all({"status": "invalid_config", "error": str(error)})
        status = EXIT_CONFIG
    summary.write(outputDirectory)
    logging.info(subcommand + " finished with exit status " + str(status) + ", artifacts in " + outputDirectory)
    return status


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run a mean-field control experiment from a YAML config.")
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS), help="Experiment to run")
    parser.add_argument("--config", required=True, help="Path to the experiment config (YAML)")
    parser.add_argument("--out", default=None, help="Output directory (overrides MFC_LAB_OUTPUT_DIR)")
    parser.add_argument("--replications", type=int, default=None,
                        help="Seed replications for the value experiment (default: from the config)")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads for replications")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Log debug messages")
    verbosity.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)
    if args.threads < 1:
        logging.error("--threads must be at least 1")
        return EXIT_CONFIG
    return run(args.subcommand, args.config, args.out, args.replications, args.threads)


if __name__ == "__main__":
    sys.exit(main())
