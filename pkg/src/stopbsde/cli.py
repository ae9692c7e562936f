"""Scenario runner: ``stopbsde run <file|name>``, ``stopbsde list``, ``stopbsde version``.

A scenario is one JSON object (unknown keys are rejected) naming a grid, a
seeded ensemble, a horizon, a driver, a terminal condition and an experiment.
Every experiment yields rows of the result table documented in
``docs/csv_schema.md``. Exit status: 0 when every checked row passes, 1 when
one fails, 2 for an invalid scenario, 3 for a numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .bsde import BsdeProblem, Driver, TerminalCondition, driver_invariance_check, map_solution_back, to_constant_horizon
from .errors import InvalidArgument, NumericalError
from .girsanov import FactoredDriver, construct_measure_solution, martingale_check
from .paths import (
    AdaptedProcess,
    StoppingTimeField,
    expected_exit_time,
    first_exit_time,
    make_grid,
    quadratic_variation,
    sample_ensemble,
)
from .solvers import LinearDriverSpec, RegressionBasis, cole_hopf_reference, linear_explicit, solve_backward_regression
from .timechange import proportional_time_change, transformed_brownian, verify_integral_transport

COLUMNS = ["scenario", "quantity", "estimate", "stderr", "reference", "provenance", "passed", "wall_time"]

EXIT_OK, EXIT_FAILED, EXIT_SCHEMA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpec(_Strict):
    T: float = Field(gt=0)
    N: int = Field(ge=1)


class EnsembleSpec(_Strict):
    M: int = Field(ge=2)
    seed: int = Field(ge=0)


class ConstantHorizon(_Strict):
    kind: Literal["constant"]
    value: Optional[float] = Field(default=None, gt=0)


class FirstExitHorizon(_Strict):
    kind: Literal["first_exit"]
    barrier: float = Field(gt=0)


class ZeroDriver(_Strict):
    kind: Literal["zero"]


class ConstantDriver(_Strict):
    kind: Literal["constant"]
    value: float


class LinearDriver(_Strict):
    kind: Literal["linear"]
    beta: float = 0.0
    mu: float = 0.0
    forcing: float = 0.0


class QuadraticDriver(_Strict):
    kind: Literal["quadratic"]
    alpha: float


class TerminalSpec(_Strict):
    kind: Literal["constant", "W_tau", "tanh_W_tau", "W_tau_squared"]
    value: Optional[float] = None

    @model_validator(mode="after")
    def _value_for_constant(self):
        if (self.kind == "constant") != (self.value is not None):
            raise ValueError("'value' is required for kind 'constant' and not allowed otherwise")
        return self


class BasisSpec(_Strict):
    kind: Literal["polynomial", "bins"] = "polynomial"
    degree: int = Field(default=3, ge=0)
    time_degree: int = Field(default=2, ge=0)
    bins: int = Field(default=16, ge=1)

    def build(self) -> RegressionBasis:
        return RegressionBasis(self.kind, self.degree, self.time_degree, self.bins)


class Tolerance(_Strict):
    """Pass when ``|estimate - reference| <= combine(se * SE, rel * |reference|, abs)``."""

    se: float = Field(default=3.0, ge=0)
    rel: float = Field(default=0.0, ge=0)
    abs: float = Field(default=0.0, ge=0)
    combine: Literal["max", "sum"] = "max"

    def bound(self, stderr: float, reference: float) -> float:
        parts = (self.se * stderr, self.rel * abs(reference), self.abs)
        return max(parts) if self.combine == "max" else sum(parts)


class Reference(_Strict):
    kind: Literal["value", "cole_hopf", "mean_tau", "exit_time"]
    value: Optional[float] = None
    provenance: Optional[str] = None
    tolerance: Tolerance = Tolerance()

    @model_validator(mode="after")
    def _value_needs_provenance(self):
        if self.kind == "value" and (self.value is None or not self.provenance):
            raise ValueError("a 'value' reference needs both 'value' and 'provenance'")
        return self


class SolveExperiment(_Strict):
    kind: Literal["solve"]
    basis: BasisSpec = BasisSpec()
    references: list[Reference] = []


class LinearFormulaExperiment(_Strict):
    kind: Literal["linear-formula"]
    basis: BasisSpec = BasisSpec()
    references: list[Reference] = []


class TransformCheckExperiment(_Strict):
    kind: Literal["transform-check"]
    basis: BasisSpec = BasisSpec()
    K: Optional[int] = Field(default=None, ge=1)
    tolerance: Tolerance = Tolerance(se=3.0, rel=0.02, combine="sum")


class MeasureSolutionExperiment(_Strict):
    kind: Literal["measure-solution"]
    basis: BasisSpec = BasisSpec()
    max_iters: int = Field(default=50, ge=1)
    tol: float = Field(default=1e-3, gt=0)
    epsilon: float = Field(default=1.0, gt=0)
    probes: int = Field(default=5, ge=1)
    sections: int = Field(default=20, ge=2)
    tolerance: Tolerance = Tolerance(se=3.0, rel=0.02, combine="sum")


class ConvergenceExperiment(_Strict):
    kind: Literal["convergence"]
    steps: list[int] = Field(min_length=2)
    basis: BasisSpec = BasisSpec()
    reference: Reference


Experiment = Annotated[
    Union[
        SolveExperiment,
        LinearFormulaExperiment,
        TransformCheckExperiment,
        MeasureSolutionExperiment,
        ConvergenceExperiment,
    ],
    Field(discriminator="kind"),
]


class Scenario(_Strict):
    name: str
    description: str = ""
    grid: GridSpec
    ensemble: EnsembleSpec
    horizon: Annotated[Union[ConstantHorizon, FirstExitHorizon], Field(discriminator="kind")]
    driver: Annotated[Union[ZeroDriver, ConstantDriver, LinearDriver, QuadraticDriver], Field(discriminator="kind")]
    terminal: TerminalSpec
    experiment: Experiment
    output: Optional[str] = None

    @model_validator(mode="after")
    def _kinds_fit(self):
        exp, drv = self.experiment, self.driver
        if exp.kind == "linear-formula" and drv.kind == "quadratic":
            raise ValueError("experiment 'linear-formula' needs a zero, constant or linear driver")
        if exp.kind == "measure-solution":
            if drv.kind not in ("zero", "quadratic"):
                raise ValueError("experiment 'measure-solution' needs a zero or quadratic driver")
            if self.terminal.kind in ("W_tau", "W_tau_squared") and self.horizon.kind == "constant":
                raise ValueError("measure solutions need a bounded terminal value")
        if exp.kind == "transform-check" and self.horizon.kind != "first_exit":
            raise ValueError("experiment 'transform-check' needs a first_exit horizon")
        refs = list(getattr(exp, "references", [])) + ([exp.reference] if exp.kind == "convergence" else [])
        for ref in refs:
            if ref.kind == "cole_hopf" and drv.kind != "quadratic":
                raise ValueError("a 'cole_hopf' reference needs a quadratic driver")
            if ref.kind == "exit_time" and self.horizon.kind != "first_exit":
                raise ValueError("an 'exit_time' reference needs a first_exit horizon")
        if self.horizon.kind == "constant" and self.horizon.value is not None:
            make_grid(self.grid.T, self.grid.N).index_of(self.horizon.value)
        return self


@dataclass
class Row:
    quantity: str
    estimate: float
    stderr: float = math.nan
    reference: float = math.nan
    provenance: str = ""
    passed: Optional[bool] = None


class ScenarioError(Exception):
    """Invalid scenario file; ``lines`` are ``location: message`` diagnostics."""

    def __init__(self, source: str, lines: list[str]):
        super().__init__(f"{source}: invalid scenario")
        self.source = source
        self.lines = lines


def _line_of(text: str, loc) -> Optional[int]:
    """Line of the last key in ``loc`` found by walking the keys in order through ``text``."""
    pos, found = 0, None
    for key in loc:
        if not isinstance(key, str):
            continue
        hit = text.find(f'"{key}"', pos)
        if hit < 0:
            break
        pos, found = hit, hit
    return None if found is None else text.count("\n", 0, found) + 1


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(source, [f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    if not isinstance(raw, dict):
        raise ScenarioError(source, ["line 1: top level must be a JSON object"])
    try:
        return Scenario.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = [k for k in err["loc"] if not (isinstance(k, str) and k.startswith("function-after"))]
            field = ".".join(str(k) for k in loc) or "<root>"
            line = _line_of(text, loc)
            where = f"line {line}, field {field}" if line else f"field {field}"
            lines.append(f"{where}: {err['msg']}")
        raise ScenarioError(source, lines) from None
    except InvalidArgument as exc:
        raise ScenarioError(source, [str(exc)]) from None


def builtin_names() -> list[str]:
    folder = resources.files("stopbsde") / "scenarios"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def builtin_text(name: str) -> str:
    return (resources.files("stopbsde") / "scenarios" / f"{name}.json").read_text()


def list_builtin_scenarios() -> list[tuple[str, str]]:
    return [(n, parse_scenario(builtin_text(n), n).description) for n in builtin_names()]


def load_scenario(target: str) -> Scenario:
    """``target`` is a scenario file path or the name of a built-in scenario."""
    path = Path(target)
    if path.is_file():
        return parse_scenario(path.read_text(), str(path))
    if target in builtin_names():
        return parse_scenario(builtin_text(target), target)
    raise ScenarioError(target, [f"no such file or built-in scenario: {target!r}"])


# -- building blocks ---------------------------------------------------------


def _driver(spec) -> Driver:
    if spec.kind == "zero":
        return Driver.zero()
    if spec.kind == "constant":
        return Driver.constant(spec.value)
    if spec.kind == "linear":
        return Driver.linear(spec.beta, spec.mu, spec.forcing)
    return Driver.quadratic(spec.alpha)


def _terminal(spec: TerminalSpec) -> TerminalCondition:
    if spec.kind == "constant":
        return TerminalCondition.constant(spec.value)
    return {
        "W_tau": TerminalCondition.w_tau,
        "tanh_W_tau": TerminalCondition.tanh_w_tau,
        "W_tau_squared": TerminalCondition.w_tau_squared,
    }[spec.kind]()


def _horizon(spec, ensemble) -> StoppingTimeField:
    if spec.kind == "first_exit":
        return first_exit_time(ensemble, spec.barrier)
    grid = ensemble.grid
    k = grid.steps if spec.value is None else grid.index_of(spec.value)
    return StoppingTimeField(grid, np.full(ensemble.count, k, dtype=np.int64))


def _check(quantity, estimate, stderr, ref_value, provenance, tol: Tolerance) -> Row:
    ok = bool(abs(estimate - ref_value) <= tol.bound(stderr, ref_value))
    return Row(quantity, estimate, stderr, ref_value, provenance, ok)


def _reference_rows(scn: Scenario, ref: Reference, quantity, estimate, stderr, ensemble, tau) -> Row:
    if ref.kind == "value":
        return _check(quantity, estimate, stderr, ref.value, ref.provenance, ref.tolerance)
    if ref.kind == "cole_hopf":
        ch = cole_hopf_reference(scn.driver.alpha, _terminal(scn.terminal), ensemble, tau)
        prov = ref.provenance or "Cole-Hopf log-moment on the same ensemble"
        return _check(quantity, estimate, stderr + ch.stderr, ch.value, prov, ref.tolerance)
    if ref.kind == "mean_tau":
        t = tau.times
        se = float(t.std(ddof=1) / math.sqrt(t.size))
        prov = ref.provenance or "sample mean of the stopping time on the same ensemble"
        return _check(quantity, estimate, stderr + se, float(t.mean()), prov, ref.tolerance)
    value = expected_exit_time(scn.horizon.barrier, scn.grid.T)
    prov = ref.provenance or "eigenfunction series for E[min(tau, T)], continuous monitoring"
    return _check(quantity, estimate, stderr, value, prov, ref.tolerance)


def _problem(scn: Scenario, tau: StoppingTimeField) -> BsdeProblem:
    horizon = tau if scn.horizon.kind == "first_exit" else tau.times[0]
    return BsdeProblem(_driver(scn.driver), _terminal(scn.terminal), horizon)


# -- experiments ---------------------------------------------------------------


def _run_solve(scn, ensemble, tau):
    exp = scn.experiment
    sol = solve_backward_regression(_problem(scn, tau), ensemble, exp.basis.build())
    rows = [_reference_rows(scn, r, "Y0", sol.y0, sol.stderr, ensemble, tau) for r in exp.references]
    return rows or [Row("Y0", sol.y0, sol.stderr)]


def _linear_spec(drv) -> LinearDriverSpec:
    if drv.kind == "zero":
        return LinearDriverSpec()
    if drv.kind == "constant":
        return LinearDriverSpec(forcing=drv.value)
    return LinearDriverSpec(drv.beta, drv.mu, drv.forcing)


def _run_linear(scn, ensemble, tau):
    exp = scn.experiment
    horizon = tau if scn.horizon.kind == "first_exit" else tau.times[0]
    sol = linear_explicit(_linear_spec(scn.driver), _terminal(scn.terminal), horizon, ensemble, exp.basis.build())
    rows = [_reference_rows(scn, r, "Y0", sol.y0, sol.stderr, ensemble, tau) for r in exp.references]
    return rows or [Row("Y0", sol.y0, sol.stderr)]


def _run_transform(scn, ensemble, tau):
    exp = scn.experiment
    basis = exp.basis.build()
    problem = _problem(scn, tau)
    direct = solve_backward_regression(problem, ensemble, basis)
    change = proportional_time_change(tau)
    K = exp.K or scn.grid.N
    moved = transformed_brownian(ensemble, change, K)
    unit = solve_backward_regression(to_constant_horizon(problem, change), moved, basis)
    back = map_solution_back(unit, change, tau)
    gap = abs(direct.y0 - back.y0)
    rows = [
        Row("Y0_direct", direct.y0, direct.stderr),
        Row("Y0_transformed", back.y0, unit.stderr),
        Row(
            "Y0_route_gap",
            gap,
            direct.stderr + unit.stderr,
            0.0,
            "both routes agree for the time-changed problem",
            bool(gap <= exp.tolerance.bound(direct.stderr + unit.stderr, direct.y0)),
        ),
    ]
    qv = quadratic_variation(moved.levels)[:, -1]
    qv_se = float(qv.std(ddof=1) / math.sqrt(qv.size))
    rows.append(_check("QV_W_tilde_1", float(qv.mean()), qv_se, 1.0, "quadratic variation of a Brownian motion on [0,1]",
                       Tolerance(se=0.0, abs=0.05)))
    w1 = moved.levels[:, -1]
    rows.append(_check("mean_W_tilde_1", float(w1.mean()), float(w1.std(ddof=1) / math.sqrt(w1.size)), 0.0,
                       "mean of a Brownian motion", Tolerance(se=3.0)))
    check = verify_integral_transport(AdaptedProcess.brownian(ensemble), ensemble, change, None, tau, K)
    rows.append(Row("transport_gap_mean", check.mean, float(check.discrepancy.std(ddof=1) / math.sqrt(tau.count))))
    if scn.driver.kind == "quadratic":
        err = driver_invariance_check(scn.driver.alpha, tau)
        rows.append(_check("driver_invariance_max", err, 0.0, 0.0, "f = alpha z^2 is unchanged by the transform",
                           Tolerance(se=0.0, abs=1e-12)))
    return rows


def _probe_steps(tau, probes):
    top = int(np.quantile(tau.indices, 0.5))
    return sorted({int(round(x)) for x in np.linspace(0, max(top - 1, 0), probes)})


def _run_measure(scn, ensemble, tau):
    exp = scn.experiment
    basis = exp.basis.build()
    terminal = _terminal(scn.terminal)
    if scn.driver.kind == "zero":
        fdrv = FactoredDriver.zero()
    else:
        fdrv = FactoredDriver.quadratic(scn.driver.alpha, exp.epsilon)
    kwargs = dict(basis=basis, max_iters=exp.max_iters, tol=exp.tol)
    ms = construct_measure_solution(terminal, fdrv, ensemble, tau, **kwargs)
    rows = [
        Row("iterations", float(ms.iterations), passed=ms.converged),
        Row("Y0", ms.y0, ms.stderr),
    ]
    r_se = float(ms.R.std(ddof=1) / math.sqrt(ms.R.size))
    rows.append(_check("mean_R", float(ms.R.mean()), r_se, 1.0, "expectation of a density", Tolerance(se=3.0)))
    rows.append(Row("min_R", float(ms.R.min()), passed=bool(ms.R.min() > 0)))
    zm = ms.z_moment()
    rows.append(Row("Z_sqrt_moment", zm.value, zm.stderr))
    sol = solve_backward_regression(_problem(scn, tau), ensemble, basis)
    rows.append(_check("Y0_vs_regression", ms.y0, ms.stderr + sol.stderr, sol.y0,
                       "backward regression solver on the same ensemble", exp.tolerance))
    if scn.driver.kind == "quadratic":
        ch = cole_hopf_reference(scn.driver.alpha, terminal, ensemble, tau)
        rows.append(_check("Y0_vs_cole_hopf", ms.y0, ms.stderr + ch.stderr, ch.value,
                           "Cole-Hopf log-moment on the same ensemble", exp.tolerance))
    steps = _probe_steps(tau, exp.probes)
    for i, est in zip(steps, martingale_check(terminal, fdrv, ensemble, tau, steps, exp.sections, **kwargs)):
        rows.append(_check(f"martingale_residual[step={i}]", est.value, est.stderr, 0.0,
                           "Q-martingale increments have mean zero", Tolerance(se=3.0)))
    return rows


def _run_convergence(scn, threads):
    exp = scn.experiment
    errors, rows = [], []
    for N in exp.steps:
        sub = scn.model_copy(update={"grid": GridSpec(T=scn.grid.T, N=N)})
        ensemble = sample_ensemble(make_grid(scn.grid.T, N), scn.ensemble.M, scn.ensemble.seed, threads)
        tau = _horizon(sub.horizon, ensemble)
        sol = solve_backward_regression(_problem(sub, tau), ensemble, exp.basis.build())
        row = _reference_rows(sub, exp.reference, f"Y0[N={N}]", sol.y0, sol.stderr, ensemble, tau)
        row.passed = None
        errors.append(abs(row.estimate - row.reference))
        rows.append(row)
    dts = np.log([scn.grid.T / n for n in exp.steps])
    order = float(np.polyfit(dts, np.log(np.maximum(errors, 1e-300)), 1)[0])
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    rows.append(Row("error_order", order, passed=decreasing))
    return rows


def run_scenario(scn: Scenario, threads: Optional[int] = None) -> list[Row]:
    kind = scn.experiment.kind
    if kind == "convergence":
        return _run_convergence(scn, threads)
    ensemble = sample_ensemble(make_grid(scn.grid.T, scn.grid.N), scn.ensemble.M, scn.ensemble.seed, threads)
    tau = _horizon(scn.horizon, ensemble)
    runner = {
        "solve": _run_solve,
        "linear-formula": _run_linear,
        "transform-check": _run_transform,
        "measure-solution": _run_measure,
    }[kind]
    return runner(scn, ensemble, tau)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.17g}"


def write_table(name: str, rows: list[Row], wall: float, fh) -> None:
    out = csv.writer(fh, lineterminator="\n")
    out.writerow(COLUMNS)
    for r in rows:
        passed = "" if r.passed is None else ("true" if r.passed else "false")
        out.writerow([name, r.quantity, _fmt(r.estimate), _fmt(r.stderr), _fmt(r.reference), r.provenance,
                      passed, f"{wall:.3f}"])


def _cmd_run(args) -> int:
    try:
        scn = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc.source}: invalid scenario", file=sys.stderr)
        for line in exc.lines:
            print(f"  {line}", file=sys.stderr)
        return EXIT_SCHEMA
    start = time.perf_counter()
    try:
        rows = run_scenario(scn, args.threads)
    except NumericalError as exc:
        print(f"error: {scn.name}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidArgument as exc:
        print(f"error: {scn.name}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    wall = time.perf_counter() - start

    target = args.out or scn.output
    if target:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", newline="") as fh:
            write_table(scn.name, rows, wall, fh)
    else:
        buf = io.StringIO()
        write_table(scn.name, rows, wall, buf)
        sys.stdout.write(buf.getvalue())
    failed = [r.quantity for r in rows if r.passed is False]
    if not args.quiet:
        checked = sum(r.passed is not None for r in rows)
        status = "FAIL" if failed else "ok"
        print(f"{scn.name}: {status} ({checked - len(failed)}/{checked} checks, {wall:.1f}s)", file=sys.stderr)
        for q in failed:
            print(f"  failed: {q}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def _cmd_list(args) -> int:
    for name, desc in list_builtin_scenarios():
        print(f"{name:30s} {desc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stopbsde", description="Run BSDE validation scenarios and emit CSV.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file or a built-in scenario")
    run.add_argument("scenario", help="path to a JSON scenario, or a built-in name (see 'list')")
    run.add_argument("--threads", type=int, default=None, help="worker threads for path sampling (default: all cores)")
    run.add_argument("--out", help="CSV destination (default: the scenario's 'output', else stdout)")
    run.add_argument("--quiet", action="store_true", help="suppress the summary on stderr")
    run.set_defaults(func=_cmd_run)
    sub.add_parser("list", help="list built-in scenarios").set_defaults(func=_cmd_list)
    sub.add_parser("version", help="print the package version").set_defaults(
        func=lambda args: print(__version__) or EXIT_OK
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_SCHEMA
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
