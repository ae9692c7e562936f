import csv

import numpy as np
import pytest

from stopbsde.bsde import BsdeProblem, Driver, TerminalCondition
from stopbsde.errors import InvalidArgument, NumericalError
from stopbsde.girsanov import (
    FactoredDriver,
    check_assumption_H,
    construct_measure_solution,
    girsanov_density,
    martingale_check,
    write_history_csv,
)
from stopbsde.paths import constant_time, first_exit_time
from stopbsde.solvers import cole_hopf_reference, solve_backward_regression

from conftest import mean_se, within

S = np.linspace(0, 1, 5)
Zs = np.linspace(-5, 5, 101)


def test_assumption_quadratic_passes():
    rep = check_assumption_H(FactoredDriver.quadratic(0.5, epsilon=0.5), S, Zs)
    assert rep.passed and rep.growth <= 0.5 and rep.small_z_excess <= 0
    assert [r[2] for r in rep.rows()] == [True, True, True]


def test_assumption_zero_passes():
    rep = check_assumption_H(FactoredDriver.zero(), S, Zs)
    assert rep.passed and rep.growth == 0 and rep.modulus == (0.0, 0.0)


def test_assumption_cubic_fails_growth():
    cubic = FactoredDriver(lambda s, z: z**2, 1.0, 1.0, lambda s: np.ones_like(s), "cubic")
    rep = check_assumption_H(cubic, S, Zs)
    assert not rep.growth_ok and not rep.passed
    assert rep.small_z_ok and rep.continuity_ok


def test_assumption_detects_small_z_bound_and_jumps():
    loose = FactoredDriver(lambda s, z: 0.5 * z, 0.5, 1.0, lambda s: 0.1 + 0 * s)
    assert not check_assumption_H(loose, S, Zs).small_z_ok
    jump = FactoredDriver(lambda s, z: 0.1 * np.sign(z), 0.1, 1.0, lambda s: 0.1 + 0 * s)
    assert not check_assumption_H(jump, S, np.linspace(-1, 1, 20)).continuity_ok


def test_density_zero_drift(small):
    tau = constant_time(small.grid, small.count)
    d = girsanov_density(np.zeros(small.increments.shape), small, tau)
    assert np.all(d.density == 1.0) and np.array_equal(d.dWq, small.increments)


def test_density_constant_drift(medium):
    tau = constant_time(medium.grid, medium.count)
    d = girsanov_density(np.full(medium.increments.shape, 0.3), medium, tau)
    R = d.density
    m, se = mean_se(R)
    assert within(m, 1.0, se) and np.all(R > 0)
    m, se = mean_se(R * medium.levels[:, -1])
    assert within(m, 0.3, se)
    assert np.allclose(d.dWq, medium.increments - 0.3 * medium.grid.dt)


def test_density_stops_at_tau(small):
    tau = first_exit_time(small, 0.5)
    d = girsanov_density(np.full(small.increments.shape, 0.3), small, tau)
    w_tau = np.take_along_axis(small.levels, tau.indices[:, None], axis=1)[:, 0]
    assert np.allclose(d.log_density, 0.3 * w_tau - 0.045 * tau.times)


def test_density_errors(small):
    tau = constant_time(small.grid, small.count)
    with pytest.raises(NumericalError, match="max_exponent"):
        girsanov_density(np.full(small.increments.shape, 1e200), small, tau)
    with pytest.raises(InvalidArgument):
        girsanov_density(np.zeros((3, 3)), small, tau)


def test_zero_driver_converges_at_once(medium, medium_exit):
    ms = construct_measure_solution(TerminalCondition.w_tau(), FactoredDriver.zero(), medium, medium_exit)
    assert ms.converged and ms.iterations == 1
    assert np.all(ms.R == 1.0)
    assert within(ms.y0, 0.0, ms.stderr)
    # E[W_tau | F_t] = W_{t ^ tau}
    gap = np.abs(ms.Y - medium.levels[np.arange(medium.count)[:, None], np.minimum(np.arange(257), medium_exit.indices[:, None])])
    assert np.quantile(gap[:, 1:], 0.99) < 0.05
    # Z is 1 before tau, so the square-root moment is E[sqrt(tau)]
    zm = ms.z_moment()
    assert abs(zm.value - np.sqrt(medium_exit.times).mean()) < 0.02


def test_quadratic_measure_solution(medium, medium_exit):
    xi = TerminalCondition.tanh_w_tau()
    ms = construct_measure_solution(xi, FactoredDriver.quadratic(0.25), medium, medium_exit)
    assert ms.converged and ms.iterations <= 50
    m, se = mean_se(ms.R)
    assert within(m, 1.0, se) and ms.R.min() > 0
    ch = cole_hopf_reference(0.25, xi, medium, medium_exit)
    assert abs(ms.y0 - ch.value) <= 3 * (ms.stderr + ch.stderr) + 0.02 * abs(ch.value)
    reg = solve_backward_regression(BsdeProblem(Driver.quadratic(0.25), xi, medium_exit), medium)
    assert abs(ms.y0 - reg.y0) <= 3 * (ms.stderr + reg.stderr) + 0.02 * abs(reg.y0)
    # terminal match at each path's own horizon
    xi_v = xi(medium, medium_exit)
    assert np.array_equal(ms.Y[np.arange(medium.count), medium_exit.indices], xi_v)
    assert np.all(ms.Z[np.arange(medium.count), medium_exit.indices] == 0)
    assert [h[0] for h in ms.history] == list(range(1, ms.iterations + 1))


def test_non_convergence_reports_history(small):
    tau = first_exit_time(small, 1.0)
    ms = construct_measure_solution(TerminalCondition.tanh_w_tau(), FactoredDriver.quadratic(0.5), small, tau, max_iters=1)
    assert not ms.converged and ms.iterations == 1 and len(ms.history) == 1


def test_failing_assumption_is_rejected(small):
    cubic = FactoredDriver(lambda s, z: z**2, 1.0, 1.0, lambda s: np.ones_like(s))
    with pytest.raises(InvalidArgument, match="growth"):
        construct_measure_solution(TerminalCondition.tanh_w_tau(), cubic, small, constant_time(small.grid, small.count))


def test_sectioned_martingale_check(medium, medium_exit):
    steps = [0, 40, 80, 120, 160]
    for est in martingale_check(TerminalCondition.tanh_w_tau(), FactoredDriver.quadratic(0.25), medium, medium_exit, steps, 10):
        assert within(est.value, 0.0, est.stderr)
    with pytest.raises(InvalidArgument):
        martingale_check(TerminalCondition.tanh_w_tau(), FactoredDriver.zero(), medium, medium_exit, steps, 1)


def test_history_csv(tmp_path, small):
    tau = first_exit_time(small, 1.0)
    ms = construct_measure_solution(TerminalCondition.tanh_w_tau(), FactoredDriver.quadratic(0.25), small, tau)
    out = tmp_path / "hist.csv"
    write_history_csv(ms, out)
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == ms.iterations and rows[0]["change"] == "inf"
    assert float(rows[-1]["y0"]) == ms.y0
