import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stopbsde.errors import DegenerateHorizon, InvalidArgument, OutOfRange
from stopbsde.paths import (
    AdaptedProcess,
    StoppingTimeField,
    constant_time,
    first_exit_time,
    make_grid,
    quadratic_variation,
    sample_ensemble,
)
from stopbsde.timechange import (
    TimeChange,
    invert,
    proportional_time_change,
    sample_at,
    transformed_brownian,
    transport_process,
    verify_integral_transport,
)

from conftest import mean_se, within


def _field(grid, taus):
    return StoppingTimeField(grid, np.array([grid.index_of(t) for t in taus]))


def test_unit_horizon_is_identity():
    g = make_grid(1.0, 8)
    ch = proportional_time_change(constant_time(g, 3))
    t = np.linspace(0, 1, 7)
    assert np.array_equal(ch.phi(t[None, :]), np.broadcast_to(t, (3, 7)))
    assert np.array_equal(ch.phi_prime(0.3), np.ones(3))


def test_half_horizon_example():
    g = make_grid(1.0, 8)
    ch = proportional_time_change(_field(g, [0.5]))
    assert ch.phi(0.25)[0] == 0.5
    assert ch.phi_inverse(0.5)[0] == 0.25
    assert ch.phi_prime(0.1)[0] == 2.0


def test_zero_horizon_rejected():
    g = make_grid(1.0, 8)
    with pytest.raises(DegenerateHorizon, match="path"):
        proportional_time_change(_field(g, [0.5, 0.0]))


@settings(max_examples=50)
@given(st.integers(1, 4096), st.lists(st.integers(1, 4096), min_size=1, max_size=30))
def test_phi_hits_one_exactly_at_tau(N, raw):
    g = make_grid(1.0, N)
    tau = StoppingTimeField(g, np.array([1 + (k - 1) % N for k in raw]))
    ch = proportional_time_change(tau)
    assert np.all(ch.phi(tau.times) == 1.0)
    assert np.all(ch.phi(0.0) == 0.0)


@settings(max_examples=50)
@given(st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=20), st.floats(0.0, 1.0))
def test_inverse_round_trip_and_involution(taus, s):
    g = make_grid(1.0, 1000)
    tau = StoppingTimeField(g, np.maximum(1, np.round(np.asarray(taus) * 1000)).astype(np.int64))
    ch = proportional_time_change(tau)
    t = s * tau.times
    assert np.allclose(ch.phi_inverse(ch.phi(t)), t, rtol=0, atol=1e-12)
    twice = invert(invert(ch))
    for fn in ("phi", "phi_prime", "phi_inverse"):
        assert np.max(np.abs(getattr(twice, fn)(t) - getattr(ch, fn)(t))) < 1e-12
    assert np.all(ch.phi_prime(t) > 0)


def test_invert_example():
    g = make_grid(1.0, 8)
    inv = invert(proportional_time_change(_field(g, [0.5])))
    assert inv.phi(1.0)[0] == 0.5 and inv.phi_inverse(0.5)[0] == 1.0
    assert inv.phi_prime(0.3)[0] == 0.5
    ident = invert(proportional_time_change(constant_time(g, 2)))
    assert np.array_equal(ident.phi(0.7), [0.7, 0.7])


def test_custom_change_inverts_consistently():
    ch = TimeChange(lambda t: t**2, lambda t: 2 * t, np.sqrt, 2)
    inv = ch.inverted()
    s = np.array([0.25, 0.81])
    assert np.allclose(inv.phi(s), np.sqrt(s))
    assert np.allclose(inv.phi_prime(s), 0.5 / np.sqrt(s))


def test_time_shapes_are_checked():
    ch = proportional_time_change(constant_time(make_grid(1.0, 4), 3))
    with pytest.raises(InvalidArgument):
        ch.phi(np.zeros(4))


def test_sample_at_rules():
    g = make_grid(1.0, 4)
    v = np.arange(10.0).reshape(2, 5) ** 2
    times = np.array([[0.125, 0.5, 1.0], [0.3, 0.25 - 1e-13, 0.875]])
    lin = sample_at(v, g, times, "linear")
    prev = sample_at(v, g, times, "previous")
    assert np.array_equal(lin, [[0.5, 4.0, 16.0], [38.6, 36.0, 72.5]])
    assert np.array_equal(prev, [[0.0, 4.0, 16.0], [36.0, 36.0, 64.0]])
    with pytest.raises(OutOfRange):
        sample_at(v, g, np.array([[1.01], [0.0]]))
    with pytest.raises(InvalidArgument):
        sample_at(v, g, times, "cubic")


def test_transport_examples(small):
    tau = first_exit_time(small, 0.7)
    ch = proportional_time_change(tau)
    t = transport_process(AdaptedProcess.of_time(small.grid, small.count), ch, 32)
    s = np.linspace(0, 1, 33)
    assert np.allclose(t.values, s[None, :] * tau.times[:, None], atol=1e-12)
    c = transport_process(AdaptedProcess.of_time(small.grid, small.count, lambda x: 0 * x + 2.5), ch, 32)
    assert np.all(c.values == 2.5)
    ident = proportional_time_change(constant_time(small.grid, small.count))
    w = transport_process(AdaptedProcess.brownian(small), ident, small.grid.steps)
    assert np.array_equal(w.values, small.levels)


def test_transport_out_of_range(small):
    ch = invert(proportional_time_change(_field(small.grid, [0.5] * small.count)))
    with pytest.raises(OutOfRange):
        transport_process(AdaptedProcess.brownian(small), ch, 8)


def test_transport_round_trip(small):
    """phi then phi^{-1}: recovered values sit within two cell moduli of the originals."""
    tau = first_exit_time(small, 0.7)
    ch = proportional_time_change(tau)
    K = 64
    moved = transport_process(AdaptedProcess.brownian(small), ch, K)
    pts = small.grid.points
    inside = pts[None, :] <= tau.times[:, None]
    s = np.where(inside, ch.phi(np.broadcast_to(pts, (small.count, pts.size))), 0.0)
    back = sample_at(moved.values, moved.grid, np.minimum(s, 1.0), "linear")
    modulus = np.abs(np.diff(small.levels, axis=1)).max(axis=1)
    err = np.where(inside, np.abs(back - small.levels), 0.0).max(axis=1)
    assert np.all(err <= 2 * modulus + 1e-12)


def test_transformed_brownian_identity_change(small):
    ident = proportional_time_change(constant_time(small.grid, small.count))
    wt = transformed_brownian(small, ident, small.grid.steps)
    assert np.array_equal(wt.levels, small.levels)
    assert np.array_equal(wt.original_times, np.broadcast_to(small.grid.points, wt.levels.shape))


def test_transformed_brownian_formula(small):
    tau = first_exit_time(small, 0.7)
    wt = transformed_brownian(small, proportional_time_change(tau), small.grid.steps)
    w_tau = np.take_along_axis(small.levels, tau.indices[:, None], axis=1)[:, 0]
    assert np.all(wt.levels[:, 0] == 0)
    assert np.allclose(wt.levels[:, -1], w_tau / np.sqrt(tau.times), rtol=1e-14)
    assert np.allclose(wt.increments, np.diff(wt.levels, axis=1))


def test_transformed_brownian_statistics(medium, medium_exit):
    wt = transformed_brownian(medium, proportional_time_change(medium_exit), 256)
    m, se = mean_se(wt.levels[:, -1])
    assert within(m, 0.0, se)
    assert abs(quadratic_variation(wt.levels)[:, -1].mean() - 1.0) <= 0.05


def _centering(wt):
    half = wt.levels[:, wt.grid.steps // 2]
    inc = wt.levels[:, -1] - half
    return [mean_se(inc[side]) for side in (half > 0, half <= 0)]


def test_increments_centred_for_deterministic_horizon(medium):
    tau = constant_time(medium.grid, medium.count, 0.5)
    wt = transformed_brownian(medium, proportional_time_change(tau), 128)
    for m, se in _centering(wt):
        assert within(m, 0.0, se)


def test_exit_time_scaling_breaks_increment_centering(medium, medium_exit):
    """t / tau is not adapted when tau is a first-exit time.

    W~_1 = +-1 / sqrt(tau) on exiting paths, and its sign leans towards the sign
    of W~_{1/2}, so the conditional increment mean is far from zero.
    """
    wt = transformed_brownian(medium, proportional_time_change(medium_exit), 256)
    (up, se_up), (down, se_down) = _centering(wt)
    assert up > 5 * se_up and down < -5 * se_down


def test_transformed_qv_error_shrinks_with_K(medium, medium_exit):
    ch = proportional_time_change(medium_exit)
    errs = [abs(quadratic_variation(transformed_brownian(medium, ch, K).levels)[:, -1].mean() - 1) for K in (16, 256)]
    assert errs[1] < errs[0]


def test_transformed_brownian_rejects_bad_K(small):
    ch = proportional_time_change(constant_time(small.grid, small.count))
    with pytest.raises(InvalidArgument):
        transformed_brownian(small, ch, 0)


def test_integral_transport_zero_and_exact(small):
    tau = first_exit_time(small, 0.7)
    ch = proportional_time_change(tau)
    zero = AdaptedProcess.of_time(small.grid, small.count, np.zeros_like)
    assert verify_integral_transport(zero, small, ch, 0, tau).max == 0.0
    chk = verify_integral_transport(AdaptedProcess.brownian(small), small, ch, None, tau, K=small.grid.steps)
    assert chk.max < 1e-12
    one = AdaptedProcess.of_time(small.grid, small.count, np.ones_like)
    w_tau = np.take_along_axis(small.levels, tau.indices[:, None], axis=1)[:, 0]
    chk = verify_integral_transport(one, small, ch, None, tau, K=16)
    assert np.allclose(chk.original, w_tau, atol=1e-12)


def test_integral_transport_between_stopping_times(small):
    eta = first_exit_time(small, 0.3)
    xi = first_exit_time(small, 0.7)
    ch = proportional_time_change(xi)
    chk = verify_integral_transport(AdaptedProcess.brownian(small), small, ch, eta, xi)
    assert chk.max < 1e-12
    with pytest.raises(InvalidArgument):
        verify_integral_transport(AdaptedProcess.brownian(small), small, ch, xi, eta)


def test_integral_transport_refinement():
    """Coarse transformed grids (K = N/4) converge at order about 1/2."""
    errs = []
    for N in (128, 512):
        ens = sample_ensemble(make_grid(1.0, N), 4000, seed=8)
        tau = first_exit_time(ens, 1.0)
        chk = verify_integral_transport(AdaptedProcess.brownian(ens), ens, proportional_time_change(tau), None, tau, K=N // 4)
        errs.append(chk.mean)
    order = np.log(errs[0] / errs[1]) / np.log(4)
    assert order >= 0.4
