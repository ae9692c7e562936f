"""BSDE problem descriptions and the horizon-normalizing transform.

A problem on a stopping-time horizon ``tau`` is carried to the unit horizon by
the proportional change ``phi(t) = t / tau``: the driver becomes

    f~(s, y, z) = f(phi^{-1}(s), y, z * phi'^{1/2}) / phi'

with ``phi'`` taken at the original time ``phi^{-1}(s)``, which for
``phi = t / tau`` reads ``tau * f(s * tau, y, z / sqrt(tau))``. The terminal
value is left untouched. :func:`map_solution_back` runs the inverse map on a
solution computed on ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .paths import StoppingTimeField, TimeGrid
from .timechange import ProportionalChange, TimeChange, sample_at

__all__ = [
    "PathContext",
    "Driver",
    "TerminalCondition",
    "BsdeProblem",
    "Solution",
    "transform_driver",
    "to_constant_horizon",
    "map_solution_back",
    "driver_invariance_check",
]


@dataclass(frozen=True)
class PathContext:
    """What a driver may look at on step ``step``: the participating paths and their state.

    ``w`` is the driving Brownian motion at the current grid time. ``time`` is
    the original-clock time of each path (equal to the grid time for
    untransformed problems).
    """

    step: int
    paths: np.ndarray
    w: np.ndarray
    time: np.ndarray


def _coef(value, t, ctx):
    if callable(value):
        return np.asarray(value(t, ctx), dtype=float)
    return float(value)


@dataclass(frozen=True)
class Driver:
    """Generator ``f(t, y, z, ctx)``, vectorized over the participating paths."""

    func: Callable
    structure: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t, y, z, ctx=None):
        return self.func(np.asarray(t, dtype=float), y, z, ctx)

    @classmethod
    def zero(cls):
        return cls(lambda t, y, z, ctx: np.zeros_like(z), "zero")

    @classmethod
    def constant(cls, c: float):
        return cls.linear(forcing=c)

    @classmethod
    def linear(cls, beta=0.0, mu=0.0, forcing=0.0):
        """``f = a + beta * y + mu * z``; coefficients are numbers or ``fn(t, ctx)``."""

        def f(t, y, z, ctx):
            out = _coef(forcing, t, ctx) + _coef(beta, t, ctx) * y + _coef(mu, t, ctx) * z
            return np.broadcast_to(out, np.shape(z)).astype(float)

        return cls(f, "linear", {"beta": beta, "mu": mu, "forcing": forcing})

    @classmethod
    def quadratic(cls, alpha: float):
        alpha = float(alpha)
        return cls(lambda t, y, z, ctx: alpha * z * z, "quadratic-in-z", {"alpha": alpha})

    @classmethod
    def factored(cls, g):
        """``f = z * g(t, z, ctx)``; ``g`` is never recovered by dividing by ``z``."""
        return cls(lambda t, y, z, ctx: z * g(t, z, ctx), "factored", {"g": g})


@dataclass(frozen=True)
class TerminalCondition:
    """``xi`` as a function of the ensemble and the stopping index of each path."""

    func: Callable
    name: str = "custom"

    def __call__(self, ensemble, stop: StoppingTimeField) -> np.ndarray:
        return np.asarray(self.func(ensemble, stop), dtype=float)

    @classmethod
    def of_level(cls, fn, name="custom"):
        """``xi = fn(W_tau)``."""

        def xi(ensemble, stop):
            w = np.take_along_axis(ensemble.levels, stop.indices[:, None], axis=1)[:, 0]
            return fn(w)

        return cls(xi, name)

    @classmethod
    def constant(cls, c: float):
        c = float(c)
        return cls(lambda ensemble, stop: np.full(stop.count, c), "constant")

    @classmethod
    def w_tau(cls):
        return cls.of_level(lambda w: w.copy(), "W_tau")

    @classmethod
    def tanh_w_tau(cls):
        return cls.of_level(np.tanh, "tanh_W_tau")

    @classmethod
    def w_tau_squared(cls):
        return cls.of_level(np.square, "W_tau_squared")


@dataclass(frozen=True, eq=False)
class BsdeProblem:
    """``Y_t = xi - int_t^H Z dW + int_t^H f(s, Y, Z) ds`` with ``H`` a constant or a stopping time."""

    driver: Driver
    terminal: TerminalCondition
    horizon: float | StoppingTimeField
    change: TimeChange | None = None

    def __post_init__(self):
        if isinstance(self.horizon, StoppingTimeField):
            if np.any(self.horizon.times > self.horizon.cap):
                raise InvalidArgument("stopping-time horizon exceeds the grid horizon")
        elif not self.horizon > 0:
            raise InvalidArgument(f"constant horizon must be positive, got {self.horizon!r}")

    @property
    def random_horizon(self) -> bool:
        return isinstance(self.horizon, StoppingTimeField)

    def stop_field(self, ensemble) -> StoppingTimeField:
        """The horizon as a stopping-time field on ``ensemble``'s grid."""
        if self.random_horizon:
            h = self.horizon
            if h.grid != ensemble.grid or h.count != ensemble.count:
                raise InvalidArgument("horizon field does not match the ensemble grid or path count")
            return h
        k = ensemble.grid.index_of(float(self.horizon))
        return StoppingTimeField(ensemble.grid, np.full(ensemble.count, k, dtype=np.int64))


@dataclass(eq=False)
class Solution:
    """Per-path ``(Y, Z)`` on ``grid``; frozen at ``xi`` (``Z = 0``) from the horizon on."""

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    horizon: np.ndarray
    stderr: float
    diagnostics: list = field(default_factory=list)

    @property
    def y0(self) -> float:
        y = self.Y[:, 0]
        # a constant column is returned as is; summation would round it
        return float(y[0]) if np.all(y == y[0]) else float(y.mean())


def _tau_of(change):
    if isinstance(change, ProportionalChange) and not change.is_inverse:
        return change.tau
    raise InvalidArgument("the horizon transform needs a forward proportional time change")


def transform_driver(f: Driver, tau) -> Driver:
    """Driver of the unit-horizon problem for ``phi = t / tau``: ``tau * f(s tau, y, z / sqrt(tau))``.

    Written in the general form ``f(phi^{-1}(s), y, z phi'^{1/2}) / phi'`` with
    ``phi' = 1 / tau`` evaluated at the original time.
    """
    tau = np.asarray(tau, dtype=float)

    def transformed(s, y, z, ctx):
        paths = ctx.paths if ctx is not None else slice(None)
        tau_p = tau[paths]
        orig = s * tau_p
        slope = 1.0 / tau_p
        inner = None
        if ctx is not None:
            inner = PathContext(ctx.step, ctx.paths, ctx.w * np.sqrt(tau_p), orig)
        return f(orig, y, z * np.sqrt(slope), inner) / slope

    return Driver(transformed, f.structure, dict(f.params, transformed_from=f))


def to_constant_horizon(problem: BsdeProblem, change: TimeChange) -> BsdeProblem:
    """The unit-horizon problem solved by ``(Y o phi^{-1}, Z o phi^{-1} / sqrt(phi'))``.

    The returned terminal condition evaluates the original ``xi`` on the
    base ensemble behind a :class:`~stopbsde.timechange.TransportedEnsemble`.
    """
    if not problem.random_horizon:
        raise InvalidArgument("problem already has a constant horizon")
    tau = _tau_of(change)
    field_tau = problem.horizon
    if tau.shape != field_tau.times.shape or not np.array_equal(tau, field_tau.times):
        raise InvalidArgument("time change was not built from the problem's stopping time")
    source = problem.terminal

    def xi(ensemble, stop):
        base = getattr(ensemble, "base", None)
        if base is None:
            raise InvalidArgument("transformed terminal value needs the transported ensemble")
        return source(base, field_tau)

    return BsdeProblem(transform_driver(problem.driver, tau), TerminalCondition(xi, source.name), 1.0, change)


def map_solution_back(sol: Solution, change: TimeChange, horizon: StoppingTimeField) -> Solution:
    """``(Y_t, Z_t) = (y_{phi(t)}, z_{phi(t)} * phi'(t)^{1/2})`` up to ``tau``, frozen afterwards.

    ``y`` is read with linear interpolation, ``z`` (a per-step quantity) with
    the previous-value rule.
    """
    tau = _tau_of(change)
    if not np.array_equal(tau, horizon.times):
        raise InvalidArgument("time change was not built from this horizon")
    grid = horizon.grid
    pts = grid.points[None, :]
    k = horizon.indices
    running = np.arange(grid.steps + 1)[None, :] < k[:, None]
    s = np.where(running, change.phi(np.broadcast_to(pts, (tau.size, grid.steps + 1))), 1.0)
    Y = sample_at(sol.Y, sol.grid, s, "linear")
    Z = sample_at(sol.Z, sol.grid, s, "previous")
    Z = np.where(running, Z * np.sqrt(change.phi_prime(np.broadcast_to(pts, s.shape))), 0.0)
    return Solution(grid, Y, Z, k.copy(), sol.stderr, list(sol.diagnostics))


def driver_invariance_check(alpha: float, tau, s_values=None, z_values=None, y_value: float = 0.3) -> float:
    """``max |f~(s, y, z) - alpha z^2|`` for ``f = alpha z^2`` over an ``(s, z, tau)`` lattice.

    ``tau`` is a stopping-time field or an array of horizon values; the
    default lattice has ten points each in ``s`` and ``z``.
    """
    if not np.isfinite(alpha):
        raise InvalidArgument("alpha must be finite")
    taus = tau.times if isinstance(tau, StoppingTimeField) else np.asarray(tau, dtype=float)
    s_values = np.linspace(0.0, 1.0, 10) if s_values is None else np.asarray(s_values, float)
    z_values = np.linspace(-3.0, 3.0, 10) if z_values is None else np.asarray(z_values, float)
    S, Zs, T = (a.ravel() for a in np.meshgrid(s_values, z_values, np.unique(taus), indexing="ij"))
    f = transform_driver(Driver.quadratic(alpha), T)
    ctx = PathContext(0, np.arange(T.size), np.zeros(T.size), S)
    got = f(S, np.full(T.size, y_value), Zs, ctx)
    return float(np.max(np.abs(got - alpha * Zs**2)))
