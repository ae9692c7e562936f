"""Measure solutions for drivers of the form ``f(s, z) = z g(s, z)``.

The driver is absorbed into a change of measure: with

    R = exp(int_0^tau g(s, Z_s) dW_s - 1/2 int_0^tau g(s, Z_s)^2 ds),  Q = R . P,

``Y = E^Q[xi | F]`` and ``dY = Z dW^Q`` where ``W^Q = W - int g ds``. A pair
``(Y, Z)`` with this property solves ``Y_t = xi - int Z dW + int f(s, Z) ds``.

:func:`construct_measure_solution` finds such a pair by fixed-point iteration
on ``Z``: freeze ``Q`` from the current ``Z``, compute ``Y`` as the
``Q``-conditional expectation of ``xi`` (ratio of two regressions under ``P``),
extract the next ``Z`` from ``dW^Q``, repeat until ``Y`` stops moving.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import Driver, TerminalCondition
from .errors import InvalidArgument, NumericalError
from .paths import StoppingTimeField
from .solvers import Estimate, RegressionBasis, _Columns, _Projector

__all__ = [
    "FactoredDriver",
    "AssumptionReport",
    "DensityPath",
    "MeasureSolution",
    "check_assumption_H",
    "girsanov_density",
    "construct_measure_solution",
    "martingale_check",
    "write_history_csv",
]

_MAX_EXP = 709.0


@dataclass(frozen=True)
class FactoredDriver:
    """``f(s, z) = z * g(s, z)`` together with the constants of the growth assumption.

    ``g`` takes ``(s, z)`` arrays and returns an array of the same shape.
    ``psi(s)`` bounds ``|g|`` on ``|z| <= epsilon``; ``c`` bounds
    ``|f| / (1 + z^2)``.
    """

    g: Callable
    c: float
    epsilon: float
    psi: Callable
    name: str = "custom"

    def f(self, s, z):
        return z * self.g(s, z)

    def driver(self) -> Driver:
        return Driver.factored(lambda t, z, ctx: self.g(t, z))

    @classmethod
    def quadratic(cls, alpha: float, epsilon: float = 1.0):
        """``g = alpha z`` (``f = alpha z^2``), with ``c = |alpha|`` and ``psi = |alpha| epsilon``."""
        a = float(alpha)
        return cls(lambda s, z: a * z, abs(a), epsilon, lambda s: np.full(np.shape(s), abs(a) * epsilon), "quadratic")

    @classmethod
    def zero(cls):
        return cls(lambda s, z: np.zeros(np.broadcast(s, z).shape), 0.0, 1.0, lambda s: np.zeros(np.shape(s)), "zero")


@dataclass(frozen=True)
class AssumptionReport:
    """Sampled evidence for each checkable clause; ``passed`` is their conjunction."""

    growth: float
    growth_ok: bool
    small_z_excess: float
    small_z_ok: bool
    modulus: tuple
    continuity_ok: bool

    @property
    def passed(self) -> bool:
        return self.growth_ok and self.small_z_ok and self.continuity_ok

    def rows(self):
        return [
            ("growth |f|/(1+z^2) <= c", self.growth, self.growth_ok),
            ("small-z |g| - psi <= 0", self.small_z_excess, self.small_z_ok),
            ("continuity modulus of g", self.modulus[-1], self.continuity_ok),
        ]


def check_assumption_H(driver: FactoredDriver, s_values, z_values) -> AssumptionReport:
    """Check growth, small-``z`` boundedness and continuity of ``g`` on an ``(s, z)`` lattice.

    Continuity is judged from the largest jump of ``g`` between neighbouring
    ``z`` points at the given spacing and at half of it: the jump must shrink
    by at least a quarter (or already be zero). Adaptedness is not checkable
    on a deterministic lattice and is not reported.
    """
    s = np.asarray(s_values, float)
    z = np.sort(np.asarray(z_values, float))
    S, Zg = np.meshgrid(s, z, indexing="ij")
    growth = float(np.max(np.abs(driver.f(S, Zg)) / (1.0 + Zg**2)))

    small = np.abs(Zg) <= driver.epsilon
    if small.any():
        excess = float(np.max(np.abs(driver.g(S, Zg))[small] - np.broadcast_to(driver.psi(S), S.shape)[small]))
    else:
        excess = 0.0

    fine = np.empty(2 * z.size - 1)
    fine[0::2] = z
    fine[1::2] = 0.5 * (z[1:] + z[:-1])
    moduli = []
    for zz in (z, fine):
        Sg, Zf = np.meshgrid(s, zz, indexing="ij")
        gv = driver.g(Sg, Zf)
        moduli.append(float(np.max(np.abs(np.diff(gv, axis=1)))) if zz.size > 1 else 0.0)
    cont = all(np.isfinite(moduli)) and (moduli[1] <= 0.75 * moduli[0] or moduli[1] <= 1e-12)
    return AssumptionReport(
        growth, growth <= driver.c * (1 + 1e-12), excess, excess <= 1e-12, tuple(moduli), bool(cont)
    )


@dataclass(frozen=True, eq=False)
class DensityPath:
    """``log_density[m]`` is ``log R`` on path ``m``; ``dWq = dW - g dt`` before ``tau``, ``dW`` after."""

    log_density: np.ndarray
    log_increments: np.ndarray
    dWq: np.ndarray

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)


def girsanov_density(g_values, ensemble, horizon: StoppingTimeField) -> DensityPath:
    """Density ``R`` and ``Q``-Brownian increments for the integrand ``g`` (shape ``(M, N)``)."""
    g = np.asarray(g_values, dtype=float)
    dW, dt = ensemble.increments, ensemble.grid.dt
    if g.shape != dW.shape:
        raise InvalidArgument(f"g-values shape {g.shape} does not match increments {dW.shape}")
    running = np.arange(dW.shape[1])[None, :] < horizon.indices[:, None]
    g = np.where(running, g, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        steps = g * dW - 0.5 * g * g * dt
        log_r = steps.sum(axis=1)
    worst = float(log_r.max()) if log_r.size else 0.0
    if not np.all(np.isfinite(log_r)) or worst > _MAX_EXP:
        raise NumericalError("density overflows", max_exponent=worst)
    return DensityPath(log_r, steps, dW - g * dt)


@dataclass(eq=False)
class MeasureSolution:
    """Result of :func:`construct_measure_solution`.

    ``R`` is the terminal density of the measure under which ``Y`` was
    computed; ``dWq`` are the matching ``Q``-Brownian increments. ``history``
    holds one ``(iteration, y0, change)`` tuple per iteration, also when the
    iteration did not converge.
    """

    Y: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    dWq: np.ndarray
    horizon: np.ndarray
    iterations: int
    converged: bool
    y0: float
    stderr: float
    history: list = field(default_factory=list)
    dt: float = float("nan")

    def z_moment(self) -> Estimate:
        """``E^Q[(int_0^tau Z^2 ds)^{1/2}]``, the square-root moment that must stay finite."""
        v = self.R * np.sqrt(np.sum(self.Z**2, axis=1) * self.dt)
        return Estimate(float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)))

    def martingale_increments(self, step: int) -> Estimate:
        """Mean and standard error of ``R (Y_{i+1} - Y_i - Z_i dW^Q_i)`` over all paths.

        The standard error treats ``Y`` and ``Z`` as fixed functions. They are
        fitted on the same paths, which adds noise of order
        ``std(R Z dW^Q) / sqrt(M)`` to the mean; :func:`martingale_check`
        accounts for it.
        """
        d = self.Y[:, step + 1] - self.Y[:, step] - self.Z[:, step] * self.dWq[:, step]
        d = np.where(self.horizon > step, d, 0.0)
        v = self.R * d
        return Estimate(float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)))


def _weighted_mean(x, w):
    if np.all(x == x[0]):
        return x[0]
    return np.sum(w * x) / np.sum(w)


def construct_measure_solution(
    terminal: TerminalCondition,
    driver: FactoredDriver,
    ensemble,
    horizon: StoppingTimeField,
    basis: RegressionBasis | None = None,
    max_iters: int = 50,
    tol: float = 1e-3,
    lattice=None,
) -> MeasureSolution:
    """Fixed-point construction of ``(Y, Z, Q)`` for a bounded ``xi`` and a factored driver.

    Iteration ``n`` freezes the measure ``Q = R . P`` built from ``Z^{n-1}``
    (``Z^0 = 0``), sets ``Y^n_t = E^Q[xi | F_t]`` and
    ``Z^n_t = E^Q[(Y^n_{t+dt} - Y^n_t) dW^Q_t | F_t] / dt``. Both ``Q``-conditional
    expectations are least-squares fits weighted by ``R``, so the weighted
    residuals of every ``Y`` fit sum to zero. Iteration stops once
    ``max_t mean_m |Y^n - Y^{n-1}| < tol``, or as soon as ``g(Z^n)`` equals
    ``g(Z^{n-1})`` on every path (the next iterate would repeat this one).
    """
    basis = basis or RegressionBasis()
    if lattice is None:
        lattice = (np.linspace(0.0, horizon.cap, 5), np.linspace(-4.0, 4.0, 81))
    report = check_assumption_H(driver, *lattice)
    if not report.passed:
        raise InvalidArgument(f"driver fails the growth assumption: {report.rows()}")
    if horizon.grid != ensemble.grid or horizon.count != ensemble.count:
        raise InvalidArgument("horizon field does not match the ensemble")

    xi = terminal(ensemble, horizon)
    if not np.all(np.isfinite(xi)):
        raise NumericalError("terminal value is not finite")
    grid = ensemble.grid
    M, N, dt = ensemble.count, grid.steps, grid.dt
    k = horizon.indices
    cols = _Columns(ensemble)
    pts = grid.points

    def g_row(i, z):
        out = np.asarray(driver.g(np.full(M, pts[i]), z), dtype=float)
        return np.where(k > i, out, 0.0)

    # Y and Z are updated in place; Z rows are consumed into g before being overwritten
    Y = np.repeat(xi[None, :], N + 1, axis=0)
    Z = np.zeros((N + 1, M))
    g = np.stack([g_row(i, Z[i]) for i in range(N)])
    history = []
    converged = False
    for it in range(1, max_iters + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            log_r = np.einsum("ij,ij->j", g, cols.dW) - 0.5 * dt * np.einsum("ij,ij->j", g, g)
        top = float(log_r.max())
        if not np.isfinite(top) or top > _MAX_EXP:
            raise NumericalError("density overflows", iteration=it, max_exponent=top)
        R = np.exp(log_r)

        change = 0.0
        same_g = True
        for i in range(N - 1, -1, -1):
            rows = np.flatnonzero(k > i)
            if rows.size == 0:
                continue
            weight = R[rows]
            dwq = cols.dW[i, rows] - g[i, rows] * dt
            if i == 0:
                y = np.full(rows.size, _weighted_mean(xi[rows], weight))
            else:
                proj = _Projector(basis, cols.W[i, rows], weights=weight)
                y = proj(xi[rows])
            if not np.all(np.isfinite(y)):
                raise NumericalError("non-finite Y", iteration=it, step=i)
            change = max(change, float(np.mean(np.abs(y - Y[i, rows]))))
            Y[i, rows] = y
            target = (Y[i + 1, rows] - y) * dwq / dt
            if i == 0:
                z = np.full(rows.size, _weighted_mean(target, weight))
            else:
                z = proj(target)
            Z[i, rows] = z
            same_g = same_g and np.array_equal(g_row(i, Z[i]), g[i])

        history.append((it, float(Y[0, 0]), change if it > 1 else float("inf")))
        if (it > 1 and change < tol) or same_g:
            converged = True
            break
        if it < max_iters:
            g = np.stack([g_row(i, Z[i]) for i in range(N)])

    y0 = float(Y[0, 0])
    se = float(np.std(R * (xi - y0), ddof=1) / (np.sqrt(M) * R.mean())) if M > 1 else float("nan")
    dWq = (cols.dW - g * dt).T
    return MeasureSolution(Y.T, Z.T, R, dWq, k.copy(), it, converged, y0, se, history, ensemble.grid.dt)


def martingale_check(terminal, driver, ensemble, horizon, steps, sections: int = 20, **kwargs):
    """Sectioned test of the ``Q``-martingale property at the grid steps ``steps``.

    The paths are cut into ``sections`` disjoint blocks and the construction
    is rerun on each block. The estimate is the block average of the mean
    reweighted increment residual and the standard error comes from the
    spread between blocks, so it includes the regression fitting noise.
    Returns one :class:`Estimate` per step.
    """
    if sections < 2 or ensemble.count < 2 * sections:
        raise InvalidArgument("need at least two sections of two paths each")
    M = ensemble.count
    stats = np.empty((sections, len(steps)))
    for b in range(sections):
        rows = slice(b * M // sections, (b + 1) * M // sections)
        sol = construct_measure_solution(terminal, driver, ensemble.select(rows), horizon.select(rows), **kwargs)
        stats[b] = [sol.martingale_increments(i).value for i in steps]
    mean = stats.mean(axis=0)
    se = stats.std(axis=0, ddof=1) / np.sqrt(sections)
    return [Estimate(float(m), float(e)) for m, e in zip(mean, se)]


def write_history_csv(solution: MeasureSolution, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "y0", "change"])
        for it, y0, change in solution.history:
            out.writerow([it, f"{y0:.17g}", f"{change:.17g}"])
