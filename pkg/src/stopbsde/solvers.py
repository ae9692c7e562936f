"""Least-squares Monte Carlo BSDE solver, the linear-BSDE formula and the Cole-Hopf oracle.

The backward scheme is explicit. With ``Yhat = E[Y_{i+1} | F_i]``:

    Z_i = E[(Y_{i+1} - Yhat) dW_i | F_i] / dt
    Y_i = Yhat + f(t_i, Yhat, Z_i) dt

Conditional expectations are least-squares projections on a basis of time-``t_i``
features. Paths whose horizon index is ``<= i`` sit out the regression at step
``i`` and keep ``Y = xi``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .bsde import BsdeProblem, Driver, PathContext, Solution, TerminalCondition
from .errors import InvalidArgument, NumericalError
from .paths import StoppingTimeField
from .timechange import TransportedEnsemble

__all__ = [
    "Estimate",
    "RegressionBasis",
    "LinearDriverSpec",
    "AdjointEnsemble",
    "solve_backward_regression",
    "simulate_adjoint",
    "linear_explicit",
    "cole_hopf_reference",
    "write_diagnostics_csv",
]

_MAX_EXP = 709.0
_MAX_COND = 1e12


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


@dataclass(frozen=True)
class RegressionBasis:
    """Regression features at one time step.

    ``kind="polynomial"``: monomials ``w^a u^b`` with ``a <= degree`` and
    ``b <= time_degree``, where ``w`` is the (standardized) Brownian level and
    ``u`` the original-clock time of a transformed problem (absent otherwise).
    ``kind="bins"``: indicators of ``bins`` equal-width cells of ``w``.
    """

    kind: str = "polynomial"
    degree: int = 3
    time_degree: int = 2
    bins: int = 16

    def __post_init__(self):
        if self.kind not in ("polynomial", "bins"):
            raise InvalidArgument(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.time_degree < 0 or self.bins < 1:
            raise InvalidArgument("basis sizes must be non-negative (bins >= 1)")

    def design(self, w, u=None, degree=None) -> np.ndarray:
        """Feature-major design matrix, shape ``(p, n)``."""
        degree = self.degree if degree is None else degree
        if self.kind == "bins":
            return _bins(w, self.bins if degree == self.degree else max(1, degree))
        zw = _standardize(w)
        zu = _standardize(u) if u is not None else None
        w_deg = degree if zw is not None else 0
        u_deg = min(self.time_degree, degree) if zu is not None else 0
        A = np.empty(((w_deg + 1) * (u_deg + 1), w.size))
        A[0] = 1.0
        for a in range(1, w_deg + 1):
            np.multiply(A[a - 1], zw, out=A[a])
        block = w_deg + 1
        for b in range(1, u_deg + 1):
            np.multiply(A[(b - 1) * block : b * block], zu, out=A[b * block : (b + 1) * block])
        return A


def _standardize(x):
    if x is None:
        return None
    sd = x.std()
    if not sd > 1e-14 * max(1.0, abs(x).max()):
        return None
    return (x - x.mean()) / sd


def _bins(w, n):
    lo, hi = w.min(), w.max()
    if hi <= lo:
        return np.ones((1, w.size))
    cell = np.minimum(((w - lo) / (hi - lo) * n).astype(np.int64), n - 1)
    A = np.zeros((n, w.size))
    A[cell, np.arange(w.size)] = 1.0
    return A[A.any(axis=1)]


class _Projector:
    """Least-squares projection on one step's design, with degree fallback.

    With ``weights`` the fit minimizes ``sum weights * residual^2``; the
    constant column then makes weighted residuals sum to zero.
    """

    def __init__(self, basis, w, u=None, weights=None):
        self.degree = basis.degree
        self.weights = None if weights is None else weights / weights.mean()
        while True:
            A = basis.design(w, u, self.degree)
            G = A @ A.T if self.weights is None else (A * self.weights) @ A.T
            try:
                cond = float(np.linalg.cond(G))
                if not np.isfinite(cond) or cond > _MAX_COND:
                    raise LinAlgError("ill-conditioned")
                self.factor = cho_factor(G)
                break
            except LinAlgError:
                if self.degree == 0:
                    raise NumericalError("regression system is singular at degree 0")
                self.degree -= 1
        self.A = A
        self.cond = cond
        self.fallback = self.degree != basis.degree

    def __call__(self, target: np.ndarray) -> np.ndarray:
        if target.size and np.all(target == target[0]):
            return np.full_like(target, target[0])
        if self.weights is not None:
            target = self.weights * target
        return cho_solve(self.factor, self.A @ target) @ self.A


class _Columns:
    """Time-major copies of an ensemble's arrays; row ``i`` holds every path at step ``i``."""

    def __init__(self, ensemble):
        self.W = np.ascontiguousarray(ensemble.levels.T)
        self.dW = np.ascontiguousarray(ensemble.increments.T)
        self.U = None
        if isinstance(ensemble, TransportedEnsemble):
            self.U = np.ascontiguousarray(ensemble.original_times.T)

    def features(self, i, rows):
        return self.W[i, rows], (None if self.U is None else self.U[i, rows])


def _stderr(x) -> float:
    """Standard error of the mean; exactly 0 for a constant sample."""
    if x.size < 2:
        return float("nan")
    if np.all(x == x[0]):
        return 0.0
    return float(x.std(ddof=1) / np.sqrt(x.size))


def _check_finite(values, what, step):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite {what}", step=step)


def solve_backward_regression(problem: BsdeProblem, ensemble, basis: RegressionBasis | None = None) -> Solution:
    """Backward least-squares solve of ``problem`` on ``ensemble``.

    ``ensemble`` is a path ensemble, or the transported ensemble of a
    unit-horizon problem (its original-clock times join the features).
    ``Solution.stderr`` is the standard error of the mean of the pathwise
    realizations ``xi + sum f dt`` whose average equals ``Y0``.
    """
    basis = basis or RegressionBasis()
    grid = ensemble.grid
    M, N = ensemble.count, grid.steps
    stop = problem.stop_field(ensemble)
    k = stop.indices
    xi = problem.terminal(ensemble, stop)
    _check_finite(xi, "terminal value", N)

    cols, dt = _Columns(ensemble), grid.dt
    Y = np.repeat(xi[None, :], N + 1, axis=0)
    Z = np.zeros((N + 1, M))
    y_next = xi.copy()
    realized = xi.copy()
    diagnostics = []
    for i in range(N - 1, -1, -1):
        rows = np.flatnonzero(k > i)
        if rows.size == 0:
            continue
        w, u = cols.features(i, rows)
        proj = _Projector(basis, w, u)
        yn = y_next[rows]
        yhat = proj(yn)
        z = proj((yn - yhat) * cols.dW[i, rows]) / dt
        t = np.full(rows.size, grid.points[i])
        ctx = PathContext(i, rows, w, t if u is None else u)
        f = np.asarray(problem.driver(t, yhat, z, ctx), dtype=float)
        y = yhat + f * dt
        _check_finite(y, "Y", i)
        _check_finite(z, "Z", i)
        y_next[rows] = y
        Y[i, rows] = y
        Z[i, rows] = z
        realized[rows] += f * dt
        diagnostics.append(
            {
                "step": i,
                "time": grid.points[i],
                "paths": rows.size,
                "condition": proj.cond,
                "degree": proj.degree,
                "fallback": proj.fallback,
            }
        )
    diagnostics.reverse()
    return Solution(grid, Y.T, Z.T, k.copy(), _stderr(realized), diagnostics)


def write_diagnostics_csv(solution: Solution, path) -> None:
    """Per-step condition numbers and participating path counts."""
    fields = ["step", "time", "paths", "condition", "degree", "fallback"]
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=fields)
        out.writeheader()
        for row in solution.diagnostics:
            out.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})


@dataclass(frozen=True)
class LinearDriverSpec:
    """``f = forcing + beta * y + mu * z``.

    Each coefficient is a number or a callable ``fn(t, w)`` returning one value
    per path from the time and the Brownian level. Declared bounds on
    ``|beta|`` and ``|mu|`` are checked on the ensemble by :meth:`check_bounds`.
    """

    beta: object = 0.0
    mu: object = 0.0
    forcing: object = 0.0
    beta_bound: float | None = None
    mu_bound: float | None = None

    def values(self, name, t, w) -> np.ndarray:
        c = getattr(self, name)
        if callable(c):
            return np.broadcast_to(np.asarray(c(t, w), dtype=float), w.shape)
        return np.full(w.shape, float(c))

    def check_bounds(self, ensemble) -> None:
        pts, W = ensemble.grid.points, ensemble.levels
        for name, bound in (("beta", self.beta_bound), ("mu", self.mu_bound)):
            if bound is None:
                continue
            worst = max(float(np.abs(self.values(name, pts[i], W[:, i])).max()) for i in range(len(pts)))
            if worst > bound:
                raise InvalidArgument(f"|{name}| reaches {worst:.6g}, above the declared bound {bound}")

    def driver(self) -> Driver:
        def coef(name):
            c = getattr(self, name)
            if not callable(c):
                return c
            return lambda t, ctx: c(t, ctx.w)

        return Driver.linear(coef("beta"), coef("mu"), coef("forcing"))


@dataclass(frozen=True, eq=False)
class AdjointEnsemble:
    """``Gamma[m, i] = Gamma_{t0, t_i}`` for ``i >= anchor`` (NaN before)."""

    values: np.ndarray
    anchor: int


def simulate_adjoint(spec: LinearDriverSpec, ensemble, anchor: float = 0.0) -> AdjointEnsemble:
    """``dGamma = Gamma (beta dt + mu dW)``, ``Gamma_{t0,t0} = 1``, advanced in log space."""
    grid = ensemble.grid
    i0 = grid.index_of(anchor)
    M, N = ensemble.count, grid.steps
    cols, dt = _Columns(ensemble), grid.dt
    log_g = np.full((N + 1, M), np.nan)
    log_g[i0] = 0.0
    for i in range(i0, N):
        b = spec.values("beta", grid.points[i], cols.W[i])
        m = spec.values("mu", grid.points[i], cols.W[i])
        log_g[i + 1] = log_g[i] + (b - 0.5 * m * m) * dt + m * cols.dW[i]
    worst = float(np.nanmax(log_g))
    if worst > _MAX_EXP:
        raise NumericalError("adjoint process overflows", max_exponent=worst)
    return AdjointEnsemble(np.exp(log_g).T, i0)


def linear_explicit(
    spec: LinearDriverSpec,
    terminal: TerminalCondition,
    horizon,
    ensemble,
    basis: RegressionBasis | None = None,
) -> Solution:
    """``Y_t = E[xi Gamma_{t,tau} + int_t^tau Gamma_{t,s} a_s ds | F_t]`` by simulation.

    ``Y0`` is the plain path average of the functional at ``t = 0``; later
    times regress the same functional (with ``Gamma_{t,s} = Gamma_{0,s} / Gamma_{0,t}``)
    on time-``t`` features. ``Z`` follows from the ``dW`` regression identity.
    """
    basis = basis or RegressionBasis()
    problem = BsdeProblem(spec.driver(), terminal, horizon)
    stop = problem.stop_field(ensemble)
    k = stop.indices
    grid = ensemble.grid
    M, N = ensemble.count, grid.steps
    xi = terminal(ensemble, stop)
    _check_finite(xi, "terminal value", N)

    gamma = np.ascontiguousarray(simulate_adjoint(spec, ensemble, 0.0).values.T)
    cols, dt = _Columns(ensemble), grid.dt
    # tail[i] = sum_{i <= j < k} Gamma_{0,t_j} a_j dt
    tail = np.zeros((N + 1, M))
    for i in range(N - 1, -1, -1):
        a = spec.values("forcing", grid.points[i], cols.W[i])
        tail[i] = tail[i + 1] + np.where(k > i, gamma[i] * a * dt, 0.0)
    end_value = xi * gamma[k, np.arange(M)]

    F0 = end_value + tail[0]
    _check_finite(F0, "explicit functional", 0)
    Y = np.repeat(xi[None, :], N + 1, axis=0)
    Z = np.zeros((N + 1, M))
    Y[0] = F0[0] if np.all(F0 == F0[0]) else F0.mean()
    diagnostics = []
    for i in range(N - 1, -1, -1):
        rows = np.flatnonzero(k > i)
        if rows.size == 0:
            continue
        if i == 0:
            Z[0, rows] = ((Y[1, rows] - Y[0, rows]) * cols.dW[0, rows]).mean() / dt
            continue
        proj = _Projector(basis, cols.W[i, rows])
        Y[i, rows] = proj((end_value[rows] + tail[i, rows]) / gamma[i, rows])
        Z[i, rows] = proj((Y[i + 1, rows] - Y[i, rows]) * cols.dW[i, rows]) / dt
        _check_finite(Y[i, rows], "Y", i)
        diagnostics.append(
            {"step": i, "time": grid.points[i], "paths": rows.size,
             "condition": proj.cond, "degree": proj.degree, "fallback": proj.fallback}
        )
    diagnostics.reverse()
    return Solution(grid, Y.T, Z.T, k.copy(), _stderr(F0), diagnostics)


def _xi_for(terminal, ensemble, horizon):
    if isinstance(horizon, StoppingTimeField):
        stop = horizon
    else:
        k = ensemble.grid.index_of(float(horizon))
        stop = StoppingTimeField(ensemble.grid, np.full(ensemble.count, k, dtype=np.int64))
    return terminal(ensemble, stop)


def cole_hopf_reference(alpha: float, terminal: TerminalCondition, ensemble, horizon) -> Estimate:
    """``Y0 = ln(E exp(2 alpha xi)) / (2 alpha)`` for the driver ``alpha z^2``.

    Evaluated around the extreme of ``xi`` so the exponentials never exceed 1;
    the raw exponent ``2 alpha xi`` must still fit a double, else the
    moment is treated as non-integrable and :class:`NumericalError` is raised.
    """
    if alpha == 0 or not np.isfinite(alpha):
        raise InvalidArgument("alpha must be finite and non-zero")
    xi = _xi_for(terminal, ensemble, horizon)
    expo = 2.0 * alpha * xi
    top = float(np.max(expo)) if expo.size else 0.0
    if not np.all(np.isfinite(expo)) or top > _MAX_EXP:
        raise NumericalError("exp(2 alpha xi) overflows", max_exponent=top)
    pivot = xi.max() if alpha > 0 else xi.min()
    w = np.exp(2.0 * alpha * (xi - pivot))
    mean_w = w.mean()
    value = float(pivot + np.log(mean_w) / (2.0 * alpha))
    M = xi.size
    stderr = float(w.std(ddof=1) / (mean_w * np.sqrt(M) * 2.0 * abs(alpha))) if M > 1 else float("nan")
    return Estimate(value, stderr)
