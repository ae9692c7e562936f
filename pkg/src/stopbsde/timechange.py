"""Time changes, transported processes and the rescaled Brownian motion.

A :class:`TimeChange` maps original time ``t`` to transformed time ``phi(t)``
path by path. Evaluators work on arrays whose leading axis runs over paths:
a 1-D argument holds one time per path, a 2-D argument ``(M, J)`` (or
``(1, J)``, broadcast) holds ``J`` times per path. ``phi_prime`` is always a
function of *original* time; consumers that need the slope at a transformed
time compose with ``phi_inverse`` themselves.

Processes observed on a grid are evaluated at off-grid times by one of two
rules. ``"linear"`` interpolates between the bracketing grid values, which is
exact for processes that are affine between grid points. ``"previous"`` takes
the value at the last grid time not after the query, i.e. the step path of
the discretely observed process; it never looks ahead and keeps every grid
increment intact, so it preserves quadratic variation and discrete stochastic
integrals. Times that land on the grid (to within ``1e-9 * N`` of a cell) are
read exactly under both rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateHorizon, InvalidArgument, OutOfRange
from .paths import AdaptedProcess, PathEnsemble, StoppingTimeField, TimeGrid, make_grid

__all__ = [
    "TimeChange",
    "TransportedEnsemble",
    "TransportCheck",
    "proportional_time_change",
    "invert",
    "sample_at",
    "transport_process",
    "transformed_brownian",
    "verify_integral_transport",
]

_HIT_TOL = 1e-9


def _as_2d(t, M):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full((M, 1), float(t)), "scalar"
    if t.ndim == 1:
        if t.shape[0] != M:
            raise InvalidArgument(f"1-D times must hold one value per path ({M}), got {t.shape[0]}")
        return t[:, None], "per-path"
    if t.ndim == 2 and t.shape[0] in (1, M):
        return np.broadcast_to(t, (M, t.shape[1])), "grid"
    raise InvalidArgument(f"cannot broadcast times of shape {t.shape} over {M} paths")


def _restore(out, form):
    return out[:, 0] if form in ("scalar", "per-path") else out


class TimeChange:
    """Per-path strictly increasing C^1 map with derivative and inverse.

    ``phi``, ``phi_prime`` and ``phi_inverse`` are vectorized callables on
    ``(M, J)`` arrays. Use :func:`proportional_time_change` for ``t / tau``;
    build custom changes directly from three callables.
    """

    def __init__(self, phi, phi_prime, phi_inverse, count: int, kind: str = "custom"):
        self._phi = phi
        self._phi_prime = phi_prime
        self._phi_inverse = phi_inverse
        self.count = int(count)
        self.kind = kind

    def phi(self, t):
        t2, form = _as_2d(t, self.count)
        return _restore(self._phi(t2), form)

    def phi_prime(self, t):
        t2, form = _as_2d(t, self.count)
        return _restore(self._phi_prime(t2), form)

    def phi_inverse(self, s):
        s2, form = _as_2d(s, self.count)
        return _restore(self._phi_inverse(s2), form)

    def inverted(self) -> "TimeChange":
        fwd, inv, der = self._phi, self._phi_inverse, self._phi_prime
        return TimeChange(inv, lambda s: 1.0 / der(inv(s)), fwd, self.count, self.kind)


class ProportionalChange(TimeChange):
    """``phi(t) = t / scale`` per path, or ``t * scale`` once inverted.

    Division is used in the forward direction so that ``phi(tau) == 1`` holds
    bit for bit when ``scale`` is ``tau``.
    """

    def __init__(self, scale, inverted: bool = False):
        scale = np.asarray(scale, dtype=float)
        self.scale = scale
        self.is_inverse = inverted
        col = scale[:, None]
        if inverted:
            super().__init__(
                lambda t: t * col,
                lambda t: np.broadcast_to(col, t.shape).copy(),
                lambda s: s / col,
                scale.size,
                "proportional",
            )
        else:
            super().__init__(
                lambda t: t / col,
                lambda t: np.broadcast_to(1.0 / col, t.shape).copy(),
                lambda s: s * col,
                scale.size,
                "proportional",
            )

    @property
    def tau(self) -> np.ndarray:
        """Original time mapped to transformed time 1."""
        return 1.0 / self.scale if self.is_inverse else self.scale

    def inverted(self) -> "ProportionalChange":
        return ProportionalChange(self.scale, not self.is_inverse)


def proportional_time_change(tau: StoppingTimeField) -> ProportionalChange:
    """``phi(t) = t / tau`` on every path, normalizing the horizon to 1."""
    times = tau.times
    if np.any(times <= 0):
        bad = np.flatnonzero(times <= 0)
        raise DegenerateHorizon(
            f"stopping time is zero on {bad.size} path(s), first at path {int(bad[0])}"
        )
    return ProportionalChange(times)


def invert(change: TimeChange) -> TimeChange:
    return change.inverted()


def sample_at(values: np.ndarray, grid: TimeGrid, times: np.ndarray, interpolation: str = "linear"):
    """Evaluate grid-observed ``values`` (M, N+1) at per-path ``times`` (M, J)."""
    if interpolation not in ("linear", "previous"):
        raise InvalidArgument(f"unknown interpolation rule {interpolation!r}")
    values = np.ascontiguousarray(values, dtype=float)
    M, N = values.shape[0], grid.steps
    slack = _HIT_TOL * max(N, 1)
    pos = np.array(np.broadcast_to(times, (M, np.shape(times)[-1])), dtype=float)
    pos /= grid.dt
    if pos.size and (pos.min() < -slack or pos.max() > N + slack):
        worst = float(pos.max() * grid.dt if pos.max() > N else pos.min() * grid.dt)
        raise OutOfRange(f"evaluation time {worst!r} outside the base grid [0, {grid.horizon}]")
    # a query within `slack` cells of a grid point reads that point exactly
    cell = pos + slack
    np.floor(cell, out=cell)
    np.clip(cell, 0, N, out=cell)
    flat = cell.astype(np.int64)
    flat += (np.arange(M, dtype=np.int64) * (N + 1))[:, None]
    source = values.ravel()
    base = source.take(flat)
    if interpolation == "previous":
        return base
    pos -= cell
    pos[pos <= slack] = 0.0
    flat += 1
    np.minimum(flat, source.size - 1, out=flat)
    upper = source.take(flat)
    upper -= base
    upper *= pos
    upper += base
    return upper


def _target_grid(target) -> TimeGrid:
    if isinstance(target, TimeGrid):
        return target
    return make_grid(1.0, int(target))


def transport_process(X: AdaptedProcess, change: TimeChange, target, interpolation: str = "linear"):
    """``X`` read at ``phi_inverse(s_j)`` for the points ``s_j`` of ``target``.

    ``target`` is a :class:`TimeGrid` or a step count ``K`` for the uniform
    grid of ``[0, 1]``.
    """
    grid = _target_grid(target)
    times = change.phi_inverse(grid.points[None, :])
    return AdaptedProcess(grid, sample_at(X.values, X.grid, times, interpolation))


@dataclass(frozen=True, eq=False)
class TransportedEnsemble:
    """Rescaled Brownian motion on the uniform grid of ``[0, 1]``.

    Exposes the same ``grid``/``increments``/``levels``/``count`` surface as
    :class:`~stopbsde.paths.PathEnsemble`, plus ``original_times``, the
    base-grid time ``phi_inverse(s_j)`` behind every transformed point.
    """

    base: PathEnsemble
    change: TimeChange
    grid: TimeGrid
    levels: np.ndarray

    @property
    def count(self) -> int:
        return self.levels.shape[0]

    @property
    def seed(self) -> int:
        return self.base.seed

    @cached_property
    def increments(self) -> np.ndarray:
        d = np.diff(self.levels, axis=1)
        d.flags.writeable = False
        return d

    @cached_property
    def original_times(self) -> np.ndarray:
        return self.change.phi_inverse(self.grid.points[None, :])


def transformed_brownian(
    ensemble: PathEnsemble, change: TimeChange, K: int, interpolation: str = "previous"
) -> TransportedEnsemble:
    """``W~_s = int_0^s h dW_{phi^{-1}}`` with ``h = phi'(phi^{-1}(s))^{1/2}``.

    For a proportional change ``h = tau^{-1/2}`` and the result is
    ``W(s * tau) / sqrt(tau)`` on ``s_j = j / K``.
    """
    if int(K) != K or K < 1:
        raise InvalidArgument(f"K must be a positive integer, got {K!r}")
    grid = make_grid(1.0, int(K))
    times = change.phi_inverse(grid.points[None, :])
    moved = sample_at(ensemble.levels, ensemble.grid, times, interpolation)
    h = np.sqrt(change.phi_prime(times))
    if change.kind == "proportional":
        levels = moved * h
    else:
        levels = np.zeros_like(moved)
        np.cumsum(h[:, :-1] * np.diff(moved, axis=1), axis=1, out=levels[:, 1:])
    levels.flags.writeable = False
    return TransportedEnsemble(ensemble, change, grid, levels)


@dataclass(frozen=True)
class TransportCheck:
    """Pathwise comparison of an integral and its time-changed counterpart."""

    original: np.ndarray
    transported: np.ndarray

    @property
    def discrepancy(self) -> np.ndarray:
        return np.abs(self.original - self.transported)

    @property
    def max(self) -> float:
        return float(self.discrepancy.max())

    @property
    def mean(self) -> float:
        return float(self.discrepancy.mean())


def _index_or_zero(field, M):
    if field is None or (np.isscalar(field) and field == 0):
        return np.zeros(M, dtype=np.int64)
    return field.indices


def verify_integral_transport(
    X: AdaptedProcess,
    ensemble: PathEnsemble,
    change: TimeChange,
    eta,
    xi: StoppingTimeField,
    K: int | None = None,
    interpolation: str = "previous",
) -> TransportCheck:
    """Compare ``int_eta^xi X dM`` with ``int_{phi(eta)}^{phi(xi)} X~ dM~`` on coupled paths.

    ``M`` is the ensemble's Brownian motion, ``X~ = X o phi^{-1}`` and
    ``M~ = M o phi^{-1}``. The right side is a left-point sum over a uniform
    ``K``-step grid of ``[0, S]``, ``S = max phi(xi)``, with the per-path end
    points ``phi(eta)`` and ``phi(xi)`` inserted.
    """
    from .paths import ito_integral

    M = ensemble.count
    lo = _index_or_zero(eta, M)
    hi = xi.indices
    if np.any(lo > hi):
        raise InvalidArgument("eta must not exceed xi on any path")
    pts = ensemble.grid.points
    lhs = ito_integral(X, ensemble, lo, hi)

    a = change.phi(pts[lo])
    b = change.phi(pts[hi])
    span = float(b.max())
    if span <= 0:
        return TransportCheck(lhs, np.zeros(M))
    K = ensemble.grid.steps if K is None else int(K)
    s = make_grid(span, K).points
    u = np.clip(s[None, :], a[:, None], b[:, None])
    times = change.phi_inverse(u)
    # phi^{-1}(phi(t)) can drift an ulp past the grid end
    np.minimum(times, ensemble.grid.horizon, out=times)
    x_t = sample_at(X.values, X.grid, times, interpolation)
    m_t = sample_at(ensemble.levels, ensemble.grid, times, interpolation)
    rhs = np.einsum("ij,ij->i", x_t[:, :-1], np.diff(m_t, axis=1))
    return TransportCheck(lhs, rhs)
