"""Brownian path ensembles on uniform grids, stopping times and discrete Itô calculus.

Gaussian increments come from a counter-based generator: the increment of
path ``m`` at step ``i`` is a pure function of ``(seed, m, i)``. Each path owns
a Philox stream whose counter starts at ``m * 2**128`` and whose ``i``-th raw
64-bit word is mapped to a standard normal by the inverse CDF, so a path is
bit-identical no matter how many threads build the ensemble or how many other
paths are requested alongside it.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import ndtri

from .errors import InvalidArgument

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "StoppingTimeField",
    "AdaptedProcess",
    "make_grid",
    "sample_ensemble",
    "standard_normals",
    "first_exit_time",
    "expected_exit_time",
    "constant_time",
    "ito_integral",
    "quadratic_variation",
]

_HEADER = struct.Struct("<dqqq")
_MAGIC = b"STBSDEW1"
_CHUNK = 2048


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``0 = t_0 < ... < t_N = T``."""

    horizon: float
    steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @cached_property
    def points(self) -> np.ndarray:
        pts = np.arange(self.steps + 1, dtype=float) * self.dt
        pts[-1] = self.horizon
        pts.flags.writeable = False
        return pts

    def index_of(self, t: float, atol: float = 1e-9) -> int:
        """Grid index of ``t``; raises if ``t`` is not a grid point."""
        pos = t / self.dt
        k = int(round(pos))
        if abs(pos - k) > atol or not 0 <= k <= self.steps:
            raise InvalidArgument(f"time {t!r} is not on the grid (dt={self.dt})")
        return k


def make_grid(T: float, N: int) -> TimeGrid:
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon must be positive, got {T!r}")
    if int(N) != N or N < 1:
        raise InvalidArgument(f"step count must be a positive integer, got {N!r}")
    return TimeGrid(float(T), int(N))


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``M`` Brownian paths sampled on ``grid``.

    ``increments`` has shape ``(M, N)``, ``levels`` has shape ``(M, N + 1)``
    with ``levels[:, 0] == 0``. Both arrays are read-only.
    """

    grid: TimeGrid
    seed: int
    increments: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "increments", _readonly(self.increments))

    @property
    def count(self) -> int:
        return self.increments.shape[0]

    @cached_property
    def levels(self) -> np.ndarray:
        w = np.zeros((self.count, self.grid.steps + 1))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return _readonly(w)

    def select(self, rows) -> "PathEnsemble":
        """Ensemble made of the paths ``rows`` (a slice or index array)."""
        return PathEnsemble(self.grid, self.seed, self.increments[rows])

    def save(self, path) -> None:
        """Write the flat binary layout: magic, header ``(T, N, M, seed)``, row-major increments."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(_HEADER.pack(self.grid.horizon, self.grid.steps, self.count, self.seed))
            fh.write(np.asarray(self.increments, dtype="<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise InvalidArgument(f"{path}: not a path-ensemble file")
            T, N, M, seed = _HEADER.unpack(fh.read(_HEADER.size))
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != M * N:
            raise InvalidArgument(f"{path}: expected {M * N} increments, found {data.size}")
        return cls(make_grid(T, N), seed, data.reshape(M, N).astype(float))


def _normal_rows(seed: int, first: int, stop: int, n: int) -> np.ndarray:
    raw = np.empty((stop - first, n), dtype=np.uint64)
    for row, m in enumerate(range(first, stop)):
        bitgen = np.random.Philox(key=seed, counter=[0, 0, m, 0])
        raw[row] = bitgen.random_raw(n)
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(u)


def standard_normals(seed: int, paths, steps: int, threads: int | None = None) -> np.ndarray:
    """Standard normals ``Z[m, i]`` keyed by ``(seed, m, i)`` for ``m`` in ``range(paths)``."""
    seed = int(seed) % 2**128
    threads = (os.cpu_count() or 1) if threads is None else int(threads)
    if threads < 1:
        raise InvalidArgument("threads must be >= 1")
    out = np.empty((paths, steps))
    bounds = [(a, min(a + _CHUNK, paths)) for a in range(0, paths, _CHUNK)]

    def fill(span):
        a, b = span
        out[a:b] = _normal_rows(seed, a, b, steps)

    if threads == 1 or len(bounds) == 1:
        for span in bounds:
            fill(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, bounds))
    return out


def sample_ensemble(grid: TimeGrid, M: int, seed: int, threads: int | None = None) -> PathEnsemble:
    if int(M) != M or M < 1:
        raise InvalidArgument(f"path count must be a positive integer, got {M!r}")
    z = standard_normals(seed, int(M), grid.steps, threads)
    z *= np.sqrt(grid.dt)
    return PathEnsemble(grid, int(seed), z)


@dataclass(frozen=True, eq=False)
class StoppingTimeField:
    """Grid-aligned bounded stopping time: ``tau[m] = grid.points[indices[m]]``."""

    grid: TimeGrid
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
            raise InvalidArgument("stopping-time indices must be a 1-D integer array")
        if idx.size and (idx.min() < 0 or idx.max() > self.grid.steps):
            raise InvalidArgument("stopping-time index outside [0, N]")
        object.__setattr__(self, "indices", _readonly(idx.astype(np.int64)))

    @property
    def cap(self) -> float:
        return self.grid.horizon

    @property
    def count(self) -> int:
        return self.indices.size

    @property
    def times(self) -> np.ndarray:
        return self.grid.points[self.indices]

    def select(self, rows) -> "StoppingTimeField":
        return StoppingTimeField(self.grid, self.indices[rows])

    def active(self, i: int) -> np.ndarray:
        """Mask of paths still running on ``[t_i, t_{i+1})``."""
        return self.indices > i


def constant_time(grid: TimeGrid, M: int, t: float | None = None) -> StoppingTimeField:
    """The deterministic stopping time ``t`` (default: the grid horizon) on every path."""
    k = grid.steps if t is None else grid.index_of(t)
    return StoppingTimeField(grid, np.full(M, k, dtype=np.int64))


def first_exit_time(ensemble: PathEnsemble, barrier: float) -> StoppingTimeField:
    """First grid index with ``|W| >= barrier``, capped at ``N``."""
    if not barrier > 0:
        raise InvalidArgument(f"barrier must be positive, got {barrier!r}")
    hit = np.abs(ensemble.levels) >= barrier
    first = np.argmax(hit, axis=1)
    k = np.where(hit.any(axis=1), first, ensemble.grid.steps)
    return StoppingTimeField(ensemble.grid, k.astype(np.int64))


def expected_exit_time(barrier: float, horizon: float) -> float:
    """``E[min(tau, T)]`` for the continuous-time exit of ``|W|`` from ``[0, barrier)``.

    Integrating the eigenfunction series of ``P(tau > t)`` over ``[0, T]`` and
    using ``sum_n (-1)^n / (2n+1)^3 = pi^3 / 32`` gives

        a^2 - 32 a^2 / pi^3 * sum_n (-1)^n exp(-k_n^2 T / 2) / (2n+1)^3,

    with ``k_n = (2n+1) pi / (2a)``; terms are kept until the exponential
    drops below ``e^-50``.
    """
    if not barrier > 0 or not horizon > 0:
        raise InvalidArgument("barrier and horizon must be positive")
    a2 = float(barrier) ** 2
    count = int(np.ceil(barrier * np.sqrt(100.0 / horizon) / np.pi)) + 2
    odd = 2.0 * np.arange(count) + 1.0
    signs = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
    decay = np.exp(-0.5 * (odd * np.pi / (2.0 * barrier)) ** 2 * horizon)
    return float(a2 - 32.0 * a2 / np.pi**3 * np.sum(signs * decay / odd**3))


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Per-path values ``X[m, i]`` at the points of ``grid``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.grid.steps + 1:
            raise InvalidArgument(
                f"process values must have shape (M, {self.grid.steps + 1}), got {v.shape}"
            )
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def of_time(cls, grid: TimeGrid, M: int, fn=lambda t: t) -> "AdaptedProcess":
        """Deterministic process ``fn(t)`` copied onto ``M`` paths."""
        row = np.asarray(fn(grid.points), dtype=float) * np.ones(grid.steps + 1)
        return cls(grid, np.broadcast_to(row, (M, grid.steps + 1)))

    @classmethod
    def brownian(cls, ensemble) -> "AdaptedProcess":
        return cls(ensemble.grid, ensemble.levels)


def _bounds(field, M, default):
    if field is None:
        return np.full(M, default, dtype=np.int64)
    if isinstance(field, StoppingTimeField):
        return field.indices
    if np.isscalar(field):
        return np.full(M, int(field), dtype=np.int64)
    return np.asarray(field, dtype=np.int64)


def ito_integral(integrand, driver, start=0, stop=None) -> np.ndarray:
    """Left-point sums ``sum_{start <= i < stop} X[m, i] * dW[m, i]`` per path.

    ``start`` and ``stop`` are stopping-time fields, plain grid indices, or
    ``None`` for the ends of the grid.
    """
    values = integrand.values if isinstance(integrand, AdaptedProcess) else np.asarray(integrand)
    grid = integrand.grid if isinstance(integrand, AdaptedProcess) else driver.grid
    if grid != driver.grid:
        raise InvalidArgument(f"integrand grid {grid} does not match driver grid {driver.grid}")
    dW = driver.increments
    M, N = dW.shape
    if values.shape != (M, N + 1):
        raise InvalidArgument(f"integrand shape {values.shape} does not match driver ({M}, {N + 1})")
    lo = _bounds(start, M, 0)
    hi = _bounds(stop, M, N)
    steps = np.arange(N)
    window = (steps >= lo[:, None]) & (steps < hi[:, None])
    return np.einsum("ij,ij->i", values[:, :-1] * window, dW)


def quadratic_variation(process) -> np.ndarray:
    """Running sums of squared increments, shape ``(M, N + 1)`` starting at 0."""
    values = process.values if isinstance(process, AdaptedProcess) else np.asarray(process)
    qv = np.zeros_like(values, dtype=float)
    np.cumsum(np.diff(values, axis=1) ** 2, axis=1, out=qv[:, 1:])
    return qv
