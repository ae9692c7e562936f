"""Monte Carlo toolkit for BSDEs whose horizon is a bounded stopping time.

Modules: :mod:`~stopbsde.paths` (grids, seeded Brownian ensembles, stopping
times), :mod:`~stopbsde.timechange` (``phi = t / tau`` and transported
processes), :mod:`~stopbsde.bsde` (problems and the unit-horizon transform),
:mod:`~stopbsde.solvers` (regression solver, linear formula, Cole-Hopf
oracle), :mod:`~stopbsde.girsanov` (measure solutions) and
:mod:`~stopbsde.cli` (scenario runner).
"""

__version__ = "0.1.0"

from .errors import DegenerateHorizon, InvalidArgument, NumericalError, OutOfRange  # noqa: E402

__all__ = ["__version__", "InvalidArgument", "DegenerateHorizon", "OutOfRange", "NumericalError"]
