"""Numerical toolkit for the renormalisation-group analysis of the
4-dimensional continuous-time weakly self-avoiding walk."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    cov_decomp,
    grassmann,
    lattice_green,
    rg_flow,
    susceptibility,
    walk_mc,
)
