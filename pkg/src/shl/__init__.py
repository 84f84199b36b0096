"""shl: a numerical laboratory for higher-order stochastic homogenization.

Synthesizes stationary Gaussian coefficient fields on a torus, computes the
periodized corrector hierarchy and higher-order effective tensors, assembles
homogenized proxy solutions and two-scale expansions, and runs Monte-Carlo
convergence-rate experiments.
"""

from shl.grid import Field, TorusGrid, make_grid

__all__ = ["TorusGrid", "Field", "make_grid"]
__version__ = "0.1.0"
