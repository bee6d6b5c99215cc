"""Background-field toolkit for block-spin lattice models.

Multiscale lattices, kernel operators and norms, a certified fixed-point
solver, and the background, variation and critical field maps built on them.
"""

__version__ = "0.1.0"

from .lattice import ConfigError, Lattice, LatticeParams, make_lattice  # noqa: F401
from .field import Field  # noqa: F401
