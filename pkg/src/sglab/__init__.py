"""Simulation lab for lattice Gaussian free fields and sine-Gordon fields on the unit torus."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .lattice import TorusLattice, ball, laplacian_multiplier, torus_distance  # noqa: E402
from .sinegordon import SGParams  # noqa: E402

__all__ = ["TorusLattice", "SGParams", "ball", "laplacian_multiplier", "torus_distance", "__version__"]
