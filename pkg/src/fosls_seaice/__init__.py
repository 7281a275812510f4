"""First-order system least-squares finite elements for viscous-plastic sea-ice dynamics."""

from .constitutive import PhysParams
from .driver import load_config, run, setup
from .mesh import Mesh, build_structured
from .scenario import BenchmarkConfig

__all__ = ["BenchmarkConfig", "Mesh", "PhysParams", "build_structured", "load_config", "run", "setup"]
__version__ = "0.1.0"
