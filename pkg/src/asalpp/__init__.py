"""Open-ended search over Lenia simulations with evolving text targets."""

from .config import LeniaConfig, RunConfig, TreeConfig
from .search import Providers, run_asal, run_asalpp
from .tree import grow_tree

__version__ = "0.1.0"

__all__ = ["LeniaConfig", "RunConfig", "TreeConfig", "Providers", "run_asal", "run_asalpp",
           "grow_tree", "__version__"]
