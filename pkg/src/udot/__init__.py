"""Semi-discrete-free solver for optimal transport from a planar region to an interval."""

from udot import errors
from udot.surplus import SurplusModel, get_surplus, available_surpluses

__all__ = ["errors", "SurplusModel", "get_surplus", "available_surpluses"]
__version__ = "0.1.0"
