"""Multi-scale boosted dehazing network with dense feature fusion, on a numpy autodiff core."""

__version__ = "0.1.0"
