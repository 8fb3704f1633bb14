"""Self-adjusting federated learning simulator over a small numpy autodiff core."""

__version__ = "0.1.0"
