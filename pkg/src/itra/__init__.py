"""Mini-batch feature-distribution matching for SGD training, with baselines and diagnostics."""
from .kernels import KernelSpec, mmd
from .losses import METHODS, total_objective
from .trainer import MetricsRecord, RunConfig, train

__all__ = ["KernelSpec", "METHODS", "MetricsRecord", "RunConfig", "mmd", "total_objective", "train"]
__version__ = "0.1.0"
