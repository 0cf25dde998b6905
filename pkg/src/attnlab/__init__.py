"""Token-priority graphs, graph SVMs, and attention convergence diagnostics."""

__version__ = "0.1.0"

from . import analysis, attention, dataset, errors, experiments, graph, svm  # noqa: F401
