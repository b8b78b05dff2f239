"""Multi-label sparse component decomposition of trial-structured time series."""

from .errors import (
    FormatVersionError,
    MilcciError,
    NumericError,
    ParameterError,
    SchemaError,
    StorageError,
)
from .fitting import FitReport, fit
from .graph import SimilarityGraph, build_graph, build_graphs
from .model import (
    CategorySpec,
    Hyperparams,
    Label,
    ModelState,
    TraceSolverParams,
    Trial,
    TrialSet,
)

__version__ = "0.1.0"

__all__ = [
    "CategorySpec",
    "FitReport",
    "FormatVersionError",
    "Hyperparams",
    "Label",
    "MilcciError",
    "ModelState",
    "NumericError",
    "ParameterError",
    "SchemaError",
    "SimilarityGraph",
    "StorageError",
    "TraceSolverParams",
    "Trial",
    "TrialSet",
    "build_graph",
    "build_graphs",
    "fit",
]
