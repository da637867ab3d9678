"""Margin-based preference-optimization losses, adaptive margins, and a toy policy lab."""

__version__ = "0.1.0"

from .core import BatchStats, PreferenceInstance, ScoredInstance, batch_stats, log_sigmoid, perplexity, sigmoid
from .errors import DivergenceError, GradCheckError, ParseError, PrefMarginError, ValidationError
from .methods import METHOD_NAMES, MethodConfig, MethodSpec, evaluate_batch, registry_lookup, unified_grad, unified_loss

__all__ = [
    "BatchStats",
    "DivergenceError",
    "GradCheckError",
    "METHOD_NAMES",
    "MethodConfig",
    "MethodSpec",
    "ParseError",
    "PreferenceInstance",
    "PrefMarginError",
    "ScoredInstance",
    "ValidationError",
    "batch_stats",
    "evaluate_batch",
    "log_sigmoid",
    "perplexity",
    "registry_lookup",
    "sigmoid",
    "unified_grad",
    "unified_loss",
]
