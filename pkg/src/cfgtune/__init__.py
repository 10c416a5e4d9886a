"""Bayesian optimization of dual classifier-free-guidance scales for image editing,
scored by a multimodal LLM judge."""

__version__ = "0.1.0"

from .types import (  # noqa: E402
    Bounds,
    ConvergencePolicy,
    GuidanceScales,
    Observation,
    RunConfig,
    ValidationError,
    clamp_to_bounds,
    normalize_score,
)

__all__ = [
    "Bounds",
    "ConvergencePolicy",
    "GuidanceScales",
    "Observation",
    "RunConfig",
    "ValidationError",
    "clamp_to_bounds",
    "normalize_score",
]
