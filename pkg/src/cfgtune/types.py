"""Shared value types and the 2-D guidance-scale search space.

Everything here is a frozen dataclass: safe to copy, hash and hand across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class ValidationError(ValueError):
    """Raised when a value violates a documented precondition."""


@dataclass(frozen=True, order=True)
class GuidanceScales:
    """A point in guidance space: image-CFG weight and text-CFG weight."""

    s_image: float
    s_text: float

    def __post_init__(self):
        if not (math.isfinite(self.s_image) and math.isfinite(self.s_text)):
            raise ValidationError(f"non-finite guidance scales {self!r}")

    def as_tuple(self) -> tuple[float, float]:
        return (self.s_image, self.s_text)


@dataclass(frozen=True)
class Bounds:
    """Closed box ``[image_min, image_max] x [text_min, text_max]``."""

    image_min: float = 0.5
    image_max: float = 2.5
    text_min: float = 1.0
    text_max: float = 10.0

    def __post_init__(self):
        vals = (self.image_min, self.image_max, self.text_min, self.text_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite bounds {vals}")
        if not self.image_min < self.image_max:
            raise ValidationError(f"image_min {self.image_min} must be < image_max {self.image_max}")
        if not self.text_min < self.text_max:
            raise ValidationError(f"text_min {self.text_min} must be < text_max {self.text_max}")

    @property
    def lower(self) -> tuple[float, float]:
        return (self.image_min, self.text_min)

    @property
    def upper(self) -> tuple[float, float]:
        return (self.image_max, self.text_max)

    @property
    def spans(self) -> tuple[float, float]:
        return (self.image_max - self.image_min, self.text_max - self.text_min)

    @property
    def center(self) -> GuidanceScales:
        return GuidanceScales(
            0.5 * (self.image_min + self.image_max), 0.5 * (self.text_min + self.text_max)
        )

    def contains(self, s: GuidanceScales) -> bool:
        return (
            self.image_min <= s.s_image <= self.image_max
            and self.text_min <= s.s_text <= self.text_max
        )

    def point(self, s_image: float, s_text: float) -> GuidanceScales:
        """Build a GuidanceScales, rejecting it if it falls outside the box."""
        s = GuidanceScales(float(s_image), float(s_text))
        if not self.contains(s):
            raise ValidationError(f"{s} outside bounds {self}")
        return s

    @classmethod
    def parse(cls, text: str) -> Bounds:
        """Parse ``"i_min,i_max,t_min,t_max"``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise ValidationError(f"bounds need 4 comma-separated numbers, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"unparseable bounds {text!r}") from exc


def normalize_score(raw: int) -> float:
    """Map a 0-100 judge score onto [0, 1]."""
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ValidationError(f"raw score must be an integer, got {raw!r}")
    if not 0 <= raw <= 100:
        raise ValidationError(f"raw score {raw} outside [0, 100]")
    return raw / 100


def clamp_to_bounds(s: GuidanceScales, b: Bounds) -> GuidanceScales:
    return GuidanceScales(
        min(max(s.s_image, b.image_min), b.image_max),
        min(max(s.s_text, b.text_min), b.text_max),
    )


@dataclass(frozen=True)
class Observation:
    """One evaluated point of the objective.

    ``raw_score`` is the judge's integer score when the objective came from
    the LLM judge; synthetic objectives leave it ``None`` and supply ``score``
    directly.
    """

    scales: GuidanceScales
    score: float
    iteration: int
    raw_score: int | None = None
    explanation: str = ""
    image_ref: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.raw_score is not None and self.score != normalize_score(self.raw_score):
            raise ValidationError(
                f"score {self.score} != raw_score/100 for raw_score {self.raw_score}"
            )
        if self.iteration < 0:
            raise ValidationError(f"negative iteration {self.iteration}")


@dataclass(frozen=True)
class ConvergencePolicy:
    score_threshold: float = 0.90
    patience: int = 5
    min_improvement: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValidationError(f"score_threshold {self.score_threshold} outside [0, 1]")
        if self.patience < 1:
            raise ValidationError(f"patience must be positive, got {self.patience}")
        if self.min_improvement < 0:
            raise ValidationError(f"min_improvement must be >= 0, got {self.min_improvement}")


@dataclass(frozen=True)
class RunConfig:
    """Optimizer configuration. Defaults give the 5 + 20 evaluation budget."""

    bounds: Bounds = field(default_factory=Bounds)
    n_init: int = 5
    max_iterations: int = 20
    convergence: ConvergencePolicy = field(default_factory=ConvergencePolicy)
    xi: float = 0.01
    seed: int = 0
    prompt_refinement_rounds: int = 0
    noise_variance: float = 1e-4
    grid_per_axis: int = 64
    refine_steps: int = 20
    hyperparam_restarts: int = 3

    def __post_init__(self):
        if self.n_init < 1:
            raise ValidationError(f"n_init must be >= 1, got {self.n_init}")
        if self.max_iterations < 1:
            raise ValidationError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.convergence.patience > self.max_iterations:
            raise ValidationError(
                f"patience {self.convergence.patience} exceeds max_iterations {self.max_iterations}"
            )
        if not math.isfinite(self.xi) or self.xi < 0:
            raise ValidationError(f"xi must be a non-negative real, got {self.xi}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed {self.seed} is not a 64-bit unsigned integer")
        if self.prompt_refinement_rounds < 0:
            raise ValidationError("prompt_refinement_rounds must be >= 0")
        if self.noise_variance < 0:
            raise ValidationError("noise_variance must be >= 0")
        if self.grid_per_axis < 2:
            raise ValidationError("grid_per_axis must be >= 2")
        if self.refine_steps < 0:
            raise ValidationError("refine_steps must be >= 0")
