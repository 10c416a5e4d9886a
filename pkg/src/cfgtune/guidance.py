"""Dual classifier-free-guidance arithmetic and synthetic quality landscapes.

``combine_scores`` is the two-scale guidance combination used by
instruction-driven editing models::

    e = e(z, -, -) + s_image * (e(z, c_I, -) - e(z, -, -))
                   + s_text  * (e(z, c_I, c_T) - e(z, c_I, -))

The text correction is conditioned on the image (``c_I`` present in both
of its terms). ``toy_score_network`` is a fixed random-feature map that
stands in for the learned noise predictor so the combination can be
exercised end to end. ``SyntheticLandscape`` provides cheap deterministic
objectives over the guidance box for optimizer tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .types import Bounds, GuidanceScales, ValidationError

LATENT_DIM = 16
COND_DIM = 8
_HIDDEN = 32


def combine_scores(e_uncond, e_image, e_full, s: GuidanceScales) -> np.ndarray:
    e_uncond = np.asarray(e_uncond, dtype=float)
    e_image = np.asarray(e_image, dtype=float)
    e_full = np.asarray(e_full, dtype=float)
    if not (e_uncond.shape == e_image.shape == e_full.shape):
        raise ValidationError(
            f"shape mismatch: {e_uncond.shape}, {e_image.shape}, {e_full.shape}"
        )
    # e_u + s_I (e_I - e_u) + s_T (e_full - e_I), regrouped by input so that
    # s = (0, 0) and s = (1, 1) return e_u and e_full bit for bit
    return (1.0 - s.s_image) * e_uncond + (s.s_image - s.s_text) * e_image + s.s_text * e_full


@dataclass(frozen=True)
class LatentState:
    values: tuple[float, ...]
    timestep: int = 0

    def __post_init__(self):
        if len(self.values) != LATENT_DIM:
            raise ValidationError(f"latent must have {LATENT_DIM} entries")
        if not all(math.isfinite(v) for v in self.values):
            raise ValidationError("latent entries must be finite")
        if self.timestep < 0:
            raise ValidationError("timestep must be >= 0")


@dataclass(frozen=True)
class Conditioning:
    """Conditioning inputs; ``None`` stands for the unconditional input."""

    image_cond: tuple[float, ...] | None = None
    text_cond: tuple[float, ...] | None = None

    def __post_init__(self):
        for v in (self.image_cond, self.text_cond):
            if v is not None and len(v) != COND_DIM:
                raise ValidationError(f"conditioning vectors must have {COND_DIM} entries")


@dataclass(frozen=True, eq=False)
class _FeatureMap:
    w_z: np.ndarray
    w_img: np.ndarray
    w_txt: np.ndarray
    null_img: np.ndarray
    null_txt: np.ndarray
    w_t: np.ndarray
    bias: np.ndarray
    w_out: np.ndarray


@lru_cache(maxsize=16)
def _feature_map(seed: int) -> _FeatureMap:
    rng = np.random.default_rng(seed)
    return _FeatureMap(
        w_z=rng.normal(0, 1 / math.sqrt(LATENT_DIM), (_HIDDEN, LATENT_DIM)),
        w_img=rng.normal(0, 1 / math.sqrt(COND_DIM), (_HIDDEN, COND_DIM)),
        w_txt=rng.normal(0, 1 / math.sqrt(COND_DIM), (_HIDDEN, COND_DIM)),
        null_img=rng.normal(0, 1, COND_DIM),
        null_txt=rng.normal(0, 1, COND_DIM),
        w_t=rng.normal(0, 1, _HIDDEN),
        bias=rng.normal(0, 0.1, _HIDDEN),
        w_out=rng.normal(0, 1 / math.sqrt(_HIDDEN), (LATENT_DIM, _HIDDEN)),
    )


def toy_score_network(z: LatentState, c: Conditioning, seed: int = 0) -> np.ndarray:
    """``w_out @ tanh(W_z z + W_I c_I + W_T c_T + w_t sin(t/1000) + b)``.

    An absent conditioning field is replaced by a fixed learned-style null
    embedding, so dropping either field changes the output.
    """
    fm = _feature_map(seed)
    ci = fm.null_img if c.image_cond is None else np.asarray(c.image_cond, dtype=float)
    ct = fm.null_txt if c.text_cond is None else np.asarray(c.text_cond, dtype=float)
    h = (
        fm.w_z @ np.asarray(z.values, dtype=float)
        + fm.w_img @ ci
        + fm.w_txt @ ct
        + fm.w_t * math.sin(z.timestep / 1000.0)
        + fm.bias
    )
    return fm.w_out @ np.tanh(h)


def toy_network_output_bound(seed: int = 0) -> float:
    """Upper bound on the output norm for any input.

    The hidden activations lie in ``[-1, 1]``, so the output norm is at most
    ``||w_out||_2 * sqrt(hidden)``.
    """
    fm = _feature_map(seed)
    return float(np.linalg.norm(fm.w_out, 2) * math.sqrt(_HIDDEN))


def guided_score(z: LatentState, c_image, c_text, s: GuidanceScales, seed: int = 0) -> np.ndarray:
    """Run the toy network three times and combine with guidance scales ``s``."""
    e_uncond = toy_score_network(z, Conditioning(None, None), seed)
    e_image = toy_score_network(z, Conditioning(c_image, None), seed)
    e_full = toy_score_network(z, Conditioning(c_image, c_text), seed)
    return combine_scores(e_uncond, e_image, e_full, s)


@dataclass(frozen=True)
class Bump:
    peak: GuidanceScales
    widths: tuple[float, float]
    value: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        d = (x - np.array(self.peak.as_tuple())) / np.array(self.widths)
        return self.value * np.exp(-0.5 * np.sum(d * d, axis=-1))


@dataclass(frozen=True)
class SyntheticLandscape:
    """Sum of axis-aligned Gaussian bumps over a floor, clipped to [0, 1]."""

    peak: GuidanceScales
    widths: tuple[float, float]
    peak_value: float
    floor: float = 0.0
    distractors: tuple[Bump, ...] = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self):
        if not all(w > 0 for w in self.widths):
            raise ValidationError("widths must be positive")
        if not 0 < self.peak_value <= 1:
            raise ValidationError("peak_value must lie in (0, 1]")
        if not 0 <= self.floor < 1:
            raise ValidationError("floor must lie in [0, 1)")
        if not self.peak_value > self.floor:
            raise ValidationError("peak_value must exceed floor")

    @property
    def bumps(self) -> tuple[Bump, ...]:
        return (Bump(self.peak, self.widths, self.peak_value), *self.distractors)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = self.floor + sum(b(x) for b in self.bumps)
        return np.clip(total, 0.0, 1.0)

    def __call__(self, s: GuidanceScales) -> float:
        return synthetic_quality(s, self)


def synthetic_quality(s: GuidanceScales, land: SyntheticLandscape) -> float:
    return float(land.evaluate(np.array(s.as_tuple())))


def grid_maximum(land: SyntheticLandscape, bounds: Bounds, n: int = 1001) -> tuple[GuidanceScales, float]:
    """Dense-grid argmax of a landscape (test oracle, also used by scripts)."""
    gi = np.linspace(bounds.image_min, bounds.image_max, n)
    gt = np.linspace(bounds.text_min, bounds.text_max, n)
    vals = land.evaluate(np.stack(np.meshgrid(gi, gt, indexing="ij"), axis=-1))
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    return GuidanceScales(float(gi[i]), float(gt[j])), float(vals[i, j])


def landscape_fixtures() -> dict[str, SyntheticLandscape]:
    """The three pinned landscapes of the optimizer battery, over the default box."""
    return {
        "single_bump": SyntheticLandscape(
            peak=GuidanceScales(1.6, 6.5), widths=(0.4, 1.8), peak_value=0.85, floor=0.1,
            name="single_bump",
        ),
        "off_center_bump": SyntheticLandscape(
            peak=GuidanceScales(2.2, 2.4), widths=(0.3, 1.4), peak_value=0.8, floor=0.1,
            name="off_center_bump",
        ),
        "two_bump_with_distractor": SyntheticLandscape(
            peak=GuidanceScales(0.9, 7.8), widths=(0.3, 1.5), peak_value=0.8, floor=0.1,
            distractors=(Bump(GuidanceScales(2.0, 3.0), (0.4, 1.8), 0.5),),
            name="two_bump_with_distractor",
        ),
    }
