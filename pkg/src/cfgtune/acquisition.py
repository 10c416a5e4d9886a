"""Expected Improvement and its maximization over the guidance box."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .gp import GpModel
from .types import Bounds, GuidanceScales, ValidationError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class AcquisitionQuery:
    model: GpModel
    incumbent: float
    xi: float = 0.01

    def __post_init__(self):
        if not math.isfinite(self.incumbent):
            raise ValidationError(f"incumbent must be finite, got {self.incumbent}")
        if self.xi < 0:
            raise ValidationError(f"xi must be >= 0, got {self.xi}")


@dataclass(frozen=True)
class Suggestion:
    scales: GuidanceScales
    ei: float
    random_fallback: bool = False


def expected_improvement_array(mean, std, incumbent: float, xi: float) -> np.ndarray:
    """Vectorized EI: ``E[max(0, f - incumbent - xi)]`` for ``f ~ N(mean, std^2)``."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise ValidationError("std must be >= 0")
    gap = mean - incumbent - xi
    out = np.maximum(gap, 0.0)
    pos = std > 0
    if np.any(pos):
        g, s = np.broadcast_arrays(gap, std)
        g, s = g[pos], s[pos]
        with np.errstate(over="ignore"):
            z = g / s
            ei = g * ndtr(z) + s * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        out = np.array(out, copy=True)
        out[pos] = np.maximum(ei, 0.0)
    return out


def expected_improvement(mean: float, std: float, incumbent: float, xi: float = 0.0) -> float:
    return float(expected_improvement_array(mean, std, incumbent, xi))


def ei_surface(q: AcquisitionQuery, x: np.ndarray) -> np.ndarray:
    mean, var = q.model.predict_many(x)
    return expected_improvement_array(mean, np.sqrt(var), q.incumbent, q.xi)


def _lexi_best(x: np.ndarray, values: np.ndarray) -> int:
    best = values.max()
    idx = np.flatnonzero(values == best)
    # ties: smallest (s_image, s_text)
    order = np.lexsort((x[idx, 1], x[idx, 0]))
    return int(idx[order[0]])


def maximize_acquisition(
    q: AcquisitionQuery,
    bounds: Bounds,
    grid_per_axis: int = 64,
    refine_steps: int = 20,
    rng_seed: int = 0,
    n_starts: int = 5,
) -> Suggestion:
    """Lattice search followed by step-halving coordinate search.

    A flat lattice (EI identical everywhere, including identically zero)
    carries no information; in that case a seeded uniform point is returned
    with ``random_fallback`` set.
    """
    if grid_per_axis < 2:
        raise ValidationError("grid_per_axis must be >= 2")
    if refine_steps < 0 or n_starts < 1:
        raise ValidationError("refine_steps must be >= 0 and n_starts >= 1")

    gi = np.linspace(bounds.image_min, bounds.image_max, grid_per_axis)
    gt = np.linspace(bounds.text_min, bounds.text_max, grid_per_axis)
    mesh = np.stack(np.meshgrid(gi, gt, indexing="ij"), axis=-1).reshape(-1, 2)
    values = ei_surface(q, mesh)

    if values.max() - values.min() <= 0.0:
        rng = np.random.default_rng(rng_seed)
        u = rng.uniform(bounds.lower, bounds.upper)
        s = GuidanceScales(float(u[0]), float(u[1]))
        return Suggestion(s, float(ei_surface(q, u[None, :])[0]), random_fallback=True)

    # refine from the best few lattice points at once; a single start can
    # settle on the wrong end of a flat ridge
    starts = np.lexsort((mesh[:, 1], mesh[:, 0], -values))[:n_starts]
    lo, hi = np.array(bounds.lower), np.array(bounds.upper)
    cell = (hi - lo) / (grid_per_axis - 1)
    x, v = _coordinate_search(q, mesh[starts].copy(), values[starts].copy(), cell, lo, hi, refine_steps)
    i = _lexi_best(x, v)
    return Suggestion(GuidanceScales(float(x[i, 0]), float(x[i, 1])), float(v[i]))


def _coordinate_search(q, x, v, cell, lo, hi, n_steps):
    """Greedy axis moves for a batch of starting points.

    Each start keeps its own step per axis, halved when neither direction
    along that axis improves, so a flat axis does not starve a sloped one.
    Moves only happen on strict improvement; between equal candidates the
    lower coordinate wins.
    """
    k = len(x)
    step = np.tile(cell, (k, 1))
    for _ in range(n_steps):
        for d in range(2):
            up, down = x.copy(), x.copy()
            up[:, d] = np.minimum(x[:, d] + step[:, d], hi[d])
            down[:, d] = np.maximum(x[:, d] - step[:, d], lo[d])
            vals = ei_surface(q, np.vstack([up, down]))
            v_up, v_down = vals[:k], vals[k:]
            take_down = v_down >= v_up
            cand = np.where(take_down[:, None], down, up)
            cand_v = np.where(take_down, v_down, v_up)
            better = cand_v > v
            x[better], v[better] = cand[better], cand_v[better]
            step[~better, d] /= 2
    return x, v
