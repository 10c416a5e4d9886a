"""Gaussian-process regression over guidance scales with a Matern kernel.

Inputs stay in raw guidance units; the kernel is anisotropic with one
lengthscale per axis. Targets are normalized scores and the prior mean is a
constant.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .types import Bounds, GuidanceScales, Observation, ValidationError

log = logging.getLogger(__name__)

JITTER_SCHEDULE = (1e-10, 1e-8, 1e-6)


class SingularKernelError(RuntimeError):
    """The Gram matrix could not be factorized even after jitter escalation."""


class Smoothness(str, Enum):
    half = "half"
    three_halves = "three_halves"
    five_halves = "five_halves"


@dataclass(frozen=True)
class KernelParams:
    signal_variance: float = 1.0
    lengthscale_image: float = 1.0
    lengthscale_text: float = 1.0
    noise_variance: float = 0.0
    smoothness: Smoothness = Smoothness.five_halves

    def __post_init__(self):
        if not self.signal_variance > 0:
            raise ValidationError(f"signal_variance must be > 0, got {self.signal_variance}")
        if not (self.lengthscale_image > 0 and self.lengthscale_text > 0):
            raise ValidationError("lengthscales must be > 0")
        if not self.noise_variance >= 0:
            raise ValidationError(f"noise_variance must be >= 0, got {self.noise_variance}")
        object.__setattr__(self, "smoothness", Smoothness(self.smoothness))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.array([self.lengthscale_image, self.lengthscale_text])


def _matern_from_r(r: np.ndarray, nu: Smoothness) -> np.ndarray:
    if nu is Smoothness.half:
        return np.exp(-r)
    if nu is Smoothness.three_halves:
        a = math.sqrt(3.0) * r
        return (1.0 + a) * np.exp(-a)
    a = math.sqrt(5.0) * r
    return (1.0 + a + a * a / 3.0) * np.exp(-a)


def scaled_distance(xa: np.ndarray, xb: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise anisotropic distances between rows of ``xa`` and ``xb``."""
    d = (xa[:, None, :] - xb[None, :, :]) / lengthscales
    return np.sqrt(np.sum(d * d, axis=-1))


def kernel_matrix(xa: np.ndarray, xb: np.ndarray, p: KernelParams) -> np.ndarray:
    r = scaled_distance(np.atleast_2d(xa), np.atleast_2d(xb), p.lengthscales)
    return p.signal_variance * _matern_from_r(r, p.smoothness)


def matern_kernel(a: GuidanceScales, b: GuidanceScales, p: KernelParams) -> float:
    r = math.hypot(
        (a.s_image - b.s_image) / p.lengthscale_image, (a.s_text - b.s_text) / p.lengthscale_text
    )
    return float(p.signal_variance * _matern_from_r(np.asarray(r), p.smoothness))


def as_array(points: Sequence[GuidanceScales]) -> np.ndarray:
    return np.array([[s.s_image, s.s_text] for s in points], dtype=float).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class GpModel:
    """A fitted posterior. Immutable; share freely across threads."""

    params: KernelParams
    prior_mean: float
    train_inputs: tuple[GuidanceScales, ...]
    train_targets: np.ndarray
    chol_factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @classmethod
    def empty(cls, params: KernelParams, prior_mean: float = 0.5) -> GpModel:
        return cls(params, prior_mean, (), np.zeros(0), np.zeros((0, 0)), np.zeros(0))

    @property
    def n_train(self) -> int:
        return len(self.train_inputs)

    def predict_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each row of an ``(n, 2)`` array."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.params
        if self.n_train == 0:
            return np.full(len(x), self.prior_mean), np.full(len(x), p.signal_variance)
        k_star = kernel_matrix(x, as_array(self.train_inputs), p)
        mean = self.prior_mean + k_star @ self.alpha
        v = solve_triangular(self.chol_factor, k_star.T, lower=True, check_finite=False)
        var = p.signal_variance - np.sum(v * v, axis=0)
        if np.any(var < -1e-9):
            warnings.warn(
                f"posterior variance numerically negative (min {var.min():.3e}); clamped to 0",
                RuntimeWarning,
                stacklevel=2,
            )
        return mean, np.maximum(var, 0.0)


def predict(m: GpModel, s: GuidanceScales) -> tuple[float, float]:
    mean, var = m.predict_many(np.array([[s.s_image, s.s_text]]))
    return float(mean[0]), float(var[0])


def _factorize(x: np.ndarray, p: KernelParams) -> tuple[np.ndarray, float]:
    gram = kernel_matrix(x, x, p)
    n = len(x)
    for jitter in JITTER_SCHEDULE:
        try:
            chol = np.linalg.cholesky(gram + (p.noise_variance + jitter) * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        return chol, jitter
    raise SingularKernelError(
        f"Cholesky failed for {n} points after jitter up to {JITTER_SCHEDULE[-1]:g}"
    )


def fit_arrays(x: np.ndarray, y: np.ndarray, p: KernelParams, prior_mean: float = 0.5) -> GpModel:
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float).ravel()
    if len(x) == 0:
        raise ValidationError("cannot fit a GP to zero observations")
    if len(x) != len(y):
        raise ValidationError(f"{len(x)} inputs but {len(y)} targets")
    if p.noise_variance == 0 and len(np.unique(x, axis=0)) < len(x):
        raise SingularKernelError("duplicate inputs with zero noise_variance")
    chol, jitter = _factorize(x, p)
    alpha = cho_solve((chol, True), y - prior_mean, check_finite=False)
    inputs = tuple(GuidanceScales(float(a), float(b)) for a, b in x)
    return GpModel(p, prior_mean, inputs, y.copy(), chol, alpha, jitter)


def fit(observations: Sequence[Observation], p: KernelParams, prior_mean: float = 0.5) -> GpModel:
    if not observations:
        raise ValidationError("cannot fit a GP to zero observations")
    x = as_array([o.scales for o in observations])
    y = np.array([o.score for o in observations], dtype=float)
    return fit_arrays(x, y, p, prior_mean)


def merge_duplicates(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse repeated inputs onto one row carrying the mean target."""
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    sums = np.zeros(len(uniq))
    np.add.at(sums, inverse, y)
    return uniq, sums / np.bincount(inverse)


def log_marginal_likelihood(x: np.ndarray, y: np.ndarray, p: KernelParams, prior_mean: float) -> float:
    try:
        chol, _ = _factorize(x, p)
    except SingularKernelError:
        return -math.inf
    resid = y - prior_mean
    alpha = cho_solve((chol, True), resid, check_finite=False)
    return float(
        -0.5 * resid @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(x) * math.log(2 * math.pi)
    )


def _radial_lengthscale_factor(r: np.ndarray, nu: Smoothness) -> np.ndarray:
    """``g(r)`` with ``dk/dlog(l_d) = signal * g(r) * (delta_d / l_d)**2``."""
    if nu is Smoothness.half:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(r > 0, np.exp(-r) / np.where(r > 0, r, 1.0), 0.0)
    if nu is Smoothness.three_halves:
        return 3.0 * np.exp(-math.sqrt(3.0) * r)
    a = math.sqrt(5.0) * r
    return (5.0 / 3.0) * (1.0 + a) * np.exp(-a)


def lml_and_grad(
    x: np.ndarray, y: np.ndarray, p: KernelParams, prior_mean: float, with_noise: bool = True
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in log-parameter space.

    Gradient order: log signal, log lengthscale_image, log lengthscale_text,
    then log noise when ``with_noise``.
    """
    chol, _ = _factorize(x, p)
    resid = y - prior_mean
    alpha = cho_solve((chol, True), resid, check_finite=False)
    lml = float(-0.5 * resid @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(x) * math.log(2 * math.pi))

    delta2 = ((x[:, None, :] - x[None, :, :]) / p.lengthscales) ** 2
    r = np.sqrt(delta2.sum(axis=-1))
    k_signal = p.signal_variance * _matern_from_r(r, p.smoothness)
    g = p.signal_variance * _radial_lengthscale_factor(r, p.smoothness)
    derivs = [k_signal, g * delta2[..., 0], g * delta2[..., 1]]
    if with_noise:
        derivs.append(p.noise_variance * np.eye(len(x)))
    # d lml = 0.5 * tr((alpha alpha^T - K^-1) dK)
    inner = np.outer(alpha, alpha) - cho_solve((chol, True), np.eye(len(x)), check_finite=False)
    grad = np.array([0.5 * np.sum(inner * dk) for dk in derivs])
    return lml, grad


# search box for hyperparameters, in log space
_SIGNAL_RANGE = (1e-3, 10.0)
_NOISE_RANGE = (1e-8, 0.5)
_LENGTHSCALE_FACTOR = (0.02, 1.0)


def _lengthscale_ranges(x: np.ndarray, bounds: Bounds | None) -> list[tuple[float, float]]:
    if bounds is not None:
        spans = bounds.spans
    else:
        spans = tuple(float(v) if v > 0 else 1.0 for v in np.ptp(x, axis=0))
    lo, hi = _LENGTHSCALE_FACTOR
    return [(lo * s, hi * s) for s in spans]


def optimize_hyperparams(
    observations: Sequence[Observation],
    init: KernelParams,
    restarts: int = 3,
    rng_seed: int = 0,
    *,
    prior_mean: float = 0.5,
    bounds: Bounds | None = None,
    optimize_noise: bool = True,
) -> KernelParams:
    """Multi-start L-BFGS-B on the log marginal likelihood.

    The first start is ``init`` itself, so the result is never worse than
    ``init``. Extra starts are drawn log-uniformly inside the search box.
    Lengthscale ranges scale with ``bounds`` when given, otherwise with the
    spread of the observed inputs.
    """
    if len(observations) < 2:
        raise ValidationError("hyperparameter search needs at least 2 observations")
    x = as_array([o.scales for o in observations])
    y = np.array([o.score for o in observations], dtype=float)
    return optimize_hyperparams_arrays(
        x, y, init, restarts, rng_seed,
        prior_mean=prior_mean, bounds=bounds, optimize_noise=optimize_noise,
    )


def optimize_hyperparams_arrays(
    x: np.ndarray,
    y: np.ndarray,
    init: KernelParams,
    restarts: int = 3,
    rng_seed: int = 0,
    *,
    prior_mean: float = 0.5,
    bounds: Bounds | None = None,
    optimize_noise: bool = True,
) -> KernelParams:
    if len(x) < 2:
        raise ValidationError("hyperparameter search needs at least 2 observations")
    if restarts < 1:
        raise ValidationError("restarts must be positive")
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float).ravel()
    if init.noise_variance == 0:
        x, y = merge_duplicates(x, y)

    ls_ranges = _lengthscale_ranges(x, bounds)
    box = [_SIGNAL_RANGE, *ls_ranges]
    if optimize_noise:
        box.append(_NOISE_RANGE)
    log_box = np.log(np.array(box))

    def unpack(theta: np.ndarray) -> KernelParams:
        v = np.exp(theta)
        noise = float(v[3]) if optimize_noise else init.noise_variance
        return replace(
            init,
            signal_variance=float(v[0]),
            lengthscale_image=float(v[1]),
            lengthscale_text=float(v[2]),
            noise_variance=noise,
        )

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            lml, grad = lml_and_grad(x, y, unpack(theta), prior_mean, optimize_noise)
        except SingularKernelError:
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    init_vec = [init.signal_variance, init.lengthscale_image, init.lengthscale_text]
    if optimize_noise:
        init_vec.append(max(init.noise_variance, _NOISE_RANGE[0]))
    theta0 = np.clip(np.log(np.array(init_vec)), log_box[:, 0], log_box[:, 1])

    rng = np.random.default_rng(rng_seed)
    starts = [theta0] + [rng.uniform(log_box[:, 0], log_box[:, 1]) for _ in range(restarts - 1)]

    best = init
    best_lml = log_marginal_likelihood(x, y, init, prior_mean)
    for start in starts:
        try:
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=log_box)
        except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - defensive
            log.debug("hyperparameter restart failed: %s", exc)
            continue
        cand = unpack(res.x)
        lml = log_marginal_likelihood(x, y, cand, prior_mean)
        if math.isfinite(lml) and (not math.isfinite(best_lml) or lml > best_lml):
            best, best_lml = cand, lml
    if not math.isfinite(best_lml):
        warnings.warn("no restart produced a finite likelihood; keeping init", RuntimeWarning)
        return init
    return best
