"""Sequential Bayesian optimization over guidance scales.

The loop: evaluate a Latin-hypercube initial design, then repeatedly fit the
GP, maximize Expected Improvement, evaluate the suggested point and append
it, until a stopping rule fires.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Union

import numpy as np

from . import gp
from .acquisition import AcquisitionQuery, maximize_acquisition
from .gp import KernelParams, Smoothness
from .types import Bounds, GuidanceScales, Observation, RunConfig, ValidationError

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_FAILURES = 3
REFIT_EVERY_OBS_LIMIT = 15
REFIT_PERIOD = 3
PRIOR_MEAN = 0.5


class ObjectiveError(RuntimeError):
    """Raised by an objective callback when one evaluation failed."""


class StopReason(str, Enum):
    max_iterations = "max_iterations"
    score_threshold = "score_threshold"
    patience_exhausted = "patience_exhausted"
    evaluator_failure = "evaluator_failure"


@dataclass(frozen=True)
class ObjectiveResult:
    """What an objective returns when it has more to say than a bare score."""

    score: float
    raw_score: int | None = None
    explanation: str = ""
    image_ref: str | None = None


Objective = Callable[[GuidanceScales], Union[float, ObjectiveResult]]
ProgressCallback = Callable[[int, GuidanceScales, Observation], None]


@dataclass
class OptimizationState:
    config: RunConfig
    observations: list[Observation] = field(default_factory=list)
    incumbent: Observation | None = None
    iteration: int = 0
    stop_reason: StopReason | None = None
    last_error: BaseException | None = None
    random_fallbacks: int = 0
    kernel_params: KernelParams | None = None

    def append(self, obs: Observation) -> None:
        if self.observations and obs.iteration <= self.observations[-1].iteration:
            raise ValidationError("observation iterations must strictly increase")
        self.observations.append(obs)
        # ties keep the earlier observation
        if self.incumbent is None or obs.score > self.incumbent.score:
            self.incumbent = obs


def initial_design(bounds: Bounds, n_init: int, seed: int) -> list[GuidanceScales]:
    """Latin-hypercube sample: each axis is cut into ``n_init`` strata, each used once."""
    if n_init < 1:
        raise ValidationError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    unit = np.empty((n_init, 2))
    for d in range(2):
        unit[:, d] = (rng.permutation(n_init) + rng.uniform(size=n_init)) / n_init
    lo, span = np.array(bounds.lower), np.array(bounds.spans)
    pts = lo + unit * span
    return [GuidanceScales(float(a), float(b)) for a, b in pts]


def default_kernel(bounds: Bounds, noise_variance: float) -> KernelParams:
    si, st = bounds.spans
    return KernelParams(
        signal_variance=0.1,
        lengthscale_image=0.25 * si,
        lengthscale_text=0.25 * st,
        noise_variance=noise_variance,
        smoothness=Smoothness.five_halves,
    )


def _to_observation(result, scales: GuidanceScales, iteration: int) -> Observation:
    if isinstance(result, ObjectiveResult):
        return Observation(
            scales=scales,
            score=float(result.score),
            iteration=iteration,
            raw_score=result.raw_score,
            explanation=result.explanation,
            image_ref=result.image_ref,
        )
    return Observation(scales=scales, score=float(result), iteration=iteration)


def _evaluate(objective: Objective, s: GuidanceScales, iteration: int, state: OptimizationState):
    """Call the objective, retrying the same point; ``None`` after too many failures."""
    for attempt in range(1, MAX_CONSECUTIVE_FAILURES + 1):
        try:
            return _to_observation(objective(s), s, iteration)
        except ObjectiveError as exc:
            state.last_error = exc
            log.warning("objective failed at %s (attempt %d): %s", s, attempt, exc)
    return None


def _training_set(state: OptimizationState) -> tuple[np.ndarray, np.ndarray]:
    x = gp.as_array([o.scales for o in state.observations])
    y = np.array([o.score for o in state.observations])
    if state.config.noise_variance == 0:
        x, y = gp.merge_duplicates(x, y)
    return x, y


def _should_refit(n_obs: int, bo_iteration: int) -> bool:
    return n_obs <= REFIT_EVERY_OBS_LIMIT or bo_iteration % REFIT_PERIOD == 0


def run(
    config: RunConfig,
    objective: Objective,
    on_step: ProgressCallback | None = None,
) -> OptimizationState:
    """Run the loop and return the final state (never raises on objective errors)."""
    state = OptimizationState(config=config)
    bounds = config.bounds
    policy = config.convergence
    params = default_kernel(bounds, config.noise_variance)
    # distinct streams for design, hyperparameter restarts and fallbacks
    seeds = np.random.SeedSequence(config.seed).generate_state(3, dtype=np.uint64)
    design_seed, hyper_seed, acq_seed = (int(v) for v in seeds)

    def record(s: GuidanceScales) -> bool:
        obs = _evaluate(objective, s, state.iteration, state)
        if obs is None:
            state.stop_reason = StopReason.evaluator_failure
            return False
        state.append(obs)
        state.iteration += 1
        if on_step is not None:
            on_step(obs.iteration, s, obs)
        return True

    for s in initial_design(bounds, config.n_init, design_seed):
        if not record(s):
            return state
    if state.incumbent.score >= policy.score_threshold:
        state.stop_reason = StopReason.score_threshold
        return state

    stale = 0
    for k in range(config.max_iterations):
        x, y = _training_set(state)
        if len(x) >= 2 and _should_refit(len(state.observations), k):
            params = gp.optimize_hyperparams_arrays(
                x, y, params, config.hyperparam_restarts, hyper_seed + k,
                prior_mean=PRIOR_MEAN, bounds=bounds,
                optimize_noise=config.noise_variance > 0,
            )
        state.kernel_params = params
        model = gp.fit_arrays(x, y, params, PRIOR_MEAN)
        before = state.incumbent.score
        sugg = maximize_acquisition(
            AcquisitionQuery(model, before, config.xi), bounds,
            config.grid_per_axis, config.refine_steps, acq_seed + k,
        )
        if sugg.random_fallback:
            state.random_fallbacks += 1
            log.info("flat acquisition surface at iteration %d; exploring at random", k)
        if not record(sugg.scales):
            return state

        if state.incumbent.score >= policy.score_threshold:
            state.stop_reason = StopReason.score_threshold
            return state
        stale = stale + 1 if state.incumbent.score - before < policy.min_improvement else 0
        if stale >= policy.patience:
            state.stop_reason = StopReason.patience_exhausted
            return state
    state.stop_reason = StopReason.max_iterations
    return state


def random_search(config: RunConfig, objective: Objective) -> OptimizationState:
    """Uniform random search with the same evaluation budget as :func:`run`."""
    state = OptimizationState(config=config)
    rng = np.random.default_rng(config.seed)
    b = config.bounds
    for i in range(config.n_init + config.max_iterations):
        u = rng.uniform(b.lower, b.upper)
        s = GuidanceScales(float(u[0]), float(u[1]))
        obs = _evaluate(objective, s, i, state)
        if obs is None:
            state.stop_reason = StopReason.evaluator_failure
            return state
        state.append(obs)
        state.iteration += 1
    state.stop_reason = StopReason.max_iterations
    return state
