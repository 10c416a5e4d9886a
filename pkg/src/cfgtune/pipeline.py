"""End-to-end run: prompt generation, optimization rounds, artifacts and runlog."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from . import __version__
from .backend import DEFAULT_STEPS, BackendError, EditRequest, HttpBackend, MockBackend, image_size
from .costs import ConfigurationError, CostLedger, CostRates, Stage, default_rates, image_size_label, total_cost
from .evaluator import PromptError, evaluate, generate_edit_prompt, image_mime, refine_prompt
from .optimizer import ObjectiveError, ObjectiveResult, StopReason, run
from .providers import AnthropicStyleProvider, MockProvider, OpenAIStyleProvider, StatisticJudge
from .runlog import PROTOCOL_VERSION, SCHEMA_VERSION, RunRecord, write_runlog
from .types import Bounds, ConvergencePolicy, GuidanceScales, Observation, RunConfig, ValidationError

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_EVALUATOR, EXIT_BACKEND = 0, 1, 2, 3
PROVIDERS = ("openai-style", "anthropic-style", "mock")


class BackendFailure(ObjectiveError):
    """A backend error surfaced through the objective."""


@dataclass(frozen=True)
class Settings:
    run: RunConfig
    image: str
    instruction: str
    out_dir: str = "runs/latest"
    backend_url: str | None = None
    mock: bool = False
    llm_provider: str = "mock"
    llm_fixture: str | None = None
    llm_model: str | None = None
    rates: str | None = None
    steps: int = DEFAULT_STEPS
    mock_target: tuple[float, float] = (1.6, 6.0)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["mock_target"] = list(self.mock_target)
        return d


_DEFAULTS = {
    "out_dir": "runs/latest",
    "mock": False,
    "llm_provider": "mock",
    "steps": DEFAULT_STEPS,
    "mock_target": "1.6,6.0",
}


def _pair(value) -> tuple[float, float]:
    if isinstance(value, str):
        value = value.split(",")
    a, b = (float(v) for v in value)
    return (a, b)


def load_config(path: str | None = None, overrides: dict | None = None) -> Settings:
    """Merge defaults, then the JSON file at ``path``, then ``overrides``.

    File keys mirror the CLI flag names (dashes or underscores). ``None``
    values in ``overrides`` are treated as not given.
    """
    merged: dict = dict(_DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in data.items()})
    merged.update({k.replace("-", "_"): v for k, v in (overrides or {}).items() if v is not None})

    for key in ("image", "instruction"):
        if not merged.get(key):
            raise ConfigurationError(f"missing required setting: {key}")
    if merged["llm_provider"] not in PROVIDERS:
        raise ConfigurationError(f"unknown llm provider {merged['llm_provider']!r}")
    backend_url = merged.get("backend_url") or os.environ.get("BACKEND_URL")
    if not merged["mock"] and not backend_url:
        raise ConfigurationError("no backend: pass --backend-url, set BACKEND_URL or use --mock")

    try:
        bounds = merged.get("bounds", Bounds())
        if isinstance(bounds, str):
            bounds = Bounds.parse(bounds)
        elif isinstance(bounds, (list, tuple)):
            bounds = Bounds(*(float(v) for v in bounds))
        conv = ConvergencePolicy(
            score_threshold=float(merged.get("score_threshold", 0.90)),
            patience=int(merged.get("patience", 5)),
            min_improvement=float(merged.get("min_improvement", 0.01)),
        )
        cfg = RunConfig(
            bounds=bounds,
            n_init=int(merged.get("n_init", 5)),
            max_iterations=int(merged.get("max_iters", 20)),
            convergence=conv,
            xi=float(merged.get("xi", 0.01)),
            seed=int(merged.get("seed", 0)),
            prompt_refinement_rounds=int(merged.get("refine_rounds", 0)),
            noise_variance=float(merged.get("noise_variance", 1e-4)),
        )
        return Settings(
            run=cfg,
            image=str(merged["image"]),
            instruction=str(merged["instruction"]),
            out_dir=str(merged["out_dir"]),
            backend_url=backend_url,
            mock=bool(merged["mock"]),
            llm_provider=merged["llm_provider"],
            llm_fixture=merged.get("llm_fixture"),
            llm_model=merged.get("llm_model"),
            rates=merged.get("rates"),
            steps=int(merged["steps"]),
            mock_target=_pair(merged["mock_target"]),
        )
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def make_provider(settings: Settings):
    if settings.llm_provider == "mock":
        if settings.llm_fixture:
            return MockProvider.from_file(settings.llm_fixture)
        return StatisticJudge(GuidanceScales(*settings.mock_target))
    cls = OpenAIStyleProvider if settings.llm_provider == "openai-style" else AnthropicStyleProvider
    return cls(model=settings.llm_model)


def make_backend(settings: Settings):
    if settings.mock:
        return MockBackend(settings.run.bounds)
    return HttpBackend(settings.backend_url, settings.run.bounds)


@dataclass
class PipelineResult:
    record: RunRecord
    exit_code: int
    runlog_path: Path


def _cost_summary(ledger: CostLedger, rates: CostRates, label: str) -> dict:
    totals = ledger.totals()
    n_images = ledger.totals(Stage.scoring).n_images
    try:
        dollars = total_cost(ledger, rates, label, n_images)
    except ConfigurationError:
        dollars = None
    return {
        "prompt_tokens": totals.prompt_tokens,
        "completion_tokens": totals.completion_tokens,
        "n_images": n_images,
        "authoritative": totals.all_authoritative,
        "image_size": label,
        "dollars": dollars,
    }


def run_pipeline(
    settings: Settings,
    provider=None,
    backend=None,
    progress: Callable[[str], None] | None = None,
) -> PipelineResult:
    """Execute a full run and write artifacts to ``settings.out_dir``."""
    t_start = time.perf_counter()
    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        original = Path(settings.image).read_bytes()
        image_mime(original)
    except (OSError, ValidationError) as exc:
        raise ConfigurationError(f"cannot load image {settings.image}: {exc}") from exc
    width, height = image_size(original)
    rates = CostRates.load(settings.rates) if settings.rates else default_rates()
    provider = provider if provider is not None else make_provider(settings)
    backend = backend if backend is not None else make_backend(settings)
    ledger = CostLedger()
    cfg = settings.run
    say = progress or (lambda msg: None)
    timings = {"prompt_generation": 0.0, "optimization": 0.0, "refinement": 0.0}

    history: list[dict] = []
    rounds: list[dict] = []
    observations: list[Observation] = []
    stop = None
    exit_code = EXIT_OK

    t0 = time.perf_counter()
    try:
        prompt = generate_edit_prompt(original, settings.instruction, provider, ledger)
        history.append({"round": 0, "prompt": prompt, "source": "generated"})
    except PromptError as exc:
        log.error("prompt generation failed: %s", exc)
        prompt, stop, exit_code = None, "prompt_failure", EXIT_EVALUATOR
    timings["prompt_generation"] = time.perf_counter() - t0

    n_rounds = cfg.prompt_refinement_rounds + 1 if prompt is not None else 0
    for rnd in range(n_rounds):
        offset = len(observations)
        pending: dict = {}

        def objective(s: GuidanceScales) -> ObjectiveResult:
            req = EditRequest(original, prompt, s.s_image, s.s_text, settings.steps, cfg.seed)
            try:
                resp = backend.edit(req)
            except BackendError as exc:
                raise BackendFailure(str(exc)) from exc
            outcome = evaluate(original, resp.image, settings.instruction, provider, ledger)
            pending["image"] = resp.image
            return ObjectiveResult(outcome.raw_score / 100, outcome.raw_score, outcome.explanation)

        def on_step(it: int, s: GuidanceScales, obs: Observation) -> None:
            k = offset + it
            (out / f"iter_{k}.png").write_bytes(pending.pop("image"))
            say(f"[{k:3d}] s_image={s.s_image:.4f} s_text={s.s_text:.4f} score={obs.raw_score}")

        t0 = time.perf_counter()
        state = run(cfg, objective, on_step)
        timings["optimization"] += time.perf_counter() - t0
        observations += [
            replace(o, iteration=offset + o.iteration, image_ref=f"iter_{offset + o.iteration}.png")
            for o in state.observations
        ]
        stop = state.stop_reason.value
        if state.stop_reason is StopReason.evaluator_failure:
            is_backend = isinstance(state.last_error, BackendFailure)
            stop = "backend_failure" if is_backend else "evaluator_failure"
            exit_code = EXIT_BACKEND if is_backend else EXIT_EVALUATOR
        round_best = state.incumbent
        rounds.append({
            "round": rnd,
            "prompt": prompt,
            "first_iteration": offset,
            "n_observations": len(state.observations),
            "stop_reason": stop,
            "best_iteration": None if round_best is None else offset + round_best.iteration,
        })
        if exit_code != EXIT_OK or rnd == n_rounds - 1:
            break
        if round_best is None or not round_best.explanation:
            break
        t0 = time.perf_counter()
        try:
            rev = refine_prompt(prompt, round_best.explanation, provider, ledger)
            history.append({"round": rnd + 1, "prompt": rev.text, "source": "refined",
                            "unchanged": rev.unchanged})
            prompt = rev.text
        except PromptError as exc:
            log.warning("refinement failed, keeping previous prompt: %s", exc)
            history.append({"round": rnd + 1, "prompt": prompt, "source": "kept", "unchanged": True})
        timings["refinement"] += time.perf_counter() - t0

    incumbent = None
    for o in observations:
        if incumbent is None or o.score > incumbent.score:
            incumbent = o
    if incumbent is not None:
        (out / "best.png").write_bytes((out / incumbent.image_ref).read_bytes())
    timings["total"] = time.perf_counter() - t_start

    record = RunRecord(
        config=settings.snapshot(),
        instruction=settings.instruction,
        edit_prompt={
            "initial": history[0]["prompt"] if history else None,
            "final": prompt,
            "history": history,
        },
        observations=observations,
        incumbent=incumbent,
        stop_reason=stop,
        cost=_cost_summary(ledger, rates, image_size_label(width, height)),
        timings=timings,
        rounds=rounds,
        versions={
            "cfgtune": __version__,
            "protocol": PROTOCOL_VERSION,
            "runlog_schema": SCHEMA_VERSION,
            "provider": provider.provider_id,
            "backend": getattr(backend, "backend_id", "http"),
        },
    )
    path = write_runlog(record, out)
    return PipelineResult(record, exit_code, path)


def summary_lines(record: RunRecord) -> list[str]:
    lines = [f"stop reason: {record.stop_reason}", f"evaluations: {len(record.observations)}"]
    inc = record.incumbent
    if inc is not None:
        lines.append(
            f"best: iteration {inc.iteration} s_image={inc.scales.s_image:.4f} "
            f"s_text={inc.scales.s_text:.4f} score={inc.score:.2f} ({inc.image_ref})"
        )
    c = record.cost
    dollars = "n/a" if c["dollars"] is None else f"${c['dollars']:.3f}"
    lines.append(
        f"tokens: prompt={c['prompt_tokens']} completion={c['completion_tokens']} "
        f"images={c['n_images']} size={c['image_size']} cost={dollars}"
        + ("" if c["authoritative"] else " (estimated)")
    )
    return lines
