"""Token usage ledger and dollar cost per run."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .types import ValidationError


class ConfigurationError(ValueError):
    pass


class Stage(str, Enum):
    prompt_generation = "prompt_generation"
    refinement = "refinement"
    scoring = "scoring"


@dataclass(frozen=True)
class UsageEvent:
    stage: Stage
    prompt_tokens: int
    completion_tokens: int
    authoritative: bool = True
    n_images: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        for name in ("prompt_tokens", "completion_tokens", "n_images"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {v!r}")


@dataclass(frozen=True)
class LedgerTotals:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    n_images: int = 0
    n_events: int = 0
    all_authoritative: bool = True


class CostLedger:
    """Append-only usage log. Appends are serialized; totals are a snapshot."""

    def __init__(self, events=()):
        self._lock = threading.Lock()
        self._events: list[UsageEvent] = []
        for e in events:
            self.record(e)

    def record(self, event: UsageEvent) -> CostLedger:
        with self._lock:
            self._events.append(event)
        return self

    @property
    def events(self) -> tuple[UsageEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def totals(self, stage: Stage | None = None) -> LedgerTotals:
        events = [e for e in self.events if stage is None or e.stage == Stage(stage)]
        return LedgerTotals(
            prompt_tokens=sum(e.prompt_tokens for e in events),
            completion_tokens=sum(e.completion_tokens for e in events),
            n_images=sum(e.n_images for e in events),
            n_events=len(events),
            all_authoritative=all(e.authoritative for e in events),
        )

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class CostRates:
    rate_prompt_per_token: float
    rate_completion_per_token: float
    per_image_surcharge: dict

    def __post_init__(self):
        rates = [self.rate_prompt_per_token, self.rate_completion_per_token,
                 *self.per_image_surcharge.values()]
        if any(r < 0 for r in rates):
            raise ValidationError("rates must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> CostRates:
        try:
            return cls(
                float(d["rate_prompt_per_token"]),
                float(d["rate_completion_per_token"]),
                {str(k): float(v) for k, v in d["per_image_surcharge"].items()},
            )
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ConfigurationError(f"malformed rates: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> CostRates:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "rate_prompt_per_token": self.rate_prompt_per_token,
            "rate_completion_per_token": self.rate_completion_per_token,
            "per_image_surcharge": dict(self.per_image_surcharge),
        }


def default_rates() -> CostRates:
    """Rates fixture shipped with the package (see ``data/rates.json``)."""
    text = resources.files("cfgtune").joinpath("data/rates.json").read_text()
    return CostRates.from_dict(json.loads(text))


def image_size_label(width: int, height: int) -> str:
    return f"{width}x{height}"


def total_cost(ledger: CostLedger, rates: CostRates, image_size: str, n_images: int) -> float:
    """Unrounded dollars; format with :func:`format_dollars` for display."""
    if image_size not in rates.per_image_surcharge:
        raise ConfigurationError(f"no per-image surcharge configured for {image_size!r}")
    t = ledger.totals()
    return (
        t.prompt_tokens * rates.rate_prompt_per_token
        + t.completion_tokens * rates.rate_completion_per_token
        + n_images * rates.per_image_surcharge[image_size]
    )


def format_dollars(amount: float) -> str:
    return f"{amount:.3f}"
