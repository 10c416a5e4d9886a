"""Multimodal chat providers: HTTP adapters and deterministic mocks.

A provider is anything with ``send(ChatRequest) -> ProviderReply`` and a
``provider_id`` attribute. Usage is ``None`` when the backend did not
report token counts.
"""

from __future__ import annotations

import base64
import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import httpx

from .backend import invert_mock_statistics, measure_statistics, ProtocolError
from .types import GuidanceScales, ValidationError

ALLOWED_MIME = ("image/png", "image/jpeg")
DEFAULT_TIMEOUT = 120.0


class ProviderError(RuntimeError):
    """Transport or protocol failure talking to an LLM provider."""


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    images: tuple[tuple[str, bytes], ...] = ()
    temperature: float = 0.0
    max_output_tokens: int = 512

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        for mime, payload in self.images:
            if mime not in ALLOWED_MIME:
                raise ValidationError(f"unsupported image mime type {mime!r}")
            if not isinstance(payload, (bytes, bytearray)):
                raise ValidationError("image payloads must be bytes")
        if self.max_output_tokens < 1:
            raise ValidationError("max_output_tokens must be positive")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class ProviderReply:
    text: str
    usage: Usage | None = None


class LlmProvider(Protocol):
    provider_id: str

    def send(self, request: ChatRequest) -> ProviderReply: ...


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class _HttpProvider:
    default_base = ""
    default_model = ""

    def __init__(
        self,
        api_key: str | None = None,
        api_base: str | None = None,
        model: str | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        transport: httpx.BaseTransport | None = None,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY", "")
        self.api_base = (api_base or os.environ.get("LLM_API_BASE") or self.default_base).rstrip("/")
        self.model = model or self.default_model
        self.client = httpx.Client(timeout=timeout, transport=transport)

    @property
    def provider_id(self) -> str:
        return f"{self.kind}:{self.model}"

    def _post(self, url: str, body: dict, headers: dict) -> dict:
        try:
            resp = self.client.post(url, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise ProviderError(f"transport failure: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise ProviderError(f"provider returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except json.JSONDecodeError as exc:
            raise ProviderError("provider reply is not JSON") from exc


class OpenAIStyleProvider(_HttpProvider):
    """``POST {base}/chat/completions`` with data-URL image parts."""

    kind = "openai-style"
    default_base = "https://api.openai.com/v1"
    default_model = "gpt-4o"

    def build_body(self, request: ChatRequest) -> dict:
        content = [{"type": "text", "text": request.user_text}]
        for mime, data in request.images:
            content.append({"type": "image_url", "image_url": {"url": f"data:{mime};base64,{_b64(data)}"}})
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }

    def send(self, request: ChatRequest) -> ProviderReply:
        payload = self._post(
            f"{self.api_base}/chat/completions",
            self.build_body(request),
            {"Authorization": f"Bearer {self.api_key}"},
        )
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected reply shape: {exc}") from exc
        usage = payload.get("usage")
        if usage and "prompt_tokens" in usage and "completion_tokens" in usage:
            return ProviderReply(text, Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"])))
        return ProviderReply(text)


class AnthropicStyleProvider(_HttpProvider):
    """``POST {base}/v1/messages`` with base64 image blocks."""

    kind = "anthropic-style"
    default_base = "https://api.anthropic.com"
    default_model = "claude-3-5-sonnet-latest"
    api_version = "2023-06-01"

    def build_body(self, request: ChatRequest) -> dict:
        content = [{"type": "text", "text": request.user_text}]
        for mime, data in request.images:
            content.append(
                {"type": "image", "source": {"type": "base64", "media_type": mime, "data": _b64(data)}}
            )
        return {
            "model": self.model,
            "system": request.system_text,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }

    def send(self, request: ChatRequest) -> ProviderReply:
        payload = self._post(
            f"{self.api_base}/v1/messages",
            self.build_body(request),
            {"x-api-key": self.api_key, "anthropic-version": self.api_version},
        )
        try:
            text = "".join(b["text"] for b in payload["content"] if b.get("type") == "text")
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"unexpected reply shape: {exc}") from exc
        usage = payload.get("usage")
        if usage and "input_tokens" in usage and "output_tokens" in usage:
            return ProviderReply(text, Usage(int(usage["input_tokens"]), int(usage["output_tokens"])))
        return ProviderReply(text)


# -- mocks -------------------------------------------------------------------

@dataclass(frozen=True)
class ScriptedTurn:
    response_text: str
    expect_substring: str = ""
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    fail: bool = False


class MockProvider:
    """Replays scripted turns in order and records every request.

    Fixture files are JSON lists of
    ``{expect_substring, response_text, prompt_tokens, completion_tokens}``;
    omitting both token fields makes the turn report no usage. A turn with
    ``"fail": true`` raises ProviderError instead of replying.
    """

    provider_id = "mock:scripted"

    def __init__(self, turns):
        self.turns = [t if isinstance(t, ScriptedTurn) else ScriptedTurn(**t) for t in turns]
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> MockProvider:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, list):
            raise ValidationError("fixture transcript must be a JSON list")
        return cls(data)

    def send(self, request: ChatRequest) -> ProviderReply:
        with self._lock:
            self.requests.append(request)
            idx = len(self.requests) - 1
        if idx >= len(self.turns):
            raise ProviderError(f"mock script exhausted after {len(self.turns)} turns")
        turn = self.turns[idx]
        if turn.expect_substring and turn.expect_substring not in request.user_text:
            raise AssertionError(
                f"turn {idx}: expected {turn.expect_substring!r} in request text"
            )
        if turn.fail:
            raise ProviderError(f"scripted failure at turn {idx}")
        usage = None
        if turn.prompt_tokens is not None and turn.completion_tokens is not None:
            usage = Usage(turn.prompt_tokens, turn.completion_tokens)
        return ProviderReply(turn.response_text, usage)


class StatisticJudge:
    """Judge for the mock backend: scores an edit by how close it landed to a target.

    The generated image's statistics are inverted back to guidance scales
    (see :mod:`cfgtune.backend`), and the score is
    ``round(100 * (floor + (1 - floor) * exp(-d**2 / 2)))`` with
    ``d = hypot((s_image - t_image) / w_image, (s_text - t_text) / w_text)``.
    The objective therefore peaks exactly at ``target``. Requests with one
    image get a canned edit prompt; requests with none get a canned revision.
    """

    provider_id = "mock:statistic-judge"
    usage = Usage(800, 180)

    def __init__(
        self, target: GuidanceScales = GuidanceScales(1.6, 6.0), widths=(0.4, 0.7), floor: float = 0.4
    ):
        self.target = target
        self.widths = widths
        self.floor = floor
        self.requests: list[ChatRequest] = []

    def score_for(self, s: GuidanceScales) -> int:
        d = math.hypot(
            (s.s_image - self.target.s_image) / self.widths[0],
            (s.s_text - self.target.s_text) / self.widths[1],
        )
        return int(round(100 * (self.floor + (1 - self.floor) * math.exp(-0.5 * d * d))))

    def send(self, request: ChatRequest) -> ProviderReply:
        self.requests.append(request)
        if len(request.images) == 2:
            try:
                stats = measure_statistics(request.images[1][1])
            except ProtocolError as exc:
                raise ProviderError(str(exc)) from exc
            s = invert_mock_statistics(stats.mean_intensity, stats.channel_balance)
            score = self.score_for(s)
            text = (
                f"The score is: {score}. Estimated edit strength "
                f"({s.s_image:.3f}, {s.s_text:.3f}) against target "
                f"({self.target.s_image:.3f}, {self.target.s_text:.3f})."
            )
            return ProviderReply(text, self.usage)
        if len(request.images) == 1:
            return ProviderReply(
                "Apply the requested change to the main subject only, keeping the background, "
                "lighting and composition of the original photograph unchanged.",
                Usage(400, 60),
            )
        return ProviderReply(
            "Apply the requested change to the main subject only, keeping the background, "
            "lighting and composition unchanged; place the edited object at the same position.",
            Usage(200, 60),
        )
