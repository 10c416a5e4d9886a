"""Client for a dual-CFG image-editing server, and a deterministic mock.

Wire protocol: ``POST {endpoint}/edit`` with JSON body::

    {"image_b64": str, "prompt": str, "image_cfg_scale": float,
     "text_cfg_scale": float, "steps": int, "seed": int}

answered by ``{"image_b64": str, "backend_id": str, "elapsed_ms": int}``.
Images travel as base64 PNG.

The mock renders a flat-colour image with a mean-preserving stripe pattern.
Its per-image statistics are documented closed forms of the request:

* mean intensity (all channels, in [0, 1]) =
  ``0.5 + 0.3 * tanh((s_text - 5.5) / 4.5)``
* channel balance (mean red minus mean blue) =
  ``0.3 * tanh((s_image - 1.5) / 0.8)``
* stripe contrast = ``0.02 + 0.06 * u`` with ``u in [0, 1)`` drawn from
  ``hash(prompt)`` and the seed

At ``s = (1, 1)`` the mean intensity is ``0.5 - 0.3 tanh(1) = 0.2715218...``
and the balance ``-0.3 tanh(0.625) = -0.1663799...``. The quantized image
reproduces the mean intensity to within ``1 / (2 * 255 * 3 * N)`` for ``N``
pixels (and each channel mean to ``1 / (2 * 255 * N)``).
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import httpx
import numpy as np
from PIL import Image, UnidentifiedImageError

from .types import Bounds, GuidanceScales, ValidationError

log = logging.getLogger(__name__)

MOCK_BACKEND_ID = "mock-dual-cfg/1"
DEFAULT_STEPS = 50
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 1.0

MEAN_CENTER, MEAN_SCALE, MEAN_AMPLITUDE = 5.5, 4.5, 0.3
BALANCE_CENTER, BALANCE_SCALE, BALANCE_AMPLITUDE = 1.5, 0.8, 0.3


class BackendError(RuntimeError):
    """Non-2xx reply, or transport failure after the retry budget."""


class ProtocolError(BackendError):
    """The reply could not be decoded into a valid image."""


@dataclass(frozen=True)
class EditRequest:
    image: bytes
    prompt: str
    image_cfg_scale: float
    text_cfg_scale: float
    steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @property
    def scales(self) -> GuidanceScales:
        return GuidanceScales(self.image_cfg_scale, self.text_cfg_scale)

    def to_json(self) -> dict:
        return {
            "image_b64": base64.b64encode(self.image).decode("ascii"),
            "prompt": self.prompt,
            "image_cfg_scale": self.image_cfg_scale,
            "text_cfg_scale": self.text_cfg_scale,
            "steps": self.steps,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, body: dict) -> EditRequest:
        try:
            return cls(
                image=base64.b64decode(body["image_b64"], validate=True),
                prompt=str(body["prompt"]),
                image_cfg_scale=float(body["image_cfg_scale"]),
                text_cfg_scale=float(body["text_cfg_scale"]),
                steps=int(body["steps"]),
                seed=int(body["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed edit request: {exc}") from exc


@dataclass(frozen=True)
class EditResponse:
    image: bytes
    backend_id: str
    elapsed_ms: int

    def to_json(self) -> dict:
        return {
            "image_b64": base64.b64encode(self.image).decode("ascii"),
            "backend_id": self.backend_id,
            "elapsed_ms": self.elapsed_ms,
        }


def image_size(data: bytes) -> tuple[int, int]:
    """``(width, height)`` of an encoded image; raises ProtocolError if undecodable."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return im.size
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ProtocolError(f"undecodable image: {exc}") from exc


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_rgb(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ProtocolError(f"undecodable image: {exc}") from exc


def solid_png(width: int = 64, height: int = 64, rgb=(128, 128, 128)) -> bytes:
    return encode_png(np.broadcast_to(np.array(rgb, dtype=np.uint8), (height, width, 3)).copy())


# -- mock statistics ---------------------------------------------------------

def mock_mean_intensity(s: GuidanceScales) -> float:
    return 0.5 + MEAN_AMPLITUDE * math.tanh((s.s_text - MEAN_CENTER) / MEAN_SCALE)


def mock_channel_balance(s: GuidanceScales) -> float:
    return BALANCE_AMPLITUDE * math.tanh((s.s_image - BALANCE_CENTER) / BALANCE_SCALE)


def mock_stripe_contrast(prompt: str, seed: int) -> float:
    digest = hashlib.sha256(f"{seed}:{prompt}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    return 0.02 + 0.06 * u


def invert_mock_statistics(mean_intensity: float, balance: float) -> GuidanceScales:
    """Recover the scales that produced the given statistics."""
    m = (mean_intensity - 0.5) / MEAN_AMPLITUDE
    b = balance / BALANCE_AMPLITUDE
    m = min(max(m, -1 + 1e-12), 1 - 1e-12)
    b = min(max(b, -1 + 1e-12), 1 - 1e-12)
    return GuidanceScales(
        BALANCE_CENTER + BALANCE_SCALE * math.atanh(b),
        MEAN_CENTER + MEAN_SCALE * math.atanh(m),
    )


@dataclass(frozen=True)
class ImageStatistics:
    mean_intensity: float
    channel_balance: float
    channel_means: tuple[float, float, float]


def measure_statistics(data: bytes) -> ImageStatistics:
    px = decode_rgb(data).astype(np.float64) / 255.0
    means = px.reshape(-1, 3).mean(axis=0)
    return ImageStatistics(float(means.mean()), float(means[0] - means[2]), tuple(float(v) for v in means))


def _quantize_channel(target: np.ndarray, channel_mean: float) -> np.ndarray:
    """Round to uint8 levels, then nudge pixels so the channel sum is exact."""
    n = target.size
    q = np.clip(np.floor(target * 255 + 0.5), 0, 255).astype(np.int64).ravel()
    want = int(round(channel_mean * 255 * n))
    diff = want - int(q.sum())
    if diff:
        step = 1 if diff > 0 else -1
        # candidates ordered by rounding residual, most deserving first
        resid = (target.ravel() * 255 - q) * step
        for idx in np.argsort(-resid, kind="stable"):
            if diff == 0:
                break
            if 0 <= q[idx] + step <= 255:
                q[idx] += step
                diff -= step
    return q.reshape(target.shape)


def mock_edit(req: EditRequest) -> EditResponse:
    """Deterministic stand-in for the editing model."""
    t0 = time.perf_counter()
    width, height = image_size(req.image)
    s = req.scales
    mu = mock_mean_intensity(s)
    bal = mock_channel_balance(s)
    contrast = mock_stripe_contrast(req.prompt, req.seed)
    channel_means = (mu + bal / 2, mu, mu - bal / 2)

    cols = np.arange(width)
    stripe = np.where((cols // 4) % 2 == 0, contrast, -contrast)
    stripe = stripe - stripe.mean()
    pattern = np.broadcast_to(stripe, (height, width))
    out = np.empty((height, width, 3), dtype=np.uint8)
    for c, cm in enumerate(channel_means):
        out[..., c] = _quantize_channel(np.clip(cm + pattern, 0, 1), cm)
    return EditResponse(encode_png(out), MOCK_BACKEND_ID, int((time.perf_counter() - t0) * 1000))


# -- clients -----------------------------------------------------------------

class MockBackend:
    backend_id = MOCK_BACKEND_ID

    def __init__(self, bounds: Bounds | None = None):
        self.bounds = bounds
        self.requests: list[EditRequest] = []

    def edit(self, req: EditRequest) -> EditResponse:
        _check_bounds(req, self.bounds)
        image_size(req.image)
        self.requests.append(req)
        return mock_edit(req)


def _check_bounds(req: EditRequest, bounds: Bounds | None) -> None:
    if bounds is not None and not bounds.contains(req.scales):
        raise ValidationError(f"scales {req.scales} outside bounds {bounds}")


class HttpBackend:
    """``edit_image`` over HTTP with exponential-backoff retries on transport errors."""

    def __init__(
        self,
        endpoint: str,
        bounds: Bounds | None = None,
        timeout: float = 300.0,
        attempts: int = RETRY_ATTEMPTS,
        base_delay: float = RETRY_BASE_DELAY,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.bounds = bounds
        self.attempts = attempts
        self.base_delay = base_delay
        self.sleep = sleep
        self.client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self.client.close()

    def edit(self, req: EditRequest) -> EditResponse:
        _check_bounds(req, self.bounds)
        in_size = image_size(req.image)
        body = req.to_json()
        url = f"{self.endpoint}/edit"
        for attempt in range(self.attempts):
            try:
                resp = self.client.post(url, json=body)
                break
            except httpx.TransportError as exc:
                if attempt == self.attempts - 1:
                    raise BackendError(f"backend unreachable at {url}: {exc}") from exc
                delay = self.base_delay * 2**attempt
                log.warning("backend transport error (%s); retrying in %.1fs", exc, delay)
                self.sleep(delay)
        if not 200 <= resp.status_code < 300:
            raise BackendError(f"backend returned {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            image = base64.b64decode(payload["image_b64"], validate=True)
            out = EditResponse(image, str(payload["backend_id"]), int(payload["elapsed_ms"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed backend reply: {exc}") from exc
        if image_size(out.image) != in_size:
            raise ProtocolError(f"reply image size {image_size(out.image)} != request {in_size}")
        return out


def edit_image(req: EditRequest, endpoint: str, bounds: Bounds | None = None) -> EditResponse:
    client = HttpBackend(endpoint, bounds)
    try:
        return client.edit(req)
    finally:
        client.close()
