"""LLM-as-judge objective plus edit-prompt generation and refinement."""

from __future__ import annotations

import io
import logging
import math
import re
from dataclasses import dataclass, field

from PIL import Image, UnidentifiedImageError

from .costs import CostLedger, Stage, UsageEvent
from .optimizer import ObjectiveError
from .providers import ChatRequest, LlmProvider, ProviderError, ProviderReply
from .types import ValidationError

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3
IMAGE_TOKEN_SURCHARGE = 1105
SCORE_MARKER = "The score is:"

JUDGE_SYSTEM_TEXT = "You are a careful evaluator of image edits."

SCORING_TEMPLATE = """\
The following is a requirement for modifying an image:
{requirement}

Below are two images: the original image and the generated image after modification.

The first one is the original Image.

The second one is the generated Image.

Please evaluate whether the generated image meets the requirement. Provide a score from 0 to 100 based on the following criteria:
1. If the generated image is altered too much compared to the original image, give a low score.
2. If the generated image is altered too little, give a low score.
3. If the generated image meets the requirement well, give a high score.
The return should begin with: The score is:
Ensure the scores follow a normal distribution, with the majority of scores being around the middle range, and only exceptional cases scoring very low or very high. Also, provide a brief explanation for the score."""

FORMAT_REMINDER = (
    "Your reply must begin with exactly: The score is: followed by an integer from 0 to 100."
)

PROMPT_SYSTEM_TEXT = "You write instructions for an instruction-following image-editing model."

GENERATION_TEMPLATE = """\
The attached image is to be edited according to this requirement:
{requirement}

Write one detailed, self-contained editing instruction for an image-editing model. \
Name the object to change, where it is in the image, what it should become, and \
what must stay unchanged. Reply with the instruction text only."""

REFINEMENT_TEMPLATE = """\
The editing instruction below produced an image that did not fully satisfy the requirement.

Current instruction:
{previous_prompt}

Feedback on the result:
{feedback}

Rewrite the instruction so the next edit addresses the feedback. Keep it detailed and \
self-contained. Reply with the revised instruction text only."""


class ScoreParseError(ValueError):
    pass


class EvaluationError(ObjectiveError):
    """The judge did not yield a parseable score within the retry budget."""

    def __init__(self, message: str, transcripts: list):
        super().__init__(message)
        self.transcripts = transcripts


class PromptError(RuntimeError):
    def __init__(self, message: str, transcripts: list):
        super().__init__(message)
        self.transcripts = transcripts


@dataclass(frozen=True)
class ScoringPromptTemplate:
    template_text: str = SCORING_TEMPLATE
    # attachment order: original first, generated second

    def render(self, requirement: str) -> str:
        return self.template_text.format(requirement=requirement)


@dataclass(frozen=True)
class EvaluationOutcome:
    raw_score: int
    explanation: str
    prompt_tokens: int
    completion_tokens: int
    provider_id: str
    retries: int = 0
    authoritative: bool = True
    transcript: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= self.raw_score <= 100:
            raise ValidationError(f"raw_score {self.raw_score} outside [0, 100]")


@dataclass(frozen=True)
class PromptRevision:
    text: str
    unchanged: bool = False


def image_mime(data: bytes) -> str:
    """Decode-check an image and return its mime type (png or jpeg only)."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            fmt = im.format
            im.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ValidationError(f"undecodable image: {exc}") from exc
    mime = {"PNG": "image/png", "JPEG": "image/jpeg"}.get(fmt)
    if mime is None:
        raise ValidationError(f"unsupported image format {fmt}")
    return mime


def build_scoring_prompt(
    requirement: str, original: bytes = b"", generated: bytes = b""
) -> ChatRequest:
    """The judge request. Images are attached original-first when given."""
    if not requirement or not requirement.strip():
        raise ValidationError("requirement must be non-empty")
    images = ()
    if original or generated:
        images = ((image_mime(original), original), (image_mime(generated), generated))
    return ChatRequest(
        system_text=JUDGE_SYSTEM_TEXT,
        user_text=ScoringPromptTemplate().render(requirement.strip()),
        images=images,
        temperature=0.0,
    )


_SCORE_RE = re.compile(
    r"the\s+score\s+is\s*:[\s*_`~]*(?P<num>[+-]?\d+(?:[.,]\d+)?)(?![\d.,]*\d)",
    re.IGNORECASE,
)
_MARKER_RE = re.compile(r"the\s+score\s+is\s*:", re.IGNORECASE)
_LEADING_JUNK = re.compile(r"^(?:\s*/\s*100|\s*out\s+of\s+100)?[\s.*_`~:,;\-]*", re.IGNORECASE)


def parse_score(response_text: str) -> tuple[int, str]:
    """Extract ``(score, explanation)`` from a reply that opens with the marker.

    Markdown emphasis around the marker and number is tolerated. Anything
    that is not a plain integer in [0, 100] is rejected.
    """
    marker = _MARKER_RE.search(response_text)
    if marker is None:
        raise ScoreParseError(f"marker {SCORE_MARKER!r} not found")
    m = _SCORE_RE.match(response_text, marker.start())
    if m is None:
        raise ScoreParseError("no number follows the score marker")
    num = m.group("num")
    if not re.fullmatch(r"[+-]?\d+", num):
        raise ScoreParseError(f"score {num!r} is not an integer")
    value = int(num)
    if not 0 <= value <= 100:
        raise ScoreParseError(f"score {value} outside [0, 100]")
    rest = response_text[m.end():]
    return value, _LEADING_JUNK.sub("", rest, count=1).strip()


def format_score(score: int, explanation: str = "") -> str:
    return f"{SCORE_MARKER} {score}. {explanation}".rstrip()


def _usage(request: ChatRequest, reply: ProviderReply) -> tuple[int, int, bool]:
    if reply.usage is not None:
        return reply.usage.prompt_tokens, reply.usage.completion_tokens, True
    chars = len(request.system_text) + len(request.user_text)
    prompt = math.ceil(chars / 4) + IMAGE_TOKEN_SURCHARGE * len(request.images)
    return prompt, math.ceil(len(reply.text) / 4), False


def _record(ledger: CostLedger | None, stage: Stage, request: ChatRequest, reply: ProviderReply):
    p, c, auth = _usage(request, reply)
    if ledger is not None:
        ledger.record(UsageEvent(stage, p, c, auth, n_images=len(request.images)))
    return p, c, auth


def evaluate(
    original: bytes,
    generated: bytes,
    requirement: str,
    provider: LlmProvider,
    ledger: CostLedger | None = None,
) -> EvaluationOutcome:
    request = build_scoring_prompt(requirement, original, generated)
    transcripts = []
    prompt_total = completion_total = 0
    authoritative = True
    for attempt in range(MAX_ATTEMPTS):
        try:
            reply = provider.send(request)
        except ProviderError as exc:
            transcripts.append({"attempt": attempt, "request": request.user_text, "error": str(exc)})
            log.warning("judge call failed (attempt %d): %s", attempt + 1, exc)
            continue
        p, c, auth = _record(ledger, Stage.scoring, request, reply)
        prompt_total += p
        completion_total += c
        authoritative &= auth
        transcripts.append({"attempt": attempt, "request": request.user_text, "response": reply.text})
        try:
            score, explanation = parse_score(reply.text)
        except ScoreParseError as exc:
            log.info("unparseable judge reply (attempt %d): %s", attempt + 1, exc)
            if FORMAT_REMINDER not in request.user_text:
                request = ChatRequest(
                    request.system_text, f"{request.user_text}\n{FORMAT_REMINDER}",
                    request.images, request.temperature, request.max_output_tokens,
                )
            continue
        return EvaluationOutcome(
            raw_score=score,
            explanation=explanation,
            prompt_tokens=prompt_total,
            completion_tokens=completion_total,
            provider_id=provider.provider_id,
            retries=attempt,
            authoritative=authoritative,
            transcript=tuple(transcripts),
        )
    raise EvaluationError(f"no valid score after {MAX_ATTEMPTS} attempts", transcripts)


def _ask_for_text(request: ChatRequest, provider: LlmProvider, stage: Stage, ledger) -> str:
    transcripts = []
    for attempt in range(MAX_ATTEMPTS):
        try:
            reply = provider.send(request)
        except ProviderError as exc:
            transcripts.append({"attempt": attempt, "error": str(exc)})
            continue
        _record(ledger, stage, request, reply)
        transcripts.append({"attempt": attempt, "response": reply.text})
        if reply.text.strip():
            return reply.text.strip()
    raise PromptError(f"{stage.value}: no usable reply after {MAX_ATTEMPTS} attempts", transcripts)


def generate_edit_prompt(
    original: bytes, requirement: str, provider: LlmProvider, ledger: CostLedger | None = None
) -> str:
    if not requirement or not requirement.strip():
        raise ValidationError("requirement must be non-empty")
    request = ChatRequest(
        system_text=PROMPT_SYSTEM_TEXT,
        user_text=GENERATION_TEMPLATE.format(requirement=requirement.strip()),
        images=((image_mime(original), original),),
    )
    return _ask_for_text(request, provider, Stage.prompt_generation, ledger)


def refine_prompt(
    previous_prompt: str, feedback: str, provider: LlmProvider, ledger: CostLedger | None = None
) -> PromptRevision:
    if not previous_prompt.strip() or not feedback.strip():
        raise ValidationError("previous_prompt and feedback must be non-empty")
    request = ChatRequest(
        system_text=PROMPT_SYSTEM_TEXT,
        user_text=REFINEMENT_TEMPLATE.format(previous_prompt=previous_prompt, feedback=feedback),
    )
    text = _ask_for_text(request, provider, Stage.refinement, ledger)
    return PromptRevision(text, unchanged=text == previous_prompt.strip())
