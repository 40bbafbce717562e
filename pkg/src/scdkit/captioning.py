"""Client for a vision-language captioner that describes scene changes.

The client owns prompt construction, request pacing, retries, and parsing
of the numbered-list responses into a :class:`CaptionReport`. The network
side lives behind a tiny adapter protocol so tests (and offline runs) can
substitute a deterministic fake.
"""

from __future__ import annotations

import base64
import io
import re
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import CaptionerUnavailable, CaptionParseWarning, ConfigError
from .masks import ImagePair

_OBJECT_PROMPT = (
    "I have 2 images of outdoor scenes: A and B. In this task, you must not "
    "talk about weather, lighting, vehicles, people, or animals. Refrain from "
    "mentioning any elements that are not directly observable or are obscure. "
    "You must try your best to find all objects you see in A. For every object "
    "you see in A, you should try your best to find a corresponding object in "
    "B. Then, you must try your best to find all objects you see in B. For "
    "every object you see in B, you should try your best to find a "
    "corresponding object in A. In your response, just give me a numbered list "
    "of objects that you fail to find a match in B, and a numbered list of "
    "objects that you fail to find a match in A. Do not use prepositions."
)

_VEGETATION_PROMPT = (
    "I have 2 images of outdoor scenes: A and B. In this task, you must try "
    "your best to find all vegetations you see in A. For every plant you see "
    "in A, you should try your best to find if it changed in B. Then, you "
    "must try your best to find all vegetations you see in B. For every plant "
    "you see in B, you should try your best to find if it changed in A. In "
    "your response, just give me a numbered list of changed plant names in A, "
    "and a numbered list of changed plant names in B. If the plant is "
    "removed, do not include it in the list. If there are no visible changed "
    'plants in the image A, write "1. None". If there are no visible changed '
    'plants in the image B, write "1. None". If a plant is changed, only '
    "include the plant name after change. Do not use prepositions such as to. "
    "For example: green trees, bare trees, green bushes, bare bushes, potted "
    "plants."
)

DEFAULT_SYSTEM_ROLE = (
    "You are an expert to analyze images. You need to read images carefully."
)


def build_object_prompt() -> str:
    """Prompt asking for unmatched objects, one numbered list per side."""
    return _OBJECT_PROMPT


def build_vegetation_prompt() -> str:
    """Prompt asking for changed vegetation with appearance attributes."""
    return _VEGETATION_PROMPT


@dataclass(frozen=True)
class GenerationParams:
    """Captioner request settings; the defaults are the published operating
    configuration."""

    model_id: str = "gpt-4o"
    temperature: float = 0.2
    max_tokens: int = 4096
    top_p: float = 1.0
    inter_call_pause: float = 1.0
    system_role: str = DEFAULT_SYSTEM_ROLE

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ConfigError(f"max_tokens must be > 0, got {self.max_tokens}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.inter_call_pause < 0:
            raise ConfigError("inter_call_pause must be >= 0")


class CaptionerAdapter(Protocol):
    """Contract for the underlying vision-language model."""

    def complete(
        self,
        system_role: str,
        prompt: str,
        images_b64: Sequence[str],
        params: GenerationParams,
    ) -> str: ...


@dataclass(frozen=True)
class CaptionReport:
    pair_id: str
    objects_only_in_a: tuple[str, ...] = ()
    objects_only_in_b: tuple[str, ...] = ()
    vegetation_changed_a: tuple[str, ...] = ()
    vegetation_changed_b: tuple[str, ...] = ()
    raw_responses: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "objects_only_in_a": list(self.objects_only_in_a),
            "objects_only_in_b": list(self.objects_only_in_b),
            "vegetation_changed_a": list(self.vegetation_changed_a),
            "vegetation_changed_b": list(self.vegetation_changed_b),
            "raw_responses": list(self.raw_responses),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "CaptionReport":
        return cls(
            pair_id=payload["pair_id"],
            objects_only_in_a=tuple(payload["objects_only_in_a"]),
            objects_only_in_b=tuple(payload["objects_only_in_b"]),
            vegetation_changed_a=tuple(payload["vegetation_changed_a"]),
            vegetation_changed_b=tuple(payload["vegetation_changed_b"]),
            raw_responses=tuple(payload["raw_responses"]),
        )


_ITEM_RE = re.compile(r"^\s*(\d+)\.\s*(.*?)\s*$")


def parse_numbered_list(text: str) -> list[str]:
    """Extract "<int>. <text>" items in order, dropping the None sentinel.

    Non-matching lines are ignored, so preamble or chatter around the list
    is harmless.
    """
    items = []
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if not m:
            continue
        phrase = m.group(2).strip()
        if phrase and phrase.lower() != "none":
            items.append(phrase)
    return items


def _numbered_runs(text: str) -> list[list[str]]:
    """Split a response into runs of consecutive numbering.

    A numbered line whose index does not increase starts a new run; the
    sentinel keeps its slot for run detection and is dropped afterwards.
    """
    runs: list[list[str]] = []
    current: list[str] = []
    prev_index: int | None = None
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if not m:
            continue
        index = int(m.group(1))
        if prev_index is not None and index <= prev_index:
            runs.append(current)
            current = []
        prev_index = index
        phrase = m.group(2).strip()
        if phrase and phrase.lower() != "none":
            current.append(phrase)
    if prev_index is not None:
        runs.append(current)
    return runs


def split_sides(text: str) -> tuple[list[str], list[str]]:
    """Map a response onto (list for side A, list for side B).

    Both prompts request the A-side list first and the B-side list second.
    A reply with a single list is taken as the B side, the one downstream
    stages consume. No parseable list at all raises a parse warning.
    """
    runs = _numbered_runs(text)
    if not runs:
        if text.strip():
            warnings.warn(
                "response contained no numbered list", CaptionParseWarning, stacklevel=3
            )
        else:
            warnings.warn("empty captioner response", CaptionParseWarning, stacklevel=3)
        return [], []
    if len(runs) == 1:
        return [], runs[0]
    if len(runs) > 2:
        warnings.warn(
            f"expected at most two numbered lists, got {len(runs)}; extras ignored",
            CaptionParseWarning,
            stacklevel=3,
        )
    return runs[0], runs[1]


def encode_image_base64(image: np.ndarray) -> str:
    """PNG-encode an image array and return the base64 text."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.ndim == 2:
        pil = Image.fromarray(arr.astype(np.uint8), mode="L")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        pil = Image.fromarray(arr.astype(np.uint8), mode="RGB")
    else:
        raise ConfigError(f"cannot encode image of shape {arr.shape}")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RateLimiter:
    """Blocks until at least ``min_interval`` has passed since the last call.

    Injectable clock and sleep keep tests off the wall clock.
    """

    def __init__(
        self,
        min_interval: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.min_interval = min_interval
        self._clock = clock
        self._sleep = sleep
        self._last: float | None = None

    def wait(self) -> None:
        now = self._clock()
        if self._last is not None:
            remaining = self.min_interval - (now - self._last)
            if remaining > 0:
                self._sleep(remaining)
        self._last = self._clock()


def caption_pair(
    pair: ImagePair,
    params: GenerationParams,
    adapter: CaptionerAdapter,
    retries: int = 3,
    limiter: RateLimiter | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> CaptionReport:
    """Issue the object and vegetation prompts for one pair and parse both.

    Each request carries both images. Failed requests are retried with
    exponential backoff starting at the inter-call pause; once retries are
    exhausted the pair is abandoned with :class:`CaptionerUnavailable` so
    the caller can mark it pending and move on.
    """
    if retries < 1:
        raise ConfigError("retries must be >= 1")
    if limiter is None:
        limiter = RateLimiter(params.inter_call_pause)
    images = [encode_image_base64(pair.image_t0), encode_image_base64(pair.image_t1)]

    def call(prompt: str) -> str:
        last_error: Exception | None = None
        for attempt in range(retries):
            limiter.wait()
            try:
                return adapter.complete(params.system_role, prompt, images, params)
            except Exception as exc:  # adapter errors are opaque to us
                last_error = exc
                if attempt + 1 < retries:
                    sleep(params.inter_call_pause * (2**attempt))
        raise CaptionerUnavailable(
            f"captioner failed after {retries} attempts for pair {pair.pair_id}"
        ) from last_error

    object_raw = call(build_object_prompt())
    vegetation_raw = call(build_vegetation_prompt())
    only_a, only_b = split_sides(object_raw)
    veg_a, veg_b = split_sides(vegetation_raw)
    return CaptionReport(
        pair_id=pair.pair_id,
        objects_only_in_a=tuple(only_a),
        objects_only_in_b=tuple(only_b),
        vegetation_changed_a=tuple(veg_a),
        vegetation_changed_b=tuple(veg_b),
        raw_responses=(object_raw, vegetation_raw),
    )
