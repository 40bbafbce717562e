"""Deterministic fake adapters.

Every foundation-model dependency has a fake here that honors the same
adapter contract as the real thing but computes its answer from the pixels
(or from a script), so the full pipeline runs offline and byte-reproducibly.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
import torch

from .captioning import GenerationParams


class ScriptedCaptioner:
    """Replays canned responses in order; records every request."""

    def __init__(self, responses: Sequence[str]) -> None:
        self._responses = list(responses)
        self.calls: list[dict] = []

    def complete(
        self,
        system_role: str,
        prompt: str,
        images_b64: Sequence[str],
        params: GenerationParams,
    ) -> str:
        self.calls.append(
            {
                "system_role": system_role,
                "prompt": prompt,
                "num_images": len(images_b64),
                "model_id": params.model_id,
            }
        )
        if not self._responses:
            raise RuntimeError("scripted captioner ran out of responses")
        return self._responses.pop(0)


class FlakyCaptioner:
    """Fails the first ``failures`` requests, then delegates to a script."""

    def __init__(self, failures: int, responses: Sequence[str]) -> None:
        self.failures = failures
        self._inner = ScriptedCaptioner(responses)
        self.attempts = 0

    def complete(self, system_role, prompt, images_b64, params) -> str:
        self.attempts += 1
        if self.attempts <= self.failures:
            raise ConnectionError("synthetic outage")
        return self._inner.complete(system_role, prompt, images_b64, params)


class ScriptedRetriever:
    """Top-1 place recognition from a fixed probe-id to query-id mapping."""

    def __init__(self, mapping: dict[str, str], score: float = 1.0) -> None:
        self._mapping = dict(mapping)
        self._score = score

    def top1(self, probe, pool) -> tuple[str, float]:
        try:
            return self._mapping[probe.id], self._score
        except KeyError as exc:
            raise LookupError(f"no scripted match for probe {probe.id!r}") from exc


class HashTextEncoder:
    """Maps each whitespace token to a vector seeded by the token's hash.

    Stands in for a frozen language model: same text in, same embeddings
    out, on every platform.
    """

    def __init__(self, dim: int = 768) -> None:
        self.dim = dim

    def encode(self, text: str) -> torch.Tensor:
        tokens = text.split() or ["<empty>"]
        rows = []
        for token in tokens:
            seed = int.from_bytes(
                hashlib.sha256(token.encode()).digest()[:8], "little"
            )
            rng = np.random.default_rng(seed)
            rows.append(rng.standard_normal(self.dim, dtype=np.float64))
        return torch.from_numpy(np.stack(rows)).to(torch.float32)


class ScriptedTextEncoder:
    """Returns a fixed embedding tensor regardless of input."""

    def __init__(self, embeddings: torch.Tensor) -> None:
        self.embeddings = embeddings
        self.requests: list[str] = []

    def encode(self, text: str) -> torch.Tensor:
        self.requests.append(text)
        return self.embeddings


class FailingTextEncoder:
    def encode(self, text: str) -> torch.Tensor:
        raise ConnectionError("synthetic encoder outage")


class ScriptedSegmenter:
    """Open-vocabulary segmenter backed by a phrase-to-bitmaps table."""

    def __init__(self, mapping: dict[str, list[np.ndarray]]) -> None:
        self._mapping = {k: [np.array(b, dtype=bool) for b in v] for k, v in mapping.items()}
        self.calls: list[str] = []

    def segment(self, image: np.ndarray, phrase: str) -> list[np.ndarray]:
        self.calls.append(phrase)
        return [b.copy() for b in self._mapping.get(phrase, [])]


class FailingSegmenter:
    def segment(self, image, phrase):
        raise ConnectionError("synthetic segmenter outage")


class ScriptedTracker:
    """Returns a fixed absence set regardless of the images."""

    def __init__(self, bitmaps: Sequence[np.ndarray]) -> None:
        self._bitmaps = [np.array(b, dtype=bool) for b in bitmaps]
        self.calls = 0

    def inconsistent_masks(self, image_t0, image_t1) -> list[np.ndarray]:
        self.calls += 1
        return [b.copy() for b in self._bitmaps]


class PixelDiffTracker:
    """Proposes the set of pixels that differ between the two images.

    Identical images produce no proposals; any difference becomes a
    single mask. Good enough to drive the no-change path end to end.
    """

    def inconsistent_masks(self, image_t0, image_t1) -> list[np.ndarray]:
        a, b = np.asarray(image_t0), np.asarray(image_t1)
        diff = a != b
        while diff.ndim > 2:
            diff = diff.any(axis=-1)
        return [diff] if diff.any() else []


class FailingTracker:
    def inconsistent_masks(self, image_t0, image_t1):
        raise ConnectionError("synthetic tracker outage")


class ScriptedMatcher:
    """Dense matcher stub returning a fixed common-view bitmap."""

    def __init__(self, bitmap: np.ndarray) -> None:
        self._bitmap = np.array(bitmap, dtype=bool)

    def common_view(self, image_t0, image_t1) -> np.ndarray:
        return self._bitmap.copy()


class EqualityMatcher:
    """Treats pixelwise-equal regions as corresponding; identical images
    therefore get full coverage."""

    def common_view(self, image_t0, image_t1) -> np.ndarray:
        a, b = np.asarray(image_t0), np.asarray(image_t1)
        eq = a == b
        while eq.ndim > 2:
            eq = eq.all(axis=-1)
        return eq


class FailingMatcher:
    def common_view(self, image_t0, image_t1):
        raise ConnectionError("synthetic matcher outage")


class FrozenGridEncoder(torch.nn.Module):
    """Frozen stand-in for a large self-supervised vision backbone.

    Average-pools the input down to a fixed grid and lifts it to the
    target channel count with one seeded 1x1 conv whose weights never
    train. Default geometry matches the full-size pipeline: any square
    input -> (B, 384, 36, 36).
    """

    def __init__(
        self,
        out_channels: int = 384,
        grid_size: int = 36,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.grid_size = grid_size
        self.lift = torch.nn.Conv2d(3, out_channels, kernel_size=1)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.lift.weight.uniform_(-1.0, 1.0, generator=generator)
            self.lift.bias.zero_()
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pooled = torch.nn.functional.adaptive_avg_pool2d(
            images, (self.grid_size, self.grid_size)
        )
        return self.lift(pooled)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(images)
