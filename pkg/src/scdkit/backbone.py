"""Change-detection backbone contract plus a built-in toy backbone.

A detector is encoder -> (optional cross-modal enhancement of the T1
features) -> merge -> segmentation head. Real encoders attach through an
adapter; the toy backbone (strided conv stack at 64 px) keeps the whole
training and inference path testable on a laptop CPU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .enhancer import CrossModalEnhancer, FeatureGrid, TextEncoderAdapter
from .errors import (
    ConfigError,
    EncoderUnavailable,
    LabelError,
    ShapeError,
)
from .masks import ChangeMask
from .storage import (
    check_shapes,
    load_tensor_archive,
    save_tensor_archive,
    state_fingerprint,
)

DEFAULT_BINARY_WEIGHTS = (0.025, 0.975)


@dataclass(frozen=True)
class BackboneSpec:
    encoder_id: str = "toy"
    feature_channels: int = 32
    grid_height: int = 4
    grid_width: int = 4
    num_classes: int = 2
    input_resolution: int = 64

    def __post_init__(self) -> None:
        if self.num_classes not in (2, 4):
            raise ConfigError(f"num_classes must be 2 or 4, got {self.num_classes}")
        if self.input_resolution < self.grid_height or self.input_resolution < self.grid_width:
            raise ConfigError("input resolution smaller than the feature grid")

    def to_json(self) -> dict:
        return {
            "encoder_id": self.encoder_id,
            "feature_channels": self.feature_channels,
            "grid_height": self.grid_height,
            "grid_width": self.grid_width,
            "num_classes": self.num_classes,
            "input_resolution": self.input_resolution,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "BackboneSpec":
        return cls(**payload)


class EncoderAdapter(Protocol):
    """Frozen image encoder: batched images to a feature grid."""

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, R, R) float in [0, 1] -> (B, C, H, W)."""
        ...


class ToyEncoder(nn.Module):
    """Four stride-2 convs: 64x64 RGB down to a 4x4 grid of 32 channels."""

    def __init__(self, out_channels: int = 32, seed: int = 0) -> None:
        super().__init__()
        mid = max(out_channels // 2, 8)
        self.stages = nn.Sequential(
            nn.Conv2d(3, mid, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(mid, out_channels, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1),
        )
        generator = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                with torch.no_grad():
                    bound = (6.0 / (m.in_channels * 9 + m.out_channels * 9)) ** 0.5
                    m.weight.uniform_(-bound, bound, generator=generator)
                    m.bias.zero_()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.stages(images)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images)


class ToyMerge(nn.Module):
    """Difference-augmented merge: concat [f0, f1, f1 - f0], pointwise mix."""

    def __init__(self, channels: int, seed: int = 0) -> None:
        super().__init__()
        self.mix = nn.Conv2d(3 * channels, channels, kernel_size=1)
        generator = torch.Generator().manual_seed(seed + 101)
        with torch.no_grad():
            bound = (6.0 / (self.mix.in_channels + self.mix.out_channels)) ** 0.5
            self.mix.weight.uniform_(-bound, bound, generator=generator)
            self.mix.bias.zero_()

    @staticmethod
    def concat_features(f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
        if f0.shape != f1.shape:
            raise ShapeError(f"merge shape mismatch: {tuple(f0.shape)} vs {tuple(f1.shape)}")
        return torch.cat([f0, f1, f1 - f0], dim=1)

    def forward(self, f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
        return self.mix(self.concat_features(f0, f1))


class ToySegmentationHead(nn.Module):
    """Convolution and upsampling in two stages: refine on the coarse
    grid, 4x bilinear, refine again, then upsample to full resolution
    and classify per pixel. The mid-resolution stage lets the head place
    mask boundaries at sub-cell precision."""

    def __init__(self, channels: int, num_classes: int, output_resolution: int, seed: int = 0) -> None:
        super().__init__()
        self.refine_coarse = nn.Conv2d(channels, channels, 3, padding=1)
        self.refine_mid = nn.Conv2d(channels, channels, 3, padding=1)
        self.classify = nn.Conv2d(channels, num_classes, 1)
        self.output_resolution = output_resolution
        generator = torch.Generator().manual_seed(seed + 202)
        for m in (self.refine_coarse, self.refine_mid, self.classify):
            with torch.no_grad():
                fan = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = (6.0 / (fan + m.out_channels)) ** 0.5
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.zero_()

    def forward(self, merged: torch.Tensor) -> torch.Tensor:
        res = self.output_resolution
        x = F.relu(self.refine_coarse(merged))
        mid = (min(4 * x.shape[-2], res), min(4 * x.shape[-1], res))
        x = F.interpolate(x, size=mid, mode="bilinear", align_corners=False)
        x = F.relu(self.refine_mid(x))
        x = F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)
        return self.classify(x)


def weighted_pixel_cross_entropy(
    logits: torch.Tensor,
    target: torch.Tensor,
    weights: Sequence[float],
) -> torch.Tensor:
    """Per-pixel cross-entropy with class weights, weighted-mean reduced.

    Weights are normalized to mean 1 before use; under the weighted-mean
    reduction the scale cancels anyway, so uniform logits always score
    ln(K) no matter the weights or the target's class balance.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (B, K, H, W), got {tuple(logits.shape)}")
    if target.ndim != 3:
        raise ShapeError(f"target must be (B, H, W), got {tuple(target.shape)}")
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeError(
            f"logits {tuple(logits.shape)} incompatible with target {tuple(target.shape)}"
        )
    k = logits.shape[1]
    if len(weights) != k:
        raise ConfigError(f"{len(weights)} weights for {k} classes")
    if any(w <= 0 for w in weights):
        raise ConfigError("class weights must be positive")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= k):
        raise LabelError(f"target labels outside [0, {k})")
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    w = w * (k / w.sum())
    return F.cross_entropy(logits, target.long(), weight=w)


def mask_to_target(mask: ChangeMask) -> torch.Tensor:
    return torch.from_numpy(np.asarray(mask.labels).copy()).long().unsqueeze(0)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxW or HxWx3 uint8/float image to a (1, 3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    elif arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)
    else:
        raise ShapeError(f"cannot convert image of shape {arr.shape}")
    return torch.from_numpy(arr).unsqueeze(0)


class ChangeDetector(nn.Module):
    """Encoder + optional enhancer + merge + segmentation head."""

    def __init__(
        self,
        spec: BackboneSpec,
        enhancer: CrossModalEnhancer | None = None,
        encoder: object | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.spec = spec
        if encoder is not None:
            self.encoder = encoder
        elif spec.encoder_id == "toy":
            self.encoder = ToyEncoder(spec.feature_channels, seed=seed)
        else:
            raise ConfigError(
                f"encoder_id {spec.encoder_id!r} needs an explicit encoder adapter"
            )
        if enhancer is not None:
            if enhancer.config.image_channels != spec.feature_channels:
                raise ConfigError(
                    "enhancer image_channels must match backbone feature_channels"
                )
        self.enhancer = enhancer
        self.merge = ToyMerge(spec.feature_channels, seed=seed)
        self.head = ToySegmentationHead(
            spec.feature_channels, spec.num_classes, spec.input_resolution, seed=seed
        )

    # -- stages ------------------------------------------------------------

    def encode(self, images: torch.Tensor) -> FeatureGrid:
        if images.shape[-1] != self.spec.input_resolution or images.shape[-2] != self.spec.input_resolution:
            raise ShapeError(
                f"encoder expects {self.spec.input_resolution}px inputs, "
                f"got {tuple(images.shape[-2:])}"
            )
        try:
            features = (
                self.encoder.encode(images)
                if hasattr(self.encoder, "encode")
                else self.encoder(images)
            )
        except (ShapeError, ConfigError):
            raise
        except Exception as exc:
            raise EncoderUnavailable("image encoder failed") from exc
        return FeatureGrid(values=features)

    def forward(
        self,
        images_t0: torch.Tensor,
        images_t1: torch.Tensor,
        phrases: Sequence[str] | None = None,
        text_encoder: TextEncoderAdapter | None = None,
    ) -> torch.Tensor:
        f0 = self.encode(images_t0)
        f1 = self.encode(images_t1)
        if self.enhancer is not None:
            f1 = self.enhancer.enhance_grid(
                f1, list(phrases or ()), text_encoder or _NULL_ENCODER
            )
        merged = self.merge(f0.values, f1.values)
        return self.head(merged)

    # -- inference ---------------------------------------------------------

    def predict_initial_mask(
        self,
        pair,
        caption_report=None,
        text_encoder: TextEncoderAdapter | None = None,
    ) -> ChangeMask:
        """Full forward pass on one pair; argmax over classes."""
        phrases: list[str] = []
        if caption_report is not None:
            phrases = list(caption_report.objects_only_in_b) + list(
                caption_report.vegetation_changed_b
            )
        with torch.no_grad():
            logits = self.forward(
                image_to_tensor(pair.image_t0),
                image_to_tensor(pair.image_t1),
                phrases=phrases,
                text_encoder=text_encoder,
            )
            labels = logits.argmax(dim=1)[0].to(torch.uint8).numpy()
        return ChangeMask(labels, num_classes=self.spec.num_classes)

    # -- persistence -------------------------------------------------------

    def trainable_parameters(self):
        """Enhancer, merge, and head parameters; the encoder stays frozen."""
        modules = [self.merge, self.head]
        if self.enhancer is not None:
            modules.append(self.enhancer)
        for m in modules:
            yield from m.parameters()

    def encoder_fingerprint(self) -> str:
        if isinstance(self.encoder, nn.Module):
            return state_fingerprint(dict(self.encoder.state_dict()))
        return "stateless-adapter"

    def save(self, path, extra_header: dict | None = None) -> None:
        header = {
            "kind": "detector",
            "spec": self.spec.to_json(),
            "has_enhancer": self.enhancer is not None,
        }
        if self.enhancer is not None:
            header["enhancer_config"] = self.enhancer.config.to_json()
        if extra_header:
            header.update(extra_header)
        save_tensor_archive(path, dict(self.state_dict()), header=header)

    @classmethod
    def load(cls, path, encoder: object | None = None) -> "ChangeDetector":
        tensors, header = load_tensor_archive(path)
        if header.get("kind") != "detector":
            raise ConfigError(f"{path} is not a detector checkpoint")
        spec = BackboneSpec.from_json(header["spec"])
        enhancer = None
        if header.get("has_enhancer"):
            from .enhancer import EnhancerConfig

            enhancer = CrossModalEnhancer(
                EnhancerConfig.from_json(header["enhancer_config"])
            )
        model = cls(spec, enhancer=enhancer, encoder=encoder)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        check_shapes(tensors, expected)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
        return model


class _NullTextEncoder:
    def encode(self, text: str) -> torch.Tensor:  # pragma: no cover - guard only
        raise ConfigError(
            "detector has an enhancer but no text encoder was provided; "
            "captions cannot be embedded"
        )


_NULL_ENCODER = _NullTextEncoder()


def predicted_classes(mask: ChangeMask) -> set[int]:
    return {int(c) for c in mask.present_classes()}


__all__ = [
    "BackboneSpec",
    "ChangeDetector",
    "DEFAULT_BINARY_WEIGHTS",
    "EncoderAdapter",
    "ToyEncoder",
    "ToyMerge",
    "ToySegmentationHead",
    "image_to_tensor",
    "mask_to_target",
    "predicted_classes",
    "weighted_pixel_cross_entropy",
]
