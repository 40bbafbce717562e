"""Cross-modal feature enhancer.

Projects a backbone feature grid into tokens, encodes the change caption
into text tokens, runs both through a stack of enhancement layers
(deformable self-attention on the image side, vanilla self-attention on
the text side, bidirectional per-token cross-attention, feed-forward
blocks), and unprojects the enhanced image tokens back to a feature grid.

All sublayers are pre-norm residual. Cross-attention output projections
start at zero by default, so an untrained enhancer perturbs the visual
path only through its self-attention; training opens the text pathway
gradually.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, EncoderUnavailable, NumericalError, ShapeError
from .storage import (
    check_shapes,
    load_tensor_archive,
    save_tensor_archive,
    state_fingerprint,
)


@dataclass(frozen=True)
class EnhancerConfig:
    num_layers: int = 6
    fusion_dim: int = 256
    text_input_dim: int = 768
    num_heads: int = 8
    deformable_points: int = 4
    seed: int = 0
    image_channels: int = 384
    grid_height: int = 36
    grid_width: int = 36
    ffn_dim: int | None = None
    norm_groups: int | None = None
    project_norm: bool = True
    zero_init_cross_attention: bool = True

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.fusion_dim % self.num_heads:
            raise ConfigError(
                f"fusion_dim {self.fusion_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.deformable_points < 1:
            raise ConfigError("deformable_points must be >= 1")
        if self.norm_groups is not None and self.fusion_dim % self.norm_groups:
            raise ConfigError("norm_groups must divide fusion_dim")

    @property
    def resolved_ffn_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.fusion_dim

    @property
    def resolved_norm_groups(self) -> int:
        if self.norm_groups is not None:
            return self.norm_groups
        return math.gcd(32, self.fusion_dim)

    def to_json(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "fusion_dim": self.fusion_dim,
            "text_input_dim": self.text_input_dim,
            "num_heads": self.num_heads,
            "deformable_points": self.deformable_points,
            "seed": self.seed,
            "image_channels": self.image_channels,
            "grid_height": self.grid_height,
            "grid_width": self.grid_width,
            "ffn_dim": self.ffn_dim,
            "norm_groups": self.norm_groups,
            "project_norm": self.project_norm,
            "zero_init_cross_attention": self.zero_init_cross_attention,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EnhancerConfig":
        return cls(**payload)


@dataclass
class FeatureGrid:
    """Spatial feature map, shape (batch, channels, height, width)."""

    values: torch.Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4:
            raise ShapeError(f"feature grid must be 4-D, got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise NumericalError("feature grid contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


@dataclass
class TokenSequence:
    """Token view of one modality, shape (batch, length, dim)."""

    values: torch.Tensor
    kind: str
    grid_hw: tuple[int, int] | None = None
    null_text: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("image", "text"):
            raise ConfigError(f"kind must be image or text, got {self.kind!r}")
        if self.values.ndim != 3:
            raise ShapeError(f"token tensor must be 3-D, got {tuple(self.values.shape)}")
        if self.kind == "image":
            if self.grid_hw is None:
                raise ConfigError("image token sequences need grid_hw")
            h, w = self.grid_hw
            if h * w != self.values.shape[1]:
                raise ShapeError(
                    f"grid {h}x{w} has {h * w} cells but sequence length is "
                    f"{self.values.shape[1]}"
                )

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


class TextEncoderAdapter(Protocol):
    """Frozen language model producing final-hidden-layer token embeddings."""

    def encode(self, text: str) -> torch.Tensor:
        """Return (num_tokens, embedding_dim) for one description string."""
        ...


def _init_linear(linear: nn.Linear, generator: torch.Generator) -> None:
    fan_in, fan_out = linear.in_features, linear.out_features
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        if linear.bias is not None:
            linear.bias.zero_()


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention with explicit projections.

    Written out by hand (rather than nn.MultiheadAttention) so tests can
    inspect per-head attention rows and the output projection can be
    zero-initialized for the cross-modal path.
    """

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self, query: torch.Tensor, key_value: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if key_value is None:
            key_value = query
        b, nq, d = query.shape
        nk = key_value.shape[1]
        h, hd = self.num_heads, self.head_dim
        q = self.q_proj(query).view(b, nq, h, hd).transpose(1, 2)
        k = self.k_proj(key_value).view(b, nk, h, hd).transpose(1, 2)
        v = self.v_proj(key_value).view(b, nk, h, hd).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(hd)
        attn = torch.softmax(scores, dim=-1)  # (b, h, nq, nk)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out), attn


class DeformableSelfAttention(nn.Module):
    """Single-scale deformable attention over image tokens.

    Each query predicts per-head sampling offsets around its own grid
    position plus a softmax-normalized weight per sampling point; values
    are gathered by bilinear interpolation.
    """

    def __init__(self, dim: int, num_heads: int, num_points: int) -> None:
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.num_points = num_points
        self.head_dim = dim // num_heads
        self.sampling_offsets = nn.Linear(dim, num_heads * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)

    def reset_offsets(self) -> None:
        """Point the initial samples at a per-head ring of unit offsets."""
        with torch.no_grad():
            self.sampling_offsets.weight.zero_()
            thetas = torch.arange(self.num_heads, dtype=torch.float64) * (
                2.0 * math.pi / self.num_heads
            )
            directions = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
            directions = directions / directions.abs().max(dim=-1, keepdim=True).values
            bias = directions.view(self.num_heads, 1, 2).repeat(1, self.num_points, 1)
            for p in range(self.num_points):
                bias[:, p, :] *= p + 1
            self.sampling_offsets.bias.copy_(bias.flatten().to(torch.float32))
            self.attention_weights.weight.zero_()
            self.attention_weights.bias.zero_()

    @staticmethod
    def reference_points(
        h: int, w: int, device: torch.device, dtype: torch.dtype
    ) -> torch.Tensor:
        """Normalized (x, y) centers of the grid cells, row-major."""
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)  # (h*w, 2)

    def forward(
        self, x: torch.Tensor, grid_hw: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h, w = grid_hw
        if h * w != n:
            raise ShapeError(f"{n} tokens do not tile a {h}x{w} grid")
        heads, points = self.num_heads, self.num_points
        value = self.value_proj(x).view(b, n, heads, self.head_dim)
        offsets = self.sampling_offsets(x).view(b, n, heads, points, 2)
        weights = torch.softmax(
            self.attention_weights(x).view(b, n, heads, points), dim=-1
        )
        ref = self.reference_points(h, w, x.device, x.dtype).view(1, n, 1, 1, 2)
        scale = torch.tensor([w, h], device=x.device, dtype=x.dtype)
        locations = ref + offsets / scale  # normalized (x, y) in [0, 1] ideally
        # Gather by bilinear sampling, one plane per head.
        value_planes = (
            value.permute(0, 2, 3, 1).reshape(b * heads, self.head_dim, h, w)
        )
        grid = (
            locations.permute(0, 2, 1, 3, 4).reshape(b * heads, n, points, 2) * 2.0
            - 1.0
        )
        sampled = F.grid_sample(
            value_planes,
            grid,
            mode="bilinear",
            padding_mode="zeros",
            align_corners=False,
        )  # (b*heads, head_dim, n, points)
        weights_flat = weights.permute(0, 2, 1, 3).reshape(b * heads, 1, n, points)
        mixed = (sampled * weights_flat).sum(dim=-1)  # (b*heads, head_dim, n)
        out = (
            mixed.view(b, heads, self.head_dim, n).permute(0, 3, 1, 2).reshape(b, n, d)
        )
        return self.output_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class EnhancerLayer(nn.Module):
    def __init__(self, cfg: EnhancerConfig) -> None:
        super().__init__()
        d = cfg.fusion_dim
        self.image_self = DeformableSelfAttention(
            d, cfg.num_heads, cfg.deformable_points
        )
        self.text_self = MultiHeadAttention(d, cfg.num_heads)
        self.image_from_text = MultiHeadAttention(d, cfg.num_heads)
        self.text_from_image = MultiHeadAttention(d, cfg.num_heads)
        self.image_ffn = FeedForward(d, cfg.resolved_ffn_dim)
        self.text_ffn = FeedForward(d, cfg.resolved_ffn_dim)
        self.norm_img_self = nn.LayerNorm(d)
        self.norm_img_cross = nn.LayerNorm(d)
        self.norm_img_ffn = nn.LayerNorm(d)
        self.norm_txt_self = nn.LayerNorm(d)
        self.norm_txt_cross = nn.LayerNorm(d)
        self.norm_txt_ffn = nn.LayerNorm(d)
        self.norm_txt_memory = nn.LayerNorm(d)
        self.norm_img_memory = nn.LayerNorm(d)

    def forward(
        self,
        img: torch.Tensor,
        txt: torch.Tensor,
        grid_hw: tuple[int, int],
        disable_cross: bool = False,
        collect: dict | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        sampled, sample_weights = self.image_self(self.norm_img_self(img), grid_hw)
        img = img + sampled
        txt_attended, txt_self_weights = self.text_self(self.norm_txt_self(txt))
        txt = txt + txt_attended
        if not disable_cross:
            img_gain, img_from_txt_w = self.image_from_text(
                self.norm_img_cross(img), self.norm_txt_memory(txt)
            )
            txt_gain, txt_from_img_w = self.text_from_image(
                self.norm_txt_cross(txt), self.norm_img_memory(img)
            )
            img = img + img_gain
            txt = txt + txt_gain
            if collect is not None:
                collect["image_from_text"] = img_from_txt_w
                collect["text_from_image"] = txt_from_img_w
        img = img + self.image_ffn(self.norm_img_ffn(img))
        txt = txt + self.text_ffn(self.norm_txt_ffn(txt))
        if collect is not None:
            collect["image_sampling"] = sample_weights
            collect["text_self"] = txt_self_weights
        return img, txt


class CrossModalEnhancer(nn.Module):
    """The full enhancer: projections, text encoding, and the layer stack."""

    def __init__(self, config: EnhancerConfig) -> None:
        super().__init__()
        self.config = config
        d = config.fusion_dim
        self.image_in = nn.Conv2d(config.image_channels, d, kernel_size=1)
        self.image_norm = (
            nn.GroupNorm(config.resolved_norm_groups, d)
            if config.project_norm
            else nn.Identity()
        )
        self.image_out = nn.Conv2d(d, config.image_channels, kernel_size=1)
        self.text_proj = nn.Linear(config.text_input_dim, d)
        self.null_text_token = nn.Parameter(torch.empty(1, 1, d))
        self.layers = nn.ModuleList(
            EnhancerLayer(config) for _ in range(config.num_layers)
        )
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        generator = torch.Generator().manual_seed(self.config.seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _init_linear(module, generator)
            elif isinstance(module, nn.Conv2d):
                fan_in = module.in_channels
                fan_out = module.out_channels
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.zero_()
        for layer in self.layers:
            layer.image_self.reset_offsets()
            if self.config.zero_init_cross_attention:
                with torch.no_grad():
                    layer.image_from_text.out_proj.weight.zero_()
                    layer.image_from_text.out_proj.bias.zero_()
                    layer.text_from_image.out_proj.weight.zero_()
                    layer.text_from_image.out_proj.bias.zero_()
        with torch.no_grad():
            self.null_text_token.uniform_(-0.02, 0.02, generator=generator)

    # -- text side ---------------------------------------------------------

    def encode_text(
        self, phrases: Sequence[str], text_encoder: TextEncoderAdapter
    ) -> TokenSequence:
        """Join phrases into one description and embed it to fusion width.

        An empty phrase list yields the learned null token (length 1) so
        downstream attention always has something to attend over.
        """
        phrases = [p.strip() for p in phrases if p and p.strip()]
        if not phrases:
            return TokenSequence(
                values=self.null_text_token.to(self.text_proj.weight.dtype),
                kind="text",
                null_text=True,
            )
        description = ". ".join(phrases)
        try:
            embedded = text_encoder.encode(description)
        except Exception as exc:
            raise EncoderUnavailable("text encoder failed") from exc
        embedded = torch.as_tensor(embedded, dtype=self.text_proj.weight.dtype)
        if embedded.ndim == 2:
            embedded = embedded.unsqueeze(0)
        if embedded.ndim != 3 or embedded.shape[-1] != self.config.text_input_dim:
            raise ShapeError(
                f"text encoder must return (tokens, {self.config.text_input_dim}), "
                f"got {tuple(embedded.shape)}"
            )
        return TokenSequence(values=self.text_proj(embedded), kind="text")

    # -- image side --------------------------------------------------------

    def project_image(self, grid: FeatureGrid) -> TokenSequence:
        """1x1 conv to fusion width, normalize, flatten row-major."""
        values = grid.values
        if values.shape[1] != self.config.image_channels:
            raise ShapeError(
                f"expected {self.config.image_channels} channels, "
                f"got {values.shape[1]}"
            )
        mapped = self.image_norm(self.image_in(values))
        b, d, h, w = mapped.shape
        tokens = mapped.flatten(2).transpose(1, 2)  # (b, h*w, d), index r*w + c
        return TokenSequence(values=tokens, kind="image", grid_hw=(h, w))

    def unproject_image(self, tokens: TokenSequence) -> FeatureGrid:
        """Inverse of the flatten, then 1x1 conv back to backbone channels."""
        if tokens.kind != "image":
            raise ConfigError("unproject_image expects image tokens")
        h, w = tokens.grid_hw
        b, n, d = tokens.values.shape
        if n != h * w:
            raise ShapeError(f"{n} tokens do not tile a {h}x{w} grid")
        planes = tokens.values.transpose(1, 2).reshape(b, d, h, w)
        return FeatureGrid(values=self.image_out(planes))

    # -- fusion ------------------------------------------------------------

    def enhance(
        self,
        image_tokens: TokenSequence,
        text_tokens: TokenSequence,
        disable_cross_attention: bool = False,
        return_attention: bool = False,
    ):
        """Run the layer stack; shapes are preserved on both modalities."""
        if image_tokens.kind != "image" or text_tokens.kind != "text":
            raise ConfigError("enhance expects (image tokens, text tokens)")
        if image_tokens.batch != text_tokens.batch:
            raise ShapeError(
                f"batch mismatch: {image_tokens.batch} vs {text_tokens.batch}"
            )
        if image_tokens.dim != text_tokens.dim:
            raise ShapeError(f"dim mismatch: {image_tokens.dim} vs {text_tokens.dim}")
        if image_tokens.dim != self.config.fusion_dim:
            raise ShapeError(
                f"tokens at dim {image_tokens.dim}, enhancer at "
                f"{self.config.fusion_dim}"
            )
        img, txt = image_tokens.values, text_tokens.values
        attention: list[dict] = []
        for layer in self.layers:
            collect: dict | None = {} if return_attention else None
            img, txt = layer(
                img,
                txt,
                image_tokens.grid_hw,
                disable_cross=disable_cross_attention,
                collect=collect,
            )
            if not torch.isfinite(img).all() or not torch.isfinite(txt).all():
                raise NumericalError("non-finite activations in enhancer layer")
            if return_attention:
                attention.append(collect)
        img_seq = TokenSequence(values=img, kind="image", grid_hw=image_tokens.grid_hw)
        txt_seq = TokenSequence(
            values=txt, kind="text", null_text=text_tokens.null_text
        )
        if return_attention:
            return img_seq, txt_seq, attention
        return img_seq, txt_seq

    def enhance_grid(
        self,
        grid: FeatureGrid,
        phrases: Sequence[str],
        text_encoder: TextEncoderAdapter,
    ) -> FeatureGrid:
        """Convenience path: grid + caption phrases -> enhanced grid."""
        tokens = self.project_image(grid)
        text = self.encode_text(phrases, text_encoder)
        if text.batch == 1 and tokens.batch > 1:
            text = TokenSequence(
                values=text.values.expand(tokens.batch, -1, -1),
                kind="text",
                null_text=text.null_text,
            )
        enhanced, _ = self.enhance(tokens, text)
        return self.unproject_image(enhanced)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        save_tensor_archive(
            path,
            dict(self.state_dict()),
            header={"kind": "enhancer", "config": self.config.to_json()},
        )

    @classmethod
    def load(cls, path) -> "CrossModalEnhancer":
        tensors, header = load_tensor_archive(path)
        if header.get("kind") != "enhancer":
            raise ConfigError(f"{path} is not an enhancer checkpoint")
        config = EnhancerConfig.from_json(header["config"])
        model = cls(config)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        check_shapes(tensors, expected)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return model

    def fingerprint(self) -> str:
        return state_fingerprint(dict(self.state_dict()))
