"""Visual mapping network: learnable latent vectors + transformer encoder.

Frame features are projected to the LM channel width, concatenated after a
fixed set of M learnable latent vectors, and run through a small full
self-attention encoder; the post-encoder states of the M latent positions
are the visual embeddings handed to the LM. Character exemplars go through
the same architecture one vector at a time (a separate network by default,
the same one when `share_networks` is set). Context clips are supported by
concatenating past and current frames in temporal order before mapping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .modules import SelfAttentionBlock, check_finite, init_module


@dataclass(frozen=True)
class MapperConfig:
    input_dim: int
    d_lm: int = 768
    num_latent: int = 30
    num_blocks: int = 2
    num_heads: int = 12
    ffn_dim: int = 3072
    max_frames: int = 512
    use_positional: bool = True
    share_networks: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.d_lm % self.num_heads != 0:
            raise ValidationError(
                f"d_lm {self.d_lm} must be divisible by num_heads {self.num_heads}"
            )
        if self.num_latent < 1 or self.num_blocks < 1:
            raise ValidationError("num_latent and num_blocks must be >= 1")
        if self.input_dim < 1:
            raise ValidationError("input_dim must be >= 1")

    @classmethod
    def small_profile(cls, input_dim: int = 512, **overrides) -> "MapperConfig":
        """GPT-2 scale: 512->768 projection, 30 latents, 2 blocks, 12 heads."""
        return cls(input_dim=input_dim, **overrides)

    @classmethod
    def large_profile(cls, input_dim: int = 768, **overrides) -> "MapperConfig":
        """LLaMA scale: 768->4096 projection, 32 heads, 16384 FFN."""
        return cls(
            input_dim=input_dim, d_lm=4096, num_heads=32, ffn_dim=16384, **overrides
        )

    @classmethod
    def toy_profile(cls, input_dim: int = 16, **overrides) -> "MapperConfig":
        """Reduced profile for desk-scale training and gradient checks."""
        return cls(
            input_dim=input_dim, d_lm=64, num_latent=6, num_heads=4, ffn_dim=128,
            **overrides,
        )

    def with_options(self, **overrides) -> "MapperConfig":
        return replace(self, **overrides)


class VisualMapper(nn.Module):
    """One mapping network: projection, latents, encoder blocks."""

    def __init__(self, config: MapperConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        self.projection = nn.Linear(config.input_dim, config.d_lm)
        self.latents = nn.Parameter(torch.empty(config.num_latent, config.d_lm))
        if config.use_positional:
            self.positional = nn.Parameter(torch.empty(config.max_frames, config.d_lm))
        else:
            self.positional = None
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.d_lm, config.num_heads, config.ffn_dim)
            for _ in range(config.num_blocks)
        )
        self.out_norm = nn.LayerNorm(config.d_lm)
        gen = init_module(self, config.init_seed if seed is None else seed)
        with torch.no_grad():
            self.latents.normal_(0.0, 0.02, generator=gen)
            if self.positional is not None:
                self.positional.normal_(0.0, 0.02, generator=gen)

    def _as_input(self, features) -> torch.Tensor:
        if isinstance(features, np.ndarray):
            features = torch.from_numpy(np.ascontiguousarray(features))
        features = features.to(self.projection.weight.dtype)
        if features.ndim != 2:
            raise ValidationError(f"expected (frames, dim) input, got shape {tuple(features.shape)}")
        if features.shape[0] < 1:
            raise ValidationError("need at least one input frame")
        if features.shape[1] != self.config.input_dim:
            raise ValidationError(
                f"input dim {features.shape[1]} != configured {self.config.input_dim}"
            )
        return features

    def project(self, features) -> torch.Tensor:
        """Row-wise affine map from encoder space to the LM channel width."""
        return self.projection(self._as_input(features))

    def forward(self, features) -> torch.Tensor:
        features = self._as_input(features)
        f = features.shape[0]
        x = self.projection(features)
        if self.positional is not None:
            if f > self.config.max_frames:
                raise ValidationError(
                    f"{f} frames exceed positional table of {self.config.max_frames}"
                )
            x = x + self.positional[:f]
        seq = torch.cat([self.latents, x], dim=0)
        for i, block in enumerate(self.blocks):
            seq = check_finite(block(seq), f"mapper block {i}")
        return self.out_norm(seq)[: self.config.num_latent]


class VisualMappers(nn.Module):
    """The trainable pair of mapping networks (video and image).

    With `share_networks` a single network encodes both streams. The
    parameters of this module are exactly the narrator's trainable set.
    """

    def __init__(self, config: MapperConfig):
        super().__init__()
        self.config = config
        self.video = VisualMapper(config, seed=config.init_seed)
        if config.share_networks:
            self.image = self.video
        else:
            self.image = VisualMapper(config, seed=config.init_seed + 1)

    def map_visual(self, features) -> torch.Tensor:
        """Map one clip's frames to M visual embeddings, shape (M, d_lm)."""
        return self.video(features)

    def map_characters(self, exemplars: Sequence) -> list[torch.Tensor]:
        """Map each exemplar independently (no cross-character interaction)."""
        out = []
        for e in exemplars:
            e = np.asarray(e, dtype=np.float32).reshape(1, -1) if not isinstance(e, torch.Tensor) else e.reshape(1, -1)
            out.append(self.image(e))
        return out

    def map_with_context(self, past_clips: Sequence, current) -> torch.Tensor:
        """Concatenate past-K frames with the current clip, temporal order, then map.

        With no past clips this is exactly `map_visual(current)`.
        """
        parts = [self.video._as_input(p) for p in past_clips]
        parts.append(self.video._as_input(current))
        return self.video(torch.cat(parts, dim=0) if len(parts) > 1 else parts[0])
