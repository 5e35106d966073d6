"""Character-refinement module.

A stack of cross-attention + feed-forward blocks scores each candidate
character's probability of being description-related: exemplar features
are the queries, clip frame features the keys and values, and a single
logit head with sigmoid produces the probability. Characters above the
threshold (default 0.5) are kept. Each query attends only to the video,
so scores are independent across characters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import CharacterBank, CharacterEntry, MovieDataset, VideoClip, derive_refinement_labels
from .errors import ValidationError
from .modules import CrossAttentionBlock, check_finite, init_module

_EPS = 1e-12


@dataclass(frozen=True)
class RefineConfig:
    input_dim: int
    channel: int = 768
    num_blocks: int = 3
    num_heads: int = 12
    ffn_dim: int = 3072
    threshold: float = 0.5
    init_seed: int = 0

    def __post_init__(self):
        if self.channel % self.num_heads != 0:
            raise ValidationError(
                f"channel {self.channel} must be divisible by num_heads {self.num_heads}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie strictly in (0, 1), got {self.threshold}")

    @classmethod
    def toy_profile(cls, input_dim: int = 16, **overrides) -> "RefineConfig":
        return cls(input_dim=input_dim, channel=64, num_blocks=2, num_heads=4, ffn_dim=128, **overrides)

    def with_options(self, **overrides) -> "RefineConfig":
        return replace(self, **overrides)


class CharacterRefiner(nn.Module):
    def __init__(self, config: RefineConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.channel)
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(config.channel, config.num_heads, config.ffn_dim)
            for _ in range(config.num_blocks)
        )
        self.out_norm = nn.LayerNorm(config.channel)
        self.head = nn.Linear(config.channel, 1)
        init_module(self, config.init_seed)

    def forward(self, exemplars: torch.Tensor, clip_features: torch.Tensor) -> torch.Tensor:
        """Per-character probabilities, shape (C,). Inputs (C, D) and (F, D)."""
        if exemplars.ndim != 2 or clip_features.ndim != 2:
            raise ValidationError("expected 2-D exemplars and clip features")
        if exemplars.shape[0] < 1 or clip_features.shape[0] < 1:
            raise ValidationError("need at least one exemplar and one frame")
        if exemplars.shape[1] != self.config.input_dim or clip_features.shape[1] != self.config.input_dim:
            raise ValidationError(
                f"feature dim mismatch: got {exemplars.shape[1]}/{clip_features.shape[1]}, "
                f"configured {self.config.input_dim}"
            )
        q = self.input_proj(exemplars)
        kv = self.input_proj(clip_features)
        for i, block in enumerate(self.blocks):
            q = check_finite(block(q, kv), f"refiner block {i}")
        logits = self.head(self.out_norm(q)).squeeze(-1)
        return torch.sigmoid(logits)


def score_characters(refiner: CharacterRefiner, exemplars, clip_features) -> torch.Tensor:
    dtype = refiner.head.weight.dtype
    if not isinstance(exemplars, torch.Tensor):
        exemplars = torch.from_numpy(np.ascontiguousarray(exemplars))
    if not isinstance(clip_features, torch.Tensor):
        clip_features = torch.from_numpy(np.ascontiguousarray(clip_features))
    return refiner(exemplars.to(dtype), clip_features.to(dtype))


def refine(
    bank: CharacterBank,
    clip: VideoClip,
    refiner: CharacterRefiner,
    threshold: Optional[float] = None,
) -> list[CharacterEntry]:
    """Entries whose probability exceeds the threshold, bank order preserved."""
    if not bank.entries:
        return []
    for e in bank.entries:
        if e.exemplar_feature is None:
            raise ValidationError(
                f"character {e.character_name!r} has no exemplar; populate exemplars first"
            )
    threshold = refiner.config.threshold if threshold is None else threshold
    exemplars = np.stack([e.exemplar_feature for e in bank.entries])
    with torch.no_grad():
        probs = score_characters(refiner, exemplars, clip.features.values)
    return [e for e, p in zip(bank.entries, probs.tolist()) if p > threshold]


def refinement_bce_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with clamped logs; zero iff exact match."""
    if probabilities.numel() == 0:
        raise ValidationError("refinement_bce_loss needs at least one probability")
    if probabilities.shape != labels.shape:
        raise ValidationError(
            f"probabilities {tuple(probabilities.shape)} and labels "
            f"{tuple(labels.shape)} must align"
        )
    y = labels.to(probabilities.dtype)
    p = probabilities
    return -(
        y * torch.log(torch.clamp(p, min=_EPS))
        + (1.0 - y) * torch.log(torch.clamp(1.0 - p, min=_EPS))
    ).mean()


def evaluate_refiner(
    dataset: MovieDataset,
    refiner: CharacterRefiner,
    threshold: Optional[float] = None,
) -> tuple[Optional[float], Optional[float]]:
    """Micro-averaged precision and recall of thresholded predictions.

    Predictions are scored against annotation-derived labels. Precision is
    None when nothing was predicted positive; recall is None when no
    positive labels exist.
    """
    threshold = refiner.config.threshold if threshold is None else threshold
    tp = fp = fn = 0
    with torch.no_grad():
        for movie in dataset.movies.values():
            entries = movie.bank.entries
            if not entries:
                continue
            exemplars = np.stack([e.exemplar_feature for e in entries])
            for ad in movie.ads:
                labels = derive_refinement_labels(ad, movie.bank, dataset.aliases)
                probs = score_characters(
                    refiner, exemplars, movie.clip(ad.clip_id).features.values
                )
                for label, p in zip(labels, probs.tolist()):
                    predicted = p > threshold
                    if predicted and label.ad_related:
                        tp += 1
                    elif predicted:
                        fp += 1
                    elif label.ad_related:
                        fn += 1
    precision = tp / (tp + fp) if (tp + fp) else None
    recall = tp / (tp + fn) if (tp + fn) else None
    return precision, recall
