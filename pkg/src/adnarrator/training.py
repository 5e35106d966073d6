"""Objectives and training loops.

The narrator's trainable set is exactly the visual mapping networks (both
projections included); LM and character refiner stay frozen. The loss is
autoregressive NLL of the target description plus a hinge that forces the
previous movie description to score below the current ground truth under
the current prompt, both scores teacher-forced and length-normalized.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .data import ADRecord, Movie, MovieDataset, derive_refinement_labels
from .errors import NumericError, ValidationError
from .lm import ToyCausalLM, sequence_logprob, tokenize
from .mapper import VisualMappers
from .prompt import PromptSequence, PromptTemplate, build_prompt
from .refiner import CharacterRefiner, refinement_bce_loss, score_characters


@dataclass
class TrainingConfig:
    batch_size: int = 96
    learning_rate: float = 1e-3
    epochs: int = 10
    warmup_fraction: float = 0.05
    context_depth: int = 1  # K past clips fed to the video mapper
    use_context_ads: bool = False
    use_contrastive: bool = True
    oracle_characters: bool = False
    seed: int = 0
    weight_decay: float = 0.01
    max_target_len: int = 96

    def __post_init__(self):
        if self.context_depth < 0:
            raise ValidationError("context_depth must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValidationError("warmup_fraction must lie in [0, 1)")


@dataclass
class LossBreakdown:
    auto: float
    contrastive: float

    @property
    def total(self) -> float:
        return self.auto + self.contrastive


def learning_rate_at(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup to `peak`, then cosine decay reaching 0 at `total_steps`."""
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    warmup = round(warmup_fraction * total_steps)
    if step < warmup:
        return peak * (step + 1) / warmup
    if total_steps == warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def autoregressive_loss(lm: ToyCausalLM, prompt: PromptSequence, target_ids: Sequence[int]) -> torch.Tensor:
    """Negative sum of teacher-forced log-probabilities over the target tokens."""
    if len(target_ids) == 0:
        raise ValidationError("autoregressive_loss needs a non-empty target")
    return -sequence_logprob(lm, prompt, target_ids).sum()


def sequence_score(lm: ToyCausalLM, prompt: PromptSequence, ad_text: str) -> torch.Tensor:
    """Length-normalized teacher-forced log-likelihood of `ad_text`; always <= 0."""
    ids = tokenize(ad_text)
    if not ids:
        raise ValidationError("sequence_score needs non-empty text")
    return sequence_logprob(lm, prompt, ids).mean()


def contrastive_loss(s_last, s_current) -> torch.Tensor:
    """Hinge max(0, s_last - s_current); zero for a movie's first description."""
    s_last = torch.as_tensor(s_last)
    s_current = torch.as_tensor(s_current)
    if not (torch.isfinite(s_last) and torch.isfinite(s_current)):
        raise NumericError("contrastive_loss requires finite scores")
    return torch.clamp(s_last - s_current, min=0.0)


# ---------------------------------------------------------------------------
# Narrator training
# ---------------------------------------------------------------------------


@dataclass
class TrainingPair:
    """One clip/description supervision pair with its conditioning context."""

    movie: Movie
    ad: ADRecord
    characters: list  # CharacterEntry conditioning, already refined or oracle
    past_clip_ids: list[str]
    context_ad_texts: list[str]
    previous_text: Optional[str]  # previous AD in the movie, None for the first


def conditioning_characters(
    movie: Movie,
    ad: ADRecord,
    aliases: dict[str, str],
    oracle: bool,
    refiner: Optional[CharacterRefiner],
    threshold: float = 0.5,
) -> list:
    """Characters fed to the prompt: annotation-derived when oracle, else refined."""
    entries = movie.bank.entries
    if not entries:
        return []
    if oracle:
        labels = derive_refinement_labels(ad, movie.bank, aliases)
        related = {l.character_name for l in labels if l.ad_related}
        return [e for e in entries if e.character_name in related]
    if refiner is None:
        return list(entries)
    for e in entries:
        if e.exemplar_feature is None:
            raise ValidationError(
                f"character {e.character_name!r} has no exemplar; populate exemplars first"
            )
    clip = movie.clip(ad.clip_id)
    import numpy as np

    exemplars = np.stack([e.exemplar_feature for e in entries])
    probs = score_characters(refiner, exemplars, clip.features.values)
    return [e for e, p in zip(entries, probs.tolist()) if p > threshold]


def build_training_pairs(
    dataset: MovieDataset,
    config: TrainingConfig,
    refiner: Optional[CharacterRefiner] = None,
) -> list[TrainingPair]:
    pairs = []
    for movie in dataset.movies.values():
        for i, ad in enumerate(movie.ads):
            past = movie.ads[max(0, i - config.context_depth) : i]
            pairs.append(
                TrainingPair(
                    movie=movie,
                    ad=ad,
                    characters=conditioning_characters(
                        movie, ad, dataset.aliases, config.oracle_characters, refiner
                    ),
                    past_clip_ids=[p.clip_id for p in past],
                    context_ad_texts=[p.text for p in past] if config.use_context_ads else [],
                    previous_text=movie.ads[i - 1].text if i > 0 else None,
                )
            )
    return pairs


def assemble_prompt(
    pair: TrainingPair,
    mappers: VisualMappers,
    lm: ToyCausalLM,
    template: PromptTemplate = PromptTemplate(),
    context_ad_texts: Optional[list[str]] = None,
) -> PromptSequence:
    """Build the interleaved prompt for one pair, truncating on context overflow.

    Overflow drops context descriptions first (oldest first), then past
    clips (oldest first); the current clip and target are never dropped.
    """
    clip = pair.movie.clip(pair.ad.clip_id)
    context_texts = list(pair.context_ad_texts if context_ad_texts is None else context_ad_texts)
    past_ids = list(pair.past_clip_ids)
    target_len = len(tokenize(pair.ad.text)) + 1
    while True:
        past = [pair.movie.clip(cid).features.values for cid in past_ids]
        video = mappers.map_with_context(past, clip.features.values)
        char_embs = mappers.map_characters([e.exemplar_feature for e in pair.characters])
        prompt = build_prompt(
            list(zip(pair.characters, char_embs)), video, context_texts, template
        )
        length = _prompt_length(prompt, lm) + target_len
        if length <= lm.profile.context_limit:
            return prompt
        if context_texts:
            context_texts.pop(0)
        elif past_ids:
            past_ids.pop(0)
        else:
            raise ValidationError(
                f"AD {pair.ad.ad_id!r}: prompt plus target ({length} positions) "
                f"cannot fit the context limit {lm.profile.context_limit}"
            )


def _prompt_length(prompt: PromptSequence, lm: ToyCausalLM) -> int:
    n = 1  # BOS
    for seg in prompt.segments:
        n += len(tokenize(seg.text)) if seg.kind == "text" else seg.embeddings.shape[0]
    return n


def pair_loss(
    pair: TrainingPair,
    mappers: VisualMappers,
    lm: ToyCausalLM,
    use_contrastive: bool,
    template: PromptTemplate = PromptTemplate(),
) -> tuple[torch.Tensor, torch.Tensor]:
    """(auto, contrastive) loss terms for one pair, as differentiable scalars."""
    prompt = assemble_prompt(pair, mappers, lm, template)
    target = tokenize(pair.ad.text) + [lm.profile.eos_id]
    logprobs = sequence_logprob(lm, prompt, target)
    auto = -logprobs.sum()
    if use_contrastive and pair.previous_text:
        s_current = logprobs[:-1].mean()  # score over the text tokens, EOS excluded
        s_last = sequence_score(lm, prompt, pair.previous_text)
        ct = contrastive_loss(s_last, s_current)
    else:
        ct = torch.zeros((), dtype=auto.dtype)
    return auto, ct


@dataclass
class TrainingLogRecord:
    step: int
    lr: float
    auto: float
    contrastive: float
    total: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "lr": self.lr,
                "auto": self.auto,
                "contrastive": self.contrastive,
                "total": self.total,
                "wall_time": self.wall_time,
            }
        )


def train_narrator(
    dataset: MovieDataset,
    mappers: VisualMappers,
    lm: ToyCausalLM,
    config: TrainingConfig,
    refiner: Optional[CharacterRefiner] = None,
    log_path: Optional[str | Path] = None,
    checkpoint_fn: Optional[Callable[[int, VisualMappers], None]] = None,
    max_steps: Optional[int] = None,
) -> list[TrainingLogRecord]:
    """Optimize the mapping networks; LM and refiner are never touched.

    AdamW with decoupled weight decay, linear warmup + cosine decay.
    Deterministic for a fixed seed. Raises on the first non-finite loss,
    naming the offending batch.
    """
    pairs = build_training_pairs(dataset, config, refiner)
    if not pairs:
        raise ValidationError("no training pairs: dataset has no ADs")
    optimizer = torch.optim.AdamW(
        [p for p in mappers.parameters() if p.requires_grad],
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )
    batches_per_epoch = max(1, math.ceil(len(pairs) / config.batch_size))
    total_steps = config.epochs * batches_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    rng = torch.Generator().manual_seed(config.seed)
    records: list[TrainingLogRecord] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    started = time.monotonic()
    step = 0
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(len(pairs), generator=rng).tolist()
            for b in range(batches_per_epoch):
                if step >= total_steps:
                    break
                batch = [pairs[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                if not batch:
                    continue
                lr = learning_rate_at(step, total_steps, config.learning_rate, config.warmup_fraction)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                auto_sum = torch.zeros(())
                ct_sum = torch.zeros(())
                for pair in batch:
                    auto, ct = pair_loss(pair, mappers, lm, config.use_contrastive)
                    auto_sum = auto_sum + auto
                    ct_sum = ct_sum + ct
                loss = (auto_sum + ct_sum) / len(batch)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} batch {b} "
                        f"(ads {[p.ad.ad_id for p in batch]})"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                record = TrainingLogRecord(
                    step=step,
                    lr=lr,
                    auto=float(auto_sum) / len(batch),
                    contrastive=float(ct_sum) / len(batch),
                    total=float(loss),
                    wall_time=time.monotonic() - started,
                )
                records.append(record)
                if log_file:
                    log_file.write(record.to_json() + "\n")
                step += 1
            if checkpoint_fn:
                checkpoint_fn(epoch, mappers)
            if step >= total_steps:
                break
    finally:
        if log_file:
            log_file.close()
    return records


# ---------------------------------------------------------------------------
# Refiner training
# ---------------------------------------------------------------------------


@dataclass
class RefinerTrainingConfig:
    learning_rate: float = 1e-3
    steps: int = 300
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.01


def train_refiner(
    dataset: MovieDataset,
    refiner: CharacterRefiner,
    config: RefinerTrainingConfig,
    log_path: Optional[str | Path] = None,
) -> list[dict]:
    """Fit the refinement classifier on annotation-derived labels."""
    examples = []  # (exemplars C x D, clip frames, labels C)
    import numpy as np

    for movie in dataset.movies.values():
        entries = movie.bank.entries
        if not entries:
            continue
        for e in entries:
            if e.exemplar_feature is None:
                raise ValidationError(
                    f"character {e.character_name!r} has no exemplar; populate exemplars first"
                )
        exemplars = np.stack([e.exemplar_feature for e in entries])
        for ad in movie.ads:
            labels = derive_refinement_labels(ad, movie.bank, dataset.aliases)
            examples.append(
                (
                    exemplars,
                    movie.clip(ad.clip_id).features.values,
                    torch.tensor([l.ad_related for l in labels], dtype=torch.get_default_dtype()),
                )
            )
    if not examples:
        raise ValidationError("no refiner training examples: dataset has no character banks")
    optimizer = torch.optim.AdamW(
        refiner.parameters(),
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )
    rng = torch.Generator().manual_seed(config.seed)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    records = []
    started = time.monotonic()
    try:
        for step in range(config.steps):
            idx = torch.randint(0, len(examples), (config.batch_size,), generator=rng).tolist()
            loss = torch.zeros(())
            for i in idx:
                exemplars, frames, labels = examples[i]
                probs = score_characters(refiner, exemplars, frames)
                loss = loss + refinement_bce_loss(probs, labels)
            loss = loss / len(idx)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite refiner loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            record = {
                "step": step,
                "lr": config.learning_rate,
                "bce": float(loss),
                "wall_time": time.monotonic() - started,
            }
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    return records
