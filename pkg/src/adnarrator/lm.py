"""Frozen causal language model: contract, toy implementation, decoding.

The narrator only ever needs four things from its LM: embed token ids, run
a causal forward over a sequence of embeddings, expose its profile, and
stay frozen. ToyCausalLM implements that contract with a byte-level
vocabulary and two causal blocks; it is small enough for finite-difference
and overfit testing, and a real pretrained model can plug in behind the
same surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ContextOverflowError, ValidationError
from .modules import SelfAttentionBlock, check_finite, init_module
from .prompt import PromptSequence

NUM_BYTES = 256


@dataclass(frozen=True)
class LMProfile:
    vocab_size: int = NUM_BYTES + 3
    d_lm: int = 64
    context_limit: int = 512
    bos_id: int = 256
    eos_id: int = 257
    pad_id: int = 258

    def __post_init__(self):
        for name in ("bos_id", "eos_id", "pad_id"):
            if getattr(self, name) >= self.vocab_size:
                raise ValidationError(f"{name} must be < vocab_size {self.vocab_size}")


def tokenize(text: str) -> list[int]:
    """Byte-level ids; reversible for any UTF-8 string."""
    return list(text.encode("utf-8"))


def detokenize(ids: Sequence[int]) -> str:
    """Inverse of tokenize; special ids are dropped, stray bytes replaced."""
    return bytes(i for i in ids if i < NUM_BYTES).decode("utf-8", errors="replace")


@dataclass
class DecodingResult:
    token_ids: list[int]
    text: str
    avg_logprob: Optional[float]  # mean per-token log-probability, None if nothing emitted
    truncated: bool = False


class ToyCausalLM(nn.Module):
    """Deterministic byte-level causal LM, frozen at construction."""

    def __init__(
        self,
        profile: LMProfile = LMProfile(),
        num_blocks: int = 2,
        num_heads: int = 4,
        ffn_dim: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        self.profile = profile
        self.seed = seed
        d = profile.d_lm
        self.token_embedding = nn.Embedding(profile.vocab_size, d)
        self.positional = nn.Parameter(torch.empty(profile.context_limit, d))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(d, num_heads, ffn_dim, causal=True)
            for _ in range(num_blocks)
        )
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, profile.vocab_size)
        gen = init_module(self, seed)
        with torch.no_grad():
            self.positional.normal_(0.0, 0.02, generator=gen)
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)

    def embed_tokens(self, ids: Sequence[int]) -> torch.Tensor:
        if len(ids) == 0:
            return torch.zeros(0, self.profile.d_lm, dtype=self.token_embedding.weight.dtype)
        return self.token_embedding(torch.as_tensor(list(ids), dtype=torch.long))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Causal forward over (T, d_lm) embeddings; returns (T, vocab) logits."""
        t = embeddings.shape[0]
        if t == 0:
            raise ValidationError("cannot run the LM on an empty sequence")
        if t > self.profile.context_limit:
            raise ContextOverflowError(
                f"sequence of {t} positions exceeds context limit "
                f"{self.profile.context_limit}"
            )
        if embeddings.shape[1] != self.profile.d_lm:
            raise ValidationError(
                f"embedding width {embeddings.shape[1]} != d_lm {self.profile.d_lm}"
            )
        x = embeddings + self.positional[:t]
        for i, block in enumerate(self.blocks):
            x = check_finite(block(x), f"lm block {i}")
        return self.head(self.out_norm(x))


def embed_prompt(
    prompt: PromptSequence,
    lm: ToyCausalLM,
    target_ids: Optional[Sequence[int]] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Turn a prompt (plus optional teacher-forced targets) into LM inputs.

    Text spans become token embeddings, embedding spans pass through
    unchanged, and the BOS embedding is inserted at the prompt's BOS
    position. Returns (embeddings, generation mask); the mask marks exactly
    the target positions after BOS.
    """
    dtype = lm.token_embedding.weight.dtype
    parts: list[torch.Tensor] = []
    for seg in prompt.segments:
        if seg.kind == "text":
            parts.append(lm.embed_tokens(tokenize(seg.text)))
        else:
            if seg.embeddings.shape[1] != lm.profile.d_lm:
                raise ValidationError(
                    f"embedding span width {seg.embeddings.shape[1]} != "
                    f"d_lm {lm.profile.d_lm}"
                )
            parts.append(seg.embeddings.to(dtype))
    parts.append(lm.embed_tokens([lm.profile.bos_id]))
    n_targets = 0
    if target_ids is not None and len(target_ids) > 0:
        parts.append(lm.embed_tokens(target_ids))
        n_targets = len(target_ids)
    embeddings = torch.cat(parts, dim=0) if parts else torch.zeros(0, lm.profile.d_lm, dtype=dtype)
    mask = torch.zeros(embeddings.shape[0], dtype=torch.bool)
    if n_targets:
        mask[-n_targets:] = True
    return embeddings, mask


def next_token_logits(lm: ToyCausalLM, embeddings: torch.Tensor) -> torch.Tensor:
    """Logits over the vocabulary at the final position."""
    return check_finite(lm(embeddings)[-1], "lm head")


def sequence_logprob(
    lm: ToyCausalLM, prompt: PromptSequence, target_ids: Sequence[int]
) -> torch.Tensor:
    """Teacher-forced log P(target_n | prompt, target_<n) for each target token.

    Differentiable with respect to the prompt's embedding spans.
    """
    if len(target_ids) == 0:
        raise ValidationError("sequence_logprob needs at least one target token")
    embeddings, _ = embed_prompt(prompt, lm, target_ids)
    logits = lm(embeddings)
    n = len(target_ids)
    logprobs = torch.log_softmax(logits[-n - 1 : -1], dim=-1)
    return logprobs[torch.arange(n), torch.as_tensor(list(target_ids), dtype=torch.long)]


def greedy_decode(lm: ToyCausalLM, prompt: PromptSequence, max_len: int = 64) -> DecodingResult:
    """Argmax decoding until EOS or max_len; ties break toward the lower id."""
    if max_len <= 0:
        return DecodingResult(token_ids=[], text="", avg_logprob=None)
    with torch.no_grad():
        embeddings, _ = embed_prompt(prompt, lm)
        ids: list[int] = []
        logps: list[float] = []
        truncated = False
        for _ in range(max_len):
            logits = next_token_logits(lm, embeddings)
            # np.argmax guarantees the first (lowest) index on ties
            token = int(np.argmax(logits.double().numpy()))
            logps.append(float(torch.log_softmax(logits, dim=-1)[token]))
            ids.append(token)
            if token == lm.profile.eos_id:
                break
            if embeddings.shape[0] >= lm.profile.context_limit:
                truncated = True
                break
            embeddings = torch.cat([embeddings, lm.embed_tokens([token])], dim=0)
    avg = float(np.mean(logps)) if logps else None
    return DecodingResult(
        token_ids=ids, text=detokenize(ids), avg_logprob=avg, truncated=truncated
    )
