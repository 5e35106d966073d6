"""Interleaved multimodal prompt assembly.

A prompt is an ordered list of segments, each either a text span or a span
of continuous embeddings, followed by a BOS marker where generation starts.
Template order: context descriptions (optional), character header, one
"name played by actor" text + embedding span per character, the describe
text, the video embedding span, the closing ":", then BOS.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .data import CharacterEntry
from .errors import ValidationError

_TERMINAL = (".", "!", "?")


@dataclass(frozen=True)
class PromptTemplate:
    header: str = "Possible characters: "
    character_format: str = "{name} played by {actor} "
    character_separator: str = ", "
    describe: str = "Describe "
    suffix: str = ":"


@dataclass
class PromptSegment:
    kind: str  # "text" | "embedding"
    tag: str  # "template" | "character" | "video" | "context-ad"
    text: str = ""
    embeddings: Optional[torch.Tensor] = None
    character_index: Optional[int] = None

    def __post_init__(self):
        if self.kind == "text":
            if self.embeddings is not None:
                raise ValidationError("text segment must not carry embeddings")
        elif self.kind == "embedding":
            if self.embeddings is None or self.text:
                raise ValidationError("embedding segment must carry exactly an embedding payload")
            if self.embeddings.ndim != 2:
                raise ValidationError(
                    f"embedding span must be 2-D, got shape {tuple(self.embeddings.shape)}"
                )
        else:
            raise ValidationError(f"unknown segment kind {self.kind!r}")


@dataclass
class PromptSequence:
    segments: list[PromptSegment] = field(default_factory=list)
    bos_position: int = 0

    def __post_init__(self):
        # BOS separates conditioning from generation: nothing may follow it
        if self.bos_position != len(self.segments):
            raise ValidationError(
                f"bos_position {self.bos_position} must sit after all "
                f"{len(self.segments)} conditioning segments"
            )


def _terminated(text: str) -> str:
    text = text.strip()
    return text if text.endswith(_TERMINAL) else text + "."


def build_prompt(
    characters: Sequence[tuple[CharacterEntry, torch.Tensor]],
    video: torch.Tensor,
    context_ads: Sequence[str] = (),
    template: PromptTemplate = PromptTemplate(),
) -> PromptSequence:
    """Assemble the interleaved sequence for one clip.

    `characters` pairs each refined entry with its mapped embeddings; with
    an empty list the character header is dropped entirely and the prompt
    reduces to the describe/video/suffix tail.
    """
    segments: list[PromptSegment] = []
    for ad_text in context_ads:
        segments.append(
            PromptSegment(kind="text", tag="context-ad", text=_terminated(ad_text) + " ")
        )
    if characters:
        segments.append(PromptSegment(kind="text", tag="template", text=template.header))
        for i, (entry, embeddings) in enumerate(characters):
            if embeddings is None:
                raise ValidationError(
                    f"character {entry.character_name!r} has no mapped embeddings"
                )
            segments.append(
                PromptSegment(
                    kind="text",
                    tag="character",
                    character_index=i,
                    text=template.character_format.format(
                        name=entry.character_name, actor=entry.actor_name
                    ),
                )
            )
            segments.append(
                PromptSegment(
                    kind="embedding", tag="character", character_index=i, embeddings=embeddings
                )
            )
            segments.append(
                PromptSegment(
                    kind="text", tag="character", character_index=i,
                    text=template.character_separator,
                )
            )
    segments.append(PromptSegment(kind="text", tag="template", text=template.describe))
    segments.append(PromptSegment(kind="embedding", tag="video", embeddings=video))
    segments.append(PromptSegment(kind="text", tag="template", text=template.suffix))
    return PromptSequence(segments=segments, bos_position=len(segments))


def render_debug(prompt: PromptSequence) -> str:
    """Human-readable rendering with <EMB:n> spans and the <BOS> marker."""
    if not prompt.segments:
        return ""
    parts = []
    for i, seg in enumerate(prompt.segments):
        if i == prompt.bos_position:
            parts.append("<BOS>")
        parts.append(seg.text if seg.kind == "text" else f"<EMB:{seg.embeddings.shape[0]}>")
    if prompt.bos_position == len(prompt.segments):
        parts.append("<BOS>")
    return "".join(parts)


def prompt_sha256(prompt: PromptSequence) -> str:
    """Hash of the rendering: audits which characters and context fed an AD."""
    return hashlib.sha256(render_debug(prompt).encode("utf-8")).hexdigest()
