"""Exemplar features: mean of the movie frames most similar to a portrait.

A character's portrait rarely matches their in-movie appearance, so each
character is represented by the average of the k frames (default 5) whose
cosine similarity to the portrait is highest, taken over every ingested
frame of the movie.
"""

from __future__ import annotations

import numpy as np

from .data import Movie, MovieDataset
from .errors import NumericError, ValidationError

DEFAULT_TOP_K = 5


def compute_exemplar(portrait: np.ndarray, frames: np.ndarray, k: int = DEFAULT_TOP_K) -> np.ndarray:
    """Average the min(k, F) frames with highest cosine similarity to `portrait`.

    `frames` row order is the tie-break order: on equal similarity the lower
    row index wins. Fewer than k frames averages all of them.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    portrait = np.asarray(portrait, dtype=np.float64).reshape(-1)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValidationError("need at least one movie frame")
    if frames.shape[1] != portrait.shape[0]:
        raise ValidationError(
            f"portrait dim {portrait.shape[0]} != frame dim {frames.shape[1]}"
        )
    pnorm = np.linalg.norm(portrait)
    fnorms = np.linalg.norm(frames, axis=1)
    if pnorm == 0.0:
        raise NumericError("zero-norm portrait: cosine similarity is degenerate")
    if (fnorms == 0.0).any():
        raise NumericError(
            f"zero-norm frame at row {int(np.argmax(fnorms == 0.0))}: "
            "cosine similarity is degenerate"
        )
    sims = (frames @ portrait) / (fnorms * pnorm)
    top = np.argsort(-sims, kind="stable")[: min(k, frames.shape[0])]
    return frames[top].mean(axis=0).astype(np.float32)


def movie_frame_matrix(movie: Movie) -> np.ndarray:
    """All frames of a movie, clips in ascending clip_id order.

    This ordering defines exemplar tie-breaking: lower (clip_id, frame index)
    wins.
    """
    clips = sorted(movie.clips, key=lambda c: c.clip_id)
    if not clips:
        raise ValidationError(f"movie {movie.movie_id!r} has no clips")
    return np.concatenate([c.features.values for c in clips], axis=0)


def populate_exemplars(dataset: MovieDataset, k: int = DEFAULT_TOP_K) -> MovieDataset:
    """Fill every CharacterEntry.exemplar_feature in place; returns the dataset."""
    for movie in dataset.movies.values():
        if not movie.bank.entries:
            continue
        frames = movie_frame_matrix(movie)
        for entry in movie.bank.entries:
            try:
                entry.exemplar_feature = compute_exemplar(entry.portrait_feature, frames, k)
            except NumericError as exc:
                raise NumericError(
                    f"movie {movie.movie_id!r}, character {entry.character_name!r}: {exc}"
                )
    return dataset
