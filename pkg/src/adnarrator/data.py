"""Domain types, dataset file format, ingestion, and refinement-label derivation.

On-disk layout (one directory per dataset):

    manifest.json   encoder_dim, split tag, feature-row count, alias table
    features.bin    row-major 32-bit little-endian floats, width = encoder_dim
    clips.jsonl     one clip per line; frames are a row range into features.bin
    ads.jsonl       one audio-description record per line
    banks.jsonl     one character bank per movie; portraits/exemplars are
                    single rows in features.bin

All ids are UTF-8 strings. Loading validates every invariant and fails on the
first violation, naming the offending file, line, and record.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1

# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class FrameFeatureMatrix:
    """Per-frame visual features for one clip, shape (frames, dim)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(
                f"frame features must be a non-empty 2-D matrix, got shape {v.shape}"
            )
        if not np.isfinite(v).all():
            raise ValidationError("frame features contain non-finite values")
        self.values = v

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class VideoClip:
    clip_id: str
    movie_id: str
    start: float
    end: float
    features: FrameFeatureMatrix

    def __post_init__(self):
        if not self.start < self.end:
            raise ValidationError(
                f"clip {self.clip_id!r}: start ({self.start}) must precede end ({self.end})"
            )


@dataclass
class CharacterEntry:
    character_name: str
    actor_name: str
    portrait_feature: np.ndarray
    exemplar_feature: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.character_name:
            raise ValidationError("character_name must be non-empty")
        p = np.asarray(self.portrait_feature, dtype=np.float32).reshape(-1)
        if not np.isfinite(p).all():
            raise ValidationError(
                f"character {self.character_name!r}: portrait feature is non-finite"
            )
        self.portrait_feature = p
        if self.exemplar_feature is not None:
            e = np.asarray(self.exemplar_feature, dtype=np.float32).reshape(-1)
            if e.shape != p.shape or not np.isfinite(e).all():
                raise ValidationError(
                    f"character {self.character_name!r}: exemplar feature must be a "
                    f"finite vector of dim {p.shape[0]}"
                )
            self.exemplar_feature = e

    @property
    def first_name(self) -> str:
        return self.character_name.split()[0]


@dataclass
class CharacterBank:
    movie_id: str
    entries: list[CharacterEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.character_name for e in self.entries]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValidationError(
                f"bank for movie {self.movie_id!r}: duplicate character {dup!r}"
            )

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class ADRecord:
    """One audio-description annotation, ordered within its movie by `index`."""

    ad_id: str
    movie_id: str
    clip_id: str
    text: str
    index: int


@dataclass
class Movie:
    movie_id: str
    clips: list[VideoClip] = field(default_factory=list)
    ads: list[ADRecord] = field(default_factory=list)
    bank: CharacterBank = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.bank is None:
            self.bank = CharacterBank(movie_id=self.movie_id)

    def clip(self, clip_id: str) -> VideoClip:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)


@dataclass
class MovieDataset:
    movies: dict[str, Movie]
    encoder_dim: int
    split: str = "train"
    aliases: dict[str, str] = field(default_factory=dict)

    def clips(self) -> Iterator[VideoClip]:
        for m in self.movies.values():
            yield from m.clips

    def ads(self) -> Iterator[ADRecord]:
        for m in self.movies.values():
            yield from m.ads

    def num_characters(self) -> int:
        return sum(len(m.bank) for m in self.movies.values())


@dataclass(frozen=True)
class RefinementLabel:
    character_name: str
    ad_related: bool


# ---------------------------------------------------------------------------
# Name matching and refinement labels
# ---------------------------------------------------------------------------


def _name_variants(first: str, aliases: dict[str, str]) -> list[str]:
    # alias table maps variant spelling -> canonical first name ("Grey" -> "Gray")
    variants = [first]
    for variant, canonical in aliases.items():
        if canonical.lower() == first.lower():
            variants.append(variant)
    return variants


def name_mentioned(text: str, first_name: str, aliases: Optional[dict[str, str]] = None) -> bool:
    """Case-insensitive whole-word match of a character's first name in `text`."""
    for variant in _name_variants(first_name, aliases or {}):
        if re.search(rf"\b{re.escape(variant)}\b", text, flags=re.IGNORECASE):
            return True
    return False


def derive_refinement_labels(
    ad: ADRecord,
    bank: CharacterBank,
    aliases: Optional[dict[str, str]] = None,
) -> list[RefinementLabel]:
    """One label per bank entry: related iff the first name occurs in the AD text.

    Deterministic and independent of entry order; an empty bank yields an
    empty list.
    """
    if bank.movie_id != ad.movie_id:
        raise ValidationError(
            f"bank for movie {bank.movie_id!r} does not match AD {ad.ad_id!r} "
            f"(movie {ad.movie_id!r})"
        )
    return [
        RefinementLabel(e.character_name, name_mentioned(ad.text, e.first_name, aliases))
        for e in bank.entries
    ]


def mentioned_characters(
    text: str, bank: CharacterBank, aliases: Optional[dict[str, str]] = None
) -> set[str]:
    """Character names from `bank` whose first name occurs in `text` as a whole word."""
    return {
        e.character_name
        for e in bank.entries
        if name_mentioned(text, e.first_name, aliases)
    }


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path.name}:{lineno}: invalid JSON ({exc})")


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise ValidationError(f"{where}: missing field {key!r}")
    return record[key]


def load_dataset(path: str | os.PathLike) -> MovieDataset:
    """Load and fully validate a dataset directory.

    Rejects on the first violated invariant: missing files, dimension
    mismatches, dangling clip references, duplicate ids, out-of-range
    feature offsets. Error messages name the file and line.
    """
    root = Path(path)
    for name in ("manifest.json", "features.bin", "clips.jsonl", "ads.jsonl", "banks.jsonl"):
        if not (root / name).exists():
            raise ValidationError(f"dataset at {root}: missing {name}")

    with open(root / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"manifest.json: unsupported format_version {manifest.get('format_version')!r}"
        )
    dim = int(_require(manifest, "encoder_dim", "manifest.json"))
    if dim < 1:
        raise ValidationError(f"manifest.json: encoder_dim must be >= 1, got {dim}")
    split = manifest.get("split", "train")
    if split not in ("train", "eval"):
        raise ValidationError(f"manifest.json: split must be 'train' or 'eval', got {split!r}")
    aliases = {str(k): str(v) for k, v in manifest.get("aliases", {}).items()}
    total_rows = int(_require(manifest, "feature_rows", "manifest.json"))

    raw = np.fromfile(root / "features.bin", dtype="<f4")
    if raw.size != total_rows * dim:
        raise ValidationError(
            f"features.bin: expected {total_rows} rows x {dim} floats "
            f"({total_rows * dim}), found {raw.size}"
        )
    features = raw.reshape(total_rows, dim) if total_rows else raw.reshape(0, dim)

    def feature_rows(offset: int, count: int, where: str) -> np.ndarray:
        if offset < 0 or count < 1 or offset + count > total_rows:
            raise ValidationError(
                f"{where}: feature range [{offset}, {offset + count}) outside "
                f"features.bin ({total_rows} rows)"
            )
        return features[offset : offset + count]

    movies: dict[str, Movie] = {}

    def movie(movie_id: str) -> Movie:
        if movie_id not in movies:
            movies[movie_id] = Movie(movie_id=movie_id)
        return movies[movie_id]

    seen_clips: set[tuple[str, str]] = set()
    for lineno, rec in _read_jsonl(root / "clips.jsonl"):
        where = f"clips.jsonl:{lineno}"
        clip_id = str(_require(rec, "clip_id", where))
        movie_id = str(_require(rec, "movie_id", where))
        if (movie_id, clip_id) in seen_clips:
            raise ValidationError(f"{where}: duplicate clip {clip_id!r} in movie {movie_id!r}")
        seen_clips.add((movie_id, clip_id))
        rows = feature_rows(
            int(_require(rec, "feature_offset", where)),
            int(_require(rec, "feature_rows", where)),
            where,
        )
        try:
            clip = VideoClip(
                clip_id=clip_id,
                movie_id=movie_id,
                start=float(_require(rec, "start", where)),
                end=float(_require(rec, "end", where)),
                features=FrameFeatureMatrix(rows.copy()),
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}")
        movie(movie_id).clips.append(clip)

    seen_ads: set[str] = set()
    for lineno, rec in _read_jsonl(root / "ads.jsonl"):
        where = f"ads.jsonl:{lineno}"
        ad = ADRecord(
            ad_id=str(_require(rec, "ad_id", where)),
            movie_id=str(_require(rec, "movie_id", where)),
            clip_id=str(_require(rec, "clip_id", where)),
            text=str(_require(rec, "text", where)),
            index=int(_require(rec, "index", where)),
        )
        if ad.ad_id in seen_ads:
            raise ValidationError(f"{where}: duplicate ad_id {ad.ad_id!r}")
        seen_ads.add(ad.ad_id)
        m = movie(ad.movie_id)
        try:
            m.clip(ad.clip_id)
        except KeyError:
            raise ValidationError(
                f"{where}: AD {ad.ad_id!r} references unknown clip {ad.clip_id!r} "
                f"in movie {ad.movie_id!r}"
            )
        if split == "train" and not ad.text:
            raise ValidationError(f"{where}: training record {ad.ad_id!r} has empty text")
        m.ads.append(ad)

    for lineno, rec in _read_jsonl(root / "banks.jsonl"):
        where = f"banks.jsonl:{lineno}"
        movie_id = str(_require(rec, "movie_id", where))
        entries = []
        for i, c in enumerate(_require(rec, "characters", where)):
            cwhere = f"{where} character[{i}]"
            portrait = feature_rows(int(_require(c, "portrait_row", cwhere)), 1, cwhere)[0]
            exemplar = None
            if c.get("exemplar_row") is not None:
                exemplar = feature_rows(int(c["exemplar_row"]), 1, cwhere)[0].copy()
            try:
                entries.append(
                    CharacterEntry(
                        character_name=str(_require(c, "character_name", cwhere)),
                        actor_name=str(c.get("actor_name", "")),
                        portrait_feature=portrait.copy(),
                        exemplar_feature=exemplar,
                    )
                )
            except ValidationError as exc:
                raise ValidationError(f"{cwhere}: {exc}")
        m = movie(movie_id)
        if len(m.bank):
            raise ValidationError(f"{where}: movie {movie_id!r} has more than one bank")
        try:
            m.bank = CharacterBank(movie_id=movie_id, entries=entries)
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}")

    dataset = MovieDataset(movies=movies, encoder_dim=dim, split=split, aliases=aliases)
    _validate_ordering(dataset)
    return dataset


def _validate_ordering(dataset: MovieDataset):
    # AD ordinals must increase strictly with clip start time within each movie
    for m in dataset.movies.values():
        starts = {c.clip_id: c.start for c in m.clips}
        by_time = sorted(m.ads, key=lambda a: (starts[a.clip_id], a.index))
        indices = [a.index for a in by_time]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError(
                f"ads.jsonl: movie {m.movie_id!r}: AD ordinals are not strictly "
                f"increasing by timestamp (got {indices})"
            )
        m.ads = by_time


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def write_dataset(dataset: MovieDataset, path: str | os.PathLike, force: bool = False):
    """Write the documented layout. Deterministic: equal datasets give equal bytes."""
    root = Path(path)
    if root.exists() and any(root.iterdir()) and not force:
        raise ValidationError(f"output path {root} exists and is non-empty (use force)")
    root.mkdir(parents=True, exist_ok=True)

    rows: list[np.ndarray] = []
    offset = 0

    def push(matrix: np.ndarray) -> int:
        nonlocal offset
        rows.append(np.ascontiguousarray(matrix, dtype="<f4"))
        start = offset
        offset += matrix.shape[0]
        return start

    clip_lines, ad_lines, bank_lines = [], [], []
    n_clips = n_ads = n_chars = 0
    for m in dataset.movies.values():
        for c in m.clips:
            clip_lines.append(
                {
                    "clip_id": c.clip_id,
                    "movie_id": c.movie_id,
                    "start": c.start,
                    "end": c.end,
                    "feature_offset": push(c.features.values),
                    "feature_rows": c.features.rows,
                }
            )
            n_clips += 1
        for a in m.ads:
            ad_lines.append(
                {
                    "ad_id": a.ad_id,
                    "movie_id": a.movie_id,
                    "clip_id": a.clip_id,
                    "text": a.text,
                    "index": a.index,
                }
            )
            n_ads += 1
        chars = []
        for e in m.bank.entries:
            chars.append(
                {
                    "character_name": e.character_name,
                    "actor_name": e.actor_name,
                    "portrait_row": push(e.portrait_feature[None, :]),
                    "exemplar_row": (
                        None
                        if e.exemplar_feature is None
                        else push(e.exemplar_feature[None, :])
                    ),
                }
            )
            n_chars += 1
        bank_lines.append({"movie_id": m.movie_id, "characters": chars})

    manifest = {
        "format_version": FORMAT_VERSION,
        "encoder_dim": dataset.encoder_dim,
        "split": dataset.split,
        "feature_rows": offset,
        "counts": {
            "movies": len(dataset.movies),
            "clips": n_clips,
            "ads": n_ads,
            "characters": n_chars,
        },
        "aliases": dataset.aliases,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    payload = (
        np.concatenate(rows, axis=0) if rows else np.zeros((0, dataset.encoder_dim), "<f4")
    )
    payload.astype("<f4").tofile(root / "features.bin")
    for name, lines in (
        ("clips.jsonl", clip_lines),
        ("ads.jsonl", ad_lines),
        ("banks.jsonl", bank_lines),
    ):
        with open(root / name, "w", encoding="utf-8") as f:
            for rec in lines:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
