"""Episode manifests (JSON Lines), negative cleansing, splits, and corpus statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigError, ManifestError


@dataclass(frozen=True)
class Episode:
    episode_id: str
    instruction: str
    label: int
    before_ref: str = "before"
    after_ref: str = "after"
    flagged_mislabel: bool | None = None
    frames: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"episode {self.episode_id!r}: label must be 0 or 1, got {self.label!r}")
        if self.frames is not None:
            object.__setattr__(self, "frames", tuple(self.frames))
            if len(self.frames) < 2:
                raise ManifestError(f"episode {self.episode_id!r}: a video needs at least 2 frames")
            # default endpoints of a video are its first and last frames
            if self.before_ref == "before":
                object.__setattr__(self, "before_ref", self.frames[0])
            if self.after_ref == "after":
                object.__setattr__(self, "after_ref", self.frames[-1])

    def to_json(self) -> dict:
        d = {"episode_id": self.episode_id, "instruction": self.instruction, "label": self.label}
        first, last = (self.frames[0], self.frames[-1]) if self.frames else ("before", "after")
        if self.before_ref != first:
            d["before"] = self.before_ref
        if self.after_ref != last:
            d["after"] = self.after_ref
        if self.flagged_mislabel is not None:
            d["flagged_mislabel"] = self.flagged_mislabel
        if self.frames is not None:
            d["frames"] = list(self.frames)
        return d


def _episode_from_json(obj, line: int) -> Episode:
    if not isinstance(obj, dict):
        raise ManifestError("expected a JSON object", line)
    for key in ("episode_id", "instruction", "label"):
        if key not in obj:
            raise ManifestError(f"missing required field {key!r}", line)
    label = obj["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise ManifestError(f"field 'label' must be 0 or 1, got {label!r}", line)
    frames = obj.get("frames")
    if frames is not None:
        if not isinstance(frames, list) or len(frames) < 2:
            raise ManifestError("field 'frames' must be a list of at least 2 phase names", line)
        frames = tuple(str(f) for f in frames)
    flagged = obj.get("flagged_mislabel")
    if flagged is not None and not isinstance(flagged, bool):
        raise ManifestError("field 'flagged_mislabel' must be a boolean", line)
    return Episode(
        episode_id=str(obj["episode_id"]),
        instruction=str(obj["instruction"]),
        label=int(label),
        before_ref=str(obj.get("before", "before")),
        after_ref=str(obj.get("after", "after")),
        flagged_mislabel=flagged,
        frames=frames,
    )


def load_manifest(path) -> list[Episode]:
    episodes, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from None
            ep = _episode_from_json(obj, lineno)
            if ep.episode_id in seen:
                raise ManifestError(f"duplicate episode_id {ep.episode_id!r}", lineno)
            seen.add(ep.episode_id)
            episodes.append(ep)
    return episodes


def write_manifest(path, episodes: Iterable[Episode]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), ensure_ascii=False) + "\n")


def cleanse_negatives(
    episodes: Sequence[Episode], instruction_pool: Sequence[str] | None = None, seed: int = 0
) -> list[Episode]:
    """Give every flagged (mislabeled) negative a different, randomly drawn instruction.

    Labels are never changed: the flagged episodes stay negatives. The pool
    defaults to the manifest's distinct instructions.
    """
    if instruction_pool is None:
        instruction_pool = [ep.instruction for ep in episodes]
    pool = list(dict.fromkeys(instruction_pool))
    if not pool:
        raise ConfigError("instruction pool is empty")
    rng = np.random.default_rng(seed)
    out = []
    for ep in episodes:
        if not ep.flagged_mislabel:
            out.append(ep)
            continue
        if ep.label != 0:
            raise ConfigError(f"episode {ep.episode_id!r} is flagged as mislabeled but is not a negative")
        choices = [s for s in pool if s != ep.instruction]
        if not choices:
            raise ConfigError(f"pool has no instruction other than {ep.instruction!r}")
        out.append(replace(ep, instruction=choices[int(rng.integers(len(choices)))]))
    return out


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_json(cls, d) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d.get("seed", 0)))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def _allocate(total: int, sizes: Sequence[int], n_pos: int) -> list[int]:
    """Positives per split, proportional to split size, summing to ``n_pos``."""
    if total == 0:
        return [0] * len(sizes)
    raw = [s * n_pos / total for s in sizes]
    alloc = [min(int(np.floor(r)), s) for r, s in zip(raw, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: raw[i] - np.floor(raw[i]), reverse=True)
    i = 0
    while sum(alloc) < n_pos:
        j = order[i % len(order)]
        if alloc[j] < sizes[j]:
            alloc[j] += 1
        i += 1
    return alloc


def split_dataset(
    episodes: Sequence[Episode], sizes: Sequence[int], seed: int = 0, stratify: bool = False
) -> DatasetSplit:
    """Seeded shuffle, then consecutive train/val/test slices of the requested sizes."""
    sizes = [int(s) for s in sizes]
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise ConfigError(f"sizes must be three non-negative counts, got {sizes}")
    if sum(sizes) != len(episodes):
        raise ConfigError(f"split sizes {sizes} sum to {sum(sizes)}, manifest has {len(episodes)} episodes")
    rng = np.random.default_rng(seed)
    ids = [ep.episode_id for ep in episodes]
    if not stratify:
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        a, b = sizes[0], sizes[0] + sizes[1]
        return DatasetSplit(tuple(shuffled[:a]), tuple(shuffled[a:b]), tuple(shuffled[b:]), seed)

    pos = [ep.episode_id for ep in episodes if ep.label == 1]
    neg = [ep.episode_id for ep in episodes if ep.label == 0]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    n_pos = _allocate(len(ids), sizes, len(pos))
    parts, p_off, n_off = [], 0, 0
    for size, k in zip(sizes, n_pos):
        part = pos[p_off : p_off + k] + neg[n_off : n_off + size - k]
        p_off, n_off = p_off + k, n_off + size - k
        parts.append(tuple(part[i] for i in rng.permutation(len(part))))
    return DatasetSplit(parts[0], parts[1], parts[2], seed)


@dataclass(frozen=True)
class DatasetStats:
    total: int
    positives: int
    negatives: int
    vocab_size: int
    word_count: int
    mean_length: float

    def to_json(self) -> dict:
        return asdict(self)


def dataset_stats(episodes: Sequence[Episode]) -> DatasetStats:
    """Counts plus whitespace-token vocabulary/length statistics of the instructions."""
    vocab: set[str] = set()
    words = 0
    for ep in episodes:
        tokens = ep.instruction.split()
        vocab.update(tokens)
        words += len(tokens)
    pos = sum(ep.label for ep in episodes)
    n = len(episodes)
    return DatasetStats(n, pos, n - pos, len(vocab), words, words / n if n else 0.0)


@dataclass(frozen=True)
class VideoPair:
    index: int
    before: str
    after: str


def video_pairs(episode: Episode) -> list[VideoPair]:
    """Pairs (frame 0, frame n) for n = 1..N of an (N+1)-frame episode."""
    frames = episode.frames
    if frames is None or len(frames) < 2:
        raise ConfigError(f"episode {episode.episode_id!r} needs at least 2 frames")
    return [VideoPair(n, frames[0], frames[n]) for n in range(1, len(frames))]


# ---------------------------------------------------------------------------
# shaped fixtures
# ---------------------------------------------------------------------------

_VERBS = ("pick", "place", "move", "knock", "open", "close", "put")
_FILLER = (
    "near", "into", "upright", "over", "from", "on", "top", "middle", "bottom", "drawer", "counter",
    "white", "blue", "green", "orange", "red", "brown", "yellow", "black", "rxbar", "chocolate",
    "blueberry", "chip", "bag", "can", "coke", "pepsi", "seven", "up", "sponge", "apple", "banana",
    "water", "bottle", "jalapeno", "rice", "soda", "energy", "bar", "paper", "bowl", "left", "right",
    "of", "the", "and", "towel", "napkin", "cup", "plate", "fork", "spoon", "knife",
)  # fmt: skip


def shaped_manifest(
    total: int = 13915,
    positives: int = 10000,
    vocab_size: int = 49,
    word_count: int = 78790,
    flagged_fraction: float = 0.436,
    seed: int = 0,
) -> list[Episode]:
    """A manifest with exact corpus statistics, for running the dataset procedure without real data.

    ``round(flagged_fraction * negatives)`` negatives carry ``flagged_mislabel``.
    """
    if not 0 <= positives <= total:
        raise ConfigError("positives must lie in [0, total]")
    words_all = list(dict.fromkeys(_VERBS + _FILLER))
    if not len(_VERBS) < vocab_size <= len(words_all):
        raise ConfigError(f"vocab_size must be in ({len(_VERBS)}, {len(words_all)}]")
    if not 2 * total <= word_count <= 12 * total:
        raise ConfigError("word_count must allow 2..12 words per instruction")
    rng = np.random.default_rng(seed)
    vocab = words_all[:vocab_size]
    verbs, rest = list(_VERBS), vocab[len(_VERBS) :]

    lengths = np.clip(np.rint(rng.normal(word_count / total, 1.2, size=total)), 2, 12).astype(int)
    while lengths.sum() != word_count:
        i = int(rng.integers(total))
        if lengths.sum() > word_count and lengths[i] > 2:
            lengths[i] -= 1
        elif lengths.sum() < word_count and lengths[i] < 12:
            lengths[i] += 1

    sentences = []
    for n in lengths:
        words = [verbs[int(rng.integers(len(verbs)))]] + [rest[int(rng.integers(len(rest)))] for _ in range(n - 1)]
        sentences.append(words)
    # every vocabulary word appears at least once
    for j, w in enumerate(vocab):
        k = j % total
        slot = 0 if w in verbs else 1 + (j % (len(sentences[k]) - 1))
        sentences[k][slot] = w

    labels = np.zeros(total, dtype=int)
    labels[rng.permutation(total)[:positives]] = 1
    neg_idx = np.flatnonzero(labels == 0)
    flagged = set(rng.permutation(neg_idx)[: int(round(flagged_fraction * len(neg_idx)))].tolist())
    return [
        Episode(
            episode_id=f"ep{i:05d}",
            instruction=" ".join(sentences[i]),
            label=int(labels[i]),
            flagged_mislabel=(i in flagged) if labels[i] == 0 else None,
        )
        for i in range(total)
    ]
