"""Source registry: which external embedders feed which representation group."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Mapping

from ..errors import ConfigError

VISUAL_GROUPS = ("scene", "aligned", "narrative")
GROUPS = VISUAL_GROUPS + ("language",)

# short names used in ablation tables
GROUP_ABBREV = {"SR": "scene", "AR": "aligned", "NR": "narrative"}

# Defaults follow the public backbone families; they are configuration only.
DEFAULT_SOURCES = (
    ("vit", 768, "scene"),
    ("dinov2", 768, "scene"),
    ("clip_image_intermediate", 1024, "scene"),
    ("clip_image_output", 512, "aligned"),
    ("bert_caption", 768, "narrative"),
    ("te3l_caption", 3072, "narrative"),
    ("bert_instruction", 768, "language"),
    ("clip_text", 512, "language"),
    ("ada_instruction", 1536, "language"),
)


@dataclass(frozen=True)
class SourceSpec:
    id: str
    dim: int
    group: str


@dataclass(frozen=True)
class SourceRegistry:
    sources: tuple[SourceSpec, ...]

    def __post_init__(self):
        seen = set()
        for s in self.sources:
            if not s.id:
                raise ConfigError("source id must be non-empty")
            if s.id in seen:
                raise ConfigError(f"duplicate source id {s.id!r}")
            if not isinstance(s.dim, int) or s.dim <= 0:
                raise ConfigError(f"source {s.id!r}: dim must be a positive integer, got {s.dim!r}")
            if s.group not in GROUPS:
                raise ConfigError(f"source {s.id!r}: unknown group {s.group!r}")
            seen.add(s.id)

    def __contains__(self, source_id: str) -> bool:
        return any(s.id == source_id for s in self.sources)

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self):
        return iter(self.sources)

    def spec(self, source_id: str) -> SourceSpec:
        for s in self.sources:
            if s.id == source_id:
                return s
        raise KeyError(source_id)

    def dim(self, source_id: str) -> int:
        return self.spec(source_id).dim

    def group(self, name: str) -> tuple[SourceSpec, ...]:
        if name not in GROUPS:
            raise ConfigError(f"unknown group {name!r}")
        return tuple(s for s in self.sources if s.group == name)

    def visual(self) -> tuple[SourceSpec, ...]:
        """Visual sources in token order: scene, aligned, narrative."""
        return self.group("scene") + self.group("aligned") + self.group("narrative")

    def restrict(self, enabled: Iterable[str]) -> "SourceRegistry":
        """Keep only the enabled visual groups (language sources always stay)."""
        enabled = {GROUP_ABBREV.get(g, g) for g in enabled}
        unknown = enabled - set(VISUAL_GROUPS)
        if unknown:
            raise ConfigError(f"unknown groups {sorted(unknown)}")
        return SourceRegistry(tuple(s for s in self.sources if s.group == "language" or s.group in enabled))

    def to_config(self) -> dict:
        return {"sources": [{"id": s.id, "dim": s.dim, "group": s.group} for s in self.sources]}

    def digest(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def register_sources(config: Mapping | Iterable | None = None) -> SourceRegistry:
    """Build an immutable registry from ``{"sources": [{id, dim, group}, ...]}``.

    ``None`` gives the nine default sources.
    """
    if config is None:
        return SourceRegistry(tuple(SourceSpec(i, d, g) for i, d, g in DEFAULT_SOURCES))
    entries = config.get("sources") if isinstance(config, Mapping) else config
    if entries is None:
        raise ConfigError("registry config needs a 'sources' list")
    specs = []
    for e in entries:
        try:
            specs.append(SourceSpec(str(e["id"]), e["dim"], e.get("group", "scene")))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad source entry {e!r}") from exc
    return SourceRegistry(tuple(specs))


def load_registry(path) -> SourceRegistry:
    with open(path, encoding="utf-8") as fh:
        return register_sources(json.load(fh))
