"""Group assembly and per-source projection into d_model tokens."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Mapping

import numpy as np

from ..errors import ConfigError, EmptyRepresentationError, ShapeError
from .providers import EmbeddingProvider, FeatureBlock, caption_phase
from .registry import VISUAL_GROUPS, SourceRegistry


def narrative_prompt() -> str:
    """The captioning prompt template; ``{instruction}`` marks the slot."""
    return resources.files(__package__).joinpath("assets/narrative_prompt.txt").read_text(encoding="utf-8")


def render_prompt(instruction: str) -> str:
    return narrative_prompt().replace("{instruction}", instruction)


class Projector:
    """Per-source linear maps ``dim_in -> d_model`` (no bias)."""

    def __init__(self, weights: Mapping[str, np.ndarray], d_model: int):
        self.d_model = d_model
        self.weights = {}
        for sid, w in weights.items():
            w = np.asarray(w, dtype=np.float64)
            if w.ndim != 2 or w.shape[1] != d_model:
                raise ShapeError(f"projection for {sid!r} has shape {w.shape}, want (dim, {d_model})")
            self.weights[sid] = w

    @classmethod
    def uniform(cls, registry: SourceRegistry, d_model: int, rng: np.random.Generator) -> "Projector":
        weights = {}
        for s in registry:
            bound = 1.0 / np.sqrt(s.dim)
            weights[s.id] = rng.uniform(-bound, bound, size=(s.dim, d_model))
        return cls(weights, d_model)

    @classmethod
    def identity(cls, registry: SourceRegistry, d_model: int) -> "Projector":
        return cls({s.id: np.eye(s.dim, d_model) for s in registry}, d_model)

    def project(self, block: FeatureBlock) -> np.ndarray:
        try:
            w = self.weights[block.source_id]
        except KeyError:
            raise ConfigError(f"no projection for source {block.source_id!r}") from None
        if w.shape[0] != block.dim:
            raise ShapeError(f"block {block.source_id!r} has dim {block.dim}, projection expects {w.shape[0]}")
        return block.values.astype(np.float64) @ w


@dataclass(frozen=True, eq=False)
class LambdaRepresentation:
    """Token matrix (one row per visual source) plus group membership."""

    tokens: np.ndarray
    source_ids: tuple[str, ...]
    block_map: Mapping[str, tuple[int, ...]]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def group_tokens(self, group: str) -> np.ndarray:
        return self.tokens[list(self.block_map[group])]

    def drop_group(self, group: str) -> "LambdaRepresentation":
        keep = [i for i in range(self.n_tokens) if i not in self.block_map[group]]
        if not keep:
            raise EmptyRepresentationError("dropping the group leaves no tokens")
        groups = {g: [] for g in VISUAL_GROUPS}
        for new, old in enumerate(keep):
            for g in VISUAL_GROUPS:
                if old in self.block_map[g]:
                    groups[g].append(new)
        return LambdaRepresentation(
            self.tokens[keep], tuple(self.source_ids[i] for i in keep), {g: tuple(v) for g, v in groups.items()}
        )


@dataclass(frozen=True, eq=False)
class LanguageFeature:
    tokens: np.ndarray
    source_ids: tuple[str, ...]


def _group_blocks(provider, registry, group, episode_id, phase) -> list[FeatureBlock]:
    registry = registry or provider.registry
    return [provider.get(episode_id, phase, s.id) for s in registry.group(group)]


def assemble_scene(provider: EmbeddingProvider, episode_id: str, phase: str, registry=None) -> list[FeatureBlock]:
    return _group_blocks(provider, registry, "scene", episode_id, phase)


def assemble_aligned(provider: EmbeddingProvider, episode_id: str, phase: str, registry=None) -> list[FeatureBlock]:
    return _group_blocks(provider, registry, "aligned", episode_id, phase)


def assemble_narrative(provider: EmbeddingProvider, episode_id: str, phase: str, registry=None) -> list[FeatureBlock]:
    """Caption-embedding blocks for the image at ``phase``.

    Raises ``MissingCaptionError`` when narrative sources are configured but no
    caption exists for the image.
    """
    registry = registry or provider.registry
    if not registry.group("narrative"):
        return []
    provider.caption(episode_id, phase)
    return _group_blocks(provider, registry, "narrative", episode_id, caption_phase(phase))


def assemble_lambda(
    scene: list[FeatureBlock],
    aligned: list[FeatureBlock],
    narrative: list[FeatureBlock],
    projector: Projector,
) -> LambdaRepresentation:
    blocks = list(scene) + list(aligned) + list(narrative)
    if not blocks:
        raise EmptyRepresentationError("no scene, aligned, or narrative blocks")
    tokens = np.stack([projector.project(b) for b in blocks])
    n_s, n_a = len(scene), len(aligned)
    block_map = {
        "scene": tuple(range(0, n_s)),
        "aligned": tuple(range(n_s, n_s + n_a)),
        "narrative": tuple(range(n_s + n_a, len(blocks))),
    }
    return LambdaRepresentation(tokens, tuple(b.source_id for b in blocks), block_map)


def assemble_language(
    provider: EmbeddingProvider, episode_id: str, projector: Projector, registry=None
) -> LanguageFeature:
    blocks = _group_blocks(provider, registry, "language", episode_id, "instruction")
    if not blocks:
        raise EmptyRepresentationError("no instruction sources configured")
    return LanguageFeature(np.stack([projector.project(b) for b in blocks]), tuple(b.source_id for b in blocks))


def build_lambda(provider, episode_id, phase, projector, registry=None) -> LambdaRepresentation:
    """Convenience: assemble all three groups for one image and project them."""
    return assemble_lambda(
        assemble_scene(provider, episode_id, phase, registry),
        assemble_aligned(provider, episode_id, phase, registry),
        assemble_narrative(provider, episode_id, phase, registry),
        projector,
    )
