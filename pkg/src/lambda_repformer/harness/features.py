"""Gathering raw feature blocks from a provider into dense batch arrays."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..decoder import Batch
from ..errors import RepformerError
from ..representation.assemble import assemble_aligned, assemble_narrative, assemble_scene
from ..representation.providers import EmbeddingProvider
from ..representation.registry import SourceRegistry

log = logging.getLogger(__name__)


class FeatureLookupError(RepformerError):
    """Feature lookup failed for one or more episodes."""

    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        head = "; ".join(f"{k}: {v}" for k, v in list(failures.items())[:5])
        more = f" (+{len(failures) - 5} more)" if len(failures) > 5 else ""
        super().__init__(f"feature lookup failed for {len(failures)} episode(s): {head}{more}")


def _image(provider, registry, episode_id, phase) -> dict[str, np.ndarray]:
    blocks = (
        assemble_scene(provider, episode_id, phase, registry)
        + assemble_aligned(provider, episode_id, phase, registry)
        + assemble_narrative(provider, episode_id, phase, registry)
    )
    return {b.source_id: b.values for b in blocks}


def _language(provider, registry, episode_id) -> dict[str, np.ndarray]:
    return {s.id: provider.get(episode_id, "instruction", s.id).values for s in registry.group("language")}


@dataclass
class FeatureTable:
    """Stacked raw blocks for a list of (episode, before phase, after phase) rows."""

    batch: Batch
    episode_ids: tuple[str, ...]
    failures: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episode_ids)

    def rows(self, idx) -> Batch:
        idx = np.asarray(idx)
        b = self.batch

        def pick(d):
            return {k: v[idx] for k, v in d.items()}

        labels = None if b.labels is None else b.labels[idx]
        return Batch(pick(b.before), pick(b.after), pick(b.language), labels)


def gather(
    provider: EmbeddingProvider,
    registry: SourceRegistry,
    rows: Sequence[tuple[str, str, str]],
    labels: Sequence[int] | None = None,
    skip_missing: bool = False,
) -> FeatureTable:
    """Look up every block for rows of ``(episode_id, before_phase, after_phase)``.

    Failing rows raise ``FeatureLookupError`` naming each episode, or are
    dropped (and recorded in ``failures``) when ``skip_missing`` is set.
    """
    before = {s.id: [] for s in registry.visual()}
    after = {s.id: [] for s in registry.visual()}
    language = {s.id: [] for s in registry.group("language")}
    kept, kept_labels, failures = [], [], {}
    cache: dict[str, dict[str, np.ndarray]] = {}
    for i, (ep_id, ph_before, ph_after) in enumerate(rows):
        try:
            fb = _image(provider, registry, ep_id, ph_before)
            fa = _image(provider, registry, ep_id, ph_after)
            if ep_id not in cache:
                cache[ep_id] = _language(provider, registry, ep_id)
            fl = cache[ep_id]
        except RepformerError as exc:
            failures[ep_id] = str(exc)
            continue
        for d, src in ((before, fb), (after, fa), (language, fl)):
            for k in d:
                d[k].append(src[k])
        kept.append(ep_id)
        if labels is not None:
            kept_labels.append(int(labels[i]))
    if failures and not skip_missing:
        raise FeatureLookupError(failures)
    if failures:
        log.warning("excluded %d episode(s) with missing features", len(failures))

    def stack(d):
        return {
            s: np.stack(v).astype(np.float64) if v else np.zeros((0, registry.dim(s)))
            for s, v in d.items()
        }  # fmt: skip

    lab = None if labels is None else np.array(kept_labels, dtype=np.int64)
    return FeatureTable(Batch(stack(before), stack(after), stack(language), lab), tuple(kept), failures)


def episode_table(provider, registry, episodes, skip_missing: bool = False) -> FeatureTable:
    rows = [(ep.episode_id, ep.before_ref, ep.after_ref) for ep in episodes]
    return gather(provider, registry, rows, [ep.label for ep in episodes], skip_missing)
