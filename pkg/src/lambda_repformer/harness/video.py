"""Video episodes: success if any (frame 0, frame n) pair is predicted successful."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset.manifest import Episode, video_pairs
from .features import gather
from .training import Model


@dataclass(frozen=True)
class VideoResult:
    success: bool
    first_success: int | None
    p_success: tuple[float, ...]  # entry n-1 belongs to pair (0, n)
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "first_success": self.first_success,
            "p_success": list(self.p_success),
            "threshold": self.threshold,
        }


def classify_video(model: Model, episode: Episode, provider, threshold: float = 0.5) -> VideoResult:
    """Scores the pairs in order and returns at the first predicted success.

    ``p_success`` holds the probabilities of the pairs that were scored.
    """
    if not isinstance(model, Model):
        model = Model.load(model)
    probs = []
    for pair in video_pairs(episode):
        table = gather(provider, model.registry, [(episode.episode_id, pair.before, pair.after)])
        p = float(model.predict(table)[0])
        probs.append(p)
        if p >= threshold:
            return VideoResult(True, pair.index, tuple(probs), threshold)
    return VideoResult(False, None, tuple(probs), threshold)


def pair_probabilities(model: Model, episode: Episode, provider) -> np.ndarray:
    """P(success) for every pair, evaluated as one batch."""
    rows = [(episode.episode_id, p.before, p.after) for p in video_pairs(episode)]
    return model.predict(gather(provider, model.registry, rows))
