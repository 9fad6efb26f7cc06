"""Embedding providers: file-backed, in-memory, seeded random, and remote."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from ..errors import ConfigError, MissingCaptionError, MissingFeatureError, RemoteEmbeddingError
from . import lrep
from .registry import SourceRegistry

log = logging.getLogger(__name__)

CAPTION_PREFIX = "caption_"


class Provenance(str, enum.Enum):
    FILE = "file"
    SYNTHETIC = "synthetic"
    REMOTE = "remote"


@dataclass(frozen=True, eq=False)
class FeatureBlock:
    """One embedding vector from one named source. Values are float32."""

    source_id: str
    values: np.ndarray
    provenance: Provenance = Provenance.FILE

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if vals.size == 0:
            raise ConfigError(f"block {self.source_id!r} is empty")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, FeatureBlock):
            return NotImplemented
        return self.source_id == other.source_id and np.array_equal(self.values, other.values)


def caption_phase(phase: str) -> str:
    """Phase name under which caption embeddings for ``phase`` are stored."""
    return CAPTION_PREFIX + phase


class EmbeddingProvider(Protocol):
    registry: SourceRegistry

    def get(self, episode_id: str, phase: str, source_id: str) -> FeatureBlock: ...

    def caption(self, episode_id: str, phase: str) -> str: ...


def _checked(registry: SourceRegistry, block: FeatureBlock, episode_id: str) -> FeatureBlock:
    if block.source_id not in registry:
        raise ConfigError(f"source {block.source_id!r} is not in the registry")
    want = registry.dim(block.source_id)
    if block.dim != want:
        raise ConfigError(
            f"episode {episode_id!r}: source {block.source_id!r} has dim {block.dim}, registry declares {want}"
        )
    return block


class FileProvider:
    """Reads ``<root>/<episode>/<phase>/<source>.lrep`` and ``<root>/<episode>/<phase>.caption.txt``."""

    def __init__(self, root, registry: SourceRegistry):
        self.root = Path(root)
        self.registry = registry

    def block_path(self, episode_id: str, phase: str, source_id: str) -> Path:
        return self.root / episode_id / phase / f"{source_id}.lrep"

    def caption_path(self, episode_id: str, phase: str) -> Path:
        return self.root / episode_id / f"{phase}.caption.txt"

    def get(self, episode_id, phase, source_id):
        path = self.block_path(episode_id, phase, source_id)
        try:
            sid, values = lrep.read_block(path)
        except FileNotFoundError:
            raise MissingFeatureError(episode_id, source_id, phase) from None
        if sid != source_id:
            raise ConfigError(f"{path}: header says source {sid!r}")
        return _checked(self.registry, FeatureBlock(sid, values, Provenance.FILE), episode_id)

    def caption(self, episode_id, phase):
        try:
            return self.caption_path(episode_id, phase).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise MissingCaptionError(episode_id, phase) from None

    def write(self, episode_id: str, phase: str, block: FeatureBlock) -> None:
        _checked(self.registry, block, episode_id)
        lrep.write_block(self.block_path(episode_id, phase, block.source_id), block.source_id, block.values)

    def write_caption(self, episode_id: str, phase: str, text: str) -> None:
        lrep.atomic_write(self.caption_path(episode_id, phase), text.encode("utf-8"))


class MemoryProvider:
    """Dict-backed store; the synthetic generator fills one of these."""

    def __init__(self, registry: SourceRegistry, provenance: Provenance = Provenance.SYNTHETIC):
        self.registry = registry
        self.provenance = provenance
        self._blocks: dict[tuple[str, str, str], np.ndarray] = {}
        self._captions: dict[tuple[str, str], str] = {}

    def put(self, episode_id: str, phase: str, source_id: str, values) -> None:
        block = _checked(self.registry, FeatureBlock(source_id, values, self.provenance), episode_id)
        self._blocks[(episode_id, phase, source_id)] = block.values

    def put_caption(self, episode_id: str, phase: str, text: str) -> None:
        self._captions[(episode_id, phase)] = text

    def get(self, episode_id, phase, source_id):
        try:
            values = self._blocks[(episode_id, phase, source_id)]
        except KeyError:
            raise MissingFeatureError(episode_id, source_id, phase) from None
        return FeatureBlock(source_id, values, self.provenance)

    def caption(self, episode_id, phase):
        try:
            return self._captions[(episode_id, phase)]
        except KeyError:
            raise MissingCaptionError(episode_id, phase) from None

    def keys(self):
        return list(self._blocks)

    def dump(self, root) -> FileProvider:
        """Write every block and caption into an LREP store under ``root``."""
        out = FileProvider(root, self.registry)
        for (ep, phase, sid), values in self._blocks.items():
            out.write(ep, phase, FeatureBlock(sid, values, Provenance.FILE))
        for (ep, phase), text in self._captions.items():
            out.write_caption(ep, phase, text)
        return out


def _seed_from(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RandomProvider:
    """Seeded pseudo-random blocks, deterministic in (seed, episode, phase, source).

    Every episode exists and has a caption; used for toys and smoke tests.
    """

    def __init__(self, registry: SourceRegistry, seed: int = 0, scale: float = 1.0):
        self.registry = registry
        self.seed = seed
        self.scale = scale

    def get(self, episode_id, phase, source_id):
        if source_id not in self.registry:
            raise MissingFeatureError(episode_id, source_id, phase)
        rng = np.random.default_rng(_seed_from(self.seed, episode_id, phase, source_id))
        values = rng.uniform(-self.scale, self.scale, size=self.registry.dim(source_id))
        return FeatureBlock(source_id, values, Provenance.SYNTHETIC)

    def caption(self, episode_id, phase):
        return f"In the image, a synthetic scene for episode {episode_id} ({phase})."


class ExclusiveProvider:
    """Serializes calls into a provider that is not safe for concurrent use."""

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.registry = inner.registry
        self._lock = threading.Lock()

    def get(self, episode_id, phase, source_id):
        with self._lock:
            return self.inner.get(episode_id, phase, source_id)

    def caption(self, episode_id, phase):
        with self._lock:
            return self.inner.caption(episode_id, phase)


@dataclass
class RemoteProvider:
    """Fetches embeddings from ``POST {url}/v1/embed`` and caches them as LREP files.

    Request: ``{"source_id", "payload_type": "text"|"image_path", "payload"}``.
    Response: ``{"dim", "values"}``. Instruction text comes from
    ``instructions``; captions are read from the cache root's sidecars.
    """

    url: str
    registry: SourceRegistry
    cache_root: Path
    instructions: Mapping[str, str] = field(default_factory=dict)
    image_path: Callable[[str, str], str] | None = None
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        self.cache_root = Path(self.cache_root)
        self._cache = FileProvider(self.cache_root, self.registry)

    def caption(self, episode_id, phase):
        return self._cache.caption(episode_id, phase)

    def _payload(self, episode_id: str, phase: str) -> tuple[str, str]:
        if phase == "instruction":
            try:
                return "text", self.instructions[episode_id]
            except KeyError:
                raise MissingFeatureError(episode_id, "instruction", phase) from None
        if phase.startswith(CAPTION_PREFIX):
            return "text", self.caption(episode_id, phase[len(CAPTION_PREFIX) :])
        if self.image_path is not None:
            return "image_path", self.image_path(episode_id, phase)
        return "image_path", str(self.cache_root / episode_id / f"{phase}.png")

    def _post(self, body: dict) -> dict:
        data = json.dumps(body).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(
                self.url.rstrip("/") + "/v1/embed",
                data=data,
                headers={"Content-Type": "application/json"},
                method="POST",
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                last = exc
                if 400 <= exc.code < 500 and exc.code != 429:
                    break
            except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
                last = exc
            log.warning("embed request for %s failed (attempt %d): %s", body["source_id"], attempt + 1, last)
        raise RemoteEmbeddingError(f"embedding service failed for {body['source_id']!r}: {last}")

    def get(self, episode_id, phase, source_id):
        try:
            return self._cache.get(episode_id, phase, source_id)
        except MissingFeatureError as exc:
            if isinstance(exc, MissingCaptionError):
                raise
        if source_id not in self.registry:
            raise MissingFeatureError(episode_id, source_id, phase)
        payload_type, payload = self._payload(episode_id, phase)
        reply = self._post({"source_id": source_id, "payload_type": payload_type, "payload": payload})
        try:
            values = np.asarray(reply["values"], dtype=np.float32)
            dim = int(reply["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RemoteEmbeddingError(f"malformed reply for {source_id!r}: {exc}") from exc
        if dim != values.size:
            raise RemoteEmbeddingError(f"reply for {source_id!r} says dim={dim} but has {values.size} values")
        block = _checked(self.registry, FeatureBlock(source_id, values, Provenance.REMOTE), episode_id)
        self._cache.write(episode_id, phase, block)
        return block
