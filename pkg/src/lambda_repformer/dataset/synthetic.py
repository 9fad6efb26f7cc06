"""Synthetic table-top worlds with a ground-truth predicate oracle.

Each episode samples up to ``n_objects_max`` objects on a grid, an
instruction, and an execution that is corrupted with probability
``failure_rate``. The label is the instruction's postcondition evaluated on
the post state. Feature blocks stand in for the external embedders:

* scene sources: raw per-slot object state (presence, pose, position, color, shape)
* aligned sources: instruction-conditioned match indicators (goal met, target pose, ...)
* narrative sources: the caption's content, i.e. target/reference relations and
  pairwise "near" relations between slots
* language sources: verb and object identity of the instruction

Every source applies its own fixed orthonormal mixing (the "backbone") plus
per-block Gaussian noise. With ``signal_group`` set, that group emits the
match indicators and every other visual group emits label-independent noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..representation.providers import MemoryProvider, Provenance, caption_phase
from ..representation.registry import VISUAL_GROUPS, SourceRegistry, SourceSpec
from .manifest import Episode

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("can", "bottle", "block", "bag")
VERBS = ("pick", "place_upright", "knock_over", "move_near")
CORRUPTIONS = ("wrong_object", "wrong_destination", "no_op")

SLOT_WIDTH = 6 + len(COLORS) + len(SHAPES)
N_INDICATORS = 8
N_INSTRUCTION = len(VERBS) + 2 * (len(COLORS) + len(SHAPES)) + 2


@dataclass(frozen=True)
class WorldObject:
    color: str
    shape: str
    x: int
    y: int
    upright: bool = True
    held: bool = False

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def on_table(self) -> bool:
        return not self.held


@dataclass(frozen=True)
class Action:
    verb: str
    target: int
    reference: int | None = None

    def instruction(self, objects: Sequence[WorldObject]) -> str:
        t = objects[self.target].name
        if self.verb == "pick":
            return f"pick {t}"
        if self.verb == "place_upright":
            return f"place {t} upright"
        if self.verb == "knock_over":
            return f"knock {t} over"
        return f"move {t} near {objects[self.reference].name}"


@dataclass(frozen=True)
class SyntheticWorld:
    objects: tuple[WorldObject, ...]
    action: Action
    executed_correctly: bool
    corruption: str | None
    post: tuple[WorldObject, ...]
    near_threshold: int = 1

    @property
    def instruction(self) -> str:
        return self.action.instruction(self.objects)

    @property
    def label(self) -> int:
        return int(goal_satisfied(self.post, self.action, self.near_threshold))


def chebyshev(a: WorldObject, b: WorldObject) -> int:
    return max(abs(a.x - b.x), abs(a.y - b.y))


def goal_satisfied(objects: Sequence[WorldObject], action: Action, near_threshold: int = 1) -> bool:
    """The predicate oracle: does the instruction's postcondition hold in ``objects``?"""
    t = objects[action.target]
    if action.verb == "pick":
        return t.held
    if action.verb == "place_upright":
        return t.on_table and t.upright
    if action.verb == "knock_over":
        return t.on_table and not t.upright
    if action.verb == "move_near":
        r = objects[action.reference]
        return t.on_table and r.on_table and chebyshev(t, r) <= near_threshold
    raise ConfigError(f"unknown verb {action.verb!r}")


@dataclass(frozen=True)
class SyntheticConfig:
    n_episodes: int = 2000
    n_objects_max: int = 4
    failure_rate: float = 0.5
    seed: int = 0
    corruptions: tuple[str, ...] = CORRUPTIONS
    signal_group: str | None = None
    grid: int = 8
    near_threshold: int = 1
    noise: float = 0.05
    backbone_seed: int = 0
    upright_prob: float = 0.6
    filler_scale: float = 0.1

    def __post_init__(self):
        if self.n_episodes < 0:
            raise ConfigError("n_episodes must be >= 0")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ConfigError(f"failure_rate must be in [0, 1], got {self.failure_rate}")
        if self.n_objects_max < 2:
            raise ConfigError("n_objects_max must be >= 2")
        if self.grid < 3 or self.grid * self.grid < 2 * self.n_objects_max:
            raise ConfigError("grid too small")
        if not self.corruptions or set(self.corruptions) - set(CORRUPTIONS):
            raise ConfigError(f"corruptions must be a non-empty subset of {CORRUPTIONS}")
        if self.signal_group not in (None,) + VISUAL_GROUPS:
            raise ConfigError(f"signal_group must be one of {VISUAL_GROUPS} or None")
        if self.noise < 0 or self.filler_scale < 0 or self.near_threshold < 1:
            raise ConfigError("noise and filler_scale must be >= 0, near_threshold >= 1")


# ---------------------------------------------------------------------------
# world sampling and execution
# ---------------------------------------------------------------------------


def _free_cells(objects, grid, exclude=()) -> list[tuple[int, int]]:
    taken = {(o.x, o.y) for i, o in enumerate(objects) if i not in exclude and o.on_table}
    return [(x, y) for x in range(grid) for y in range(grid) if (x, y) not in taken]


def _near_cells(objects, mover: int, ref: int, cfg: SyntheticConfig, near: bool) -> list[tuple[int, int]]:
    r = objects[ref]
    cells = []
    for x, y in _free_cells(objects, cfg.grid, exclude=(mover,)):
        d = max(abs(x - r.x), abs(y - r.y))
        if (x, y) == (objects[mover].x, objects[mover].y):
            continue
        if (near and 1 <= d <= cfg.near_threshold) or (not near and d > cfg.near_threshold):
            cells.append((x, y))
    return cells


def _feasible(objects, verb: str, target: int, ref: int | None, cfg) -> bool:
    t = objects[target]
    if not t.on_table:
        return False
    if verb == "pick":
        return True
    if verb == "place_upright":
        return not t.upright
    if verb == "knock_over":
        return t.upright
    r = objects[ref]
    return r.on_table and chebyshev(t, r) > cfg.near_threshold and bool(_near_cells(objects, target, ref, cfg, True))


def _candidate_actions(objects, cfg) -> list[Action]:
    acts = []
    n = len(objects)
    for verb in VERBS:
        for t in range(n):
            refs = [r for r in range(n) if r != t] if verb == "move_near" else [None]
            for r in refs:
                if _feasible(objects, verb, t, r, cfg):
                    acts.append(Action(verb, t, r))
    return acts


def _apply(objects, verb, target, ref, cfg, rng, near=True) -> tuple[WorldObject, ...]:
    objs = list(objects)
    t = objs[target]
    if verb == "pick":
        objs[target] = replace(t, held=True)
    elif verb == "place_upright":
        objs[target] = replace(t, upright=True)
    elif verb == "knock_over":
        objs[target] = replace(t, upright=False)
    else:
        cells = _near_cells(objs, target, ref, cfg, near)
        x, y = cells[int(rng.integers(len(cells)))]
        objs[target] = replace(t, x=x, y=y)
    return tuple(objs)


def _corrupt(objects, action: Action, cfg: SyntheticConfig, rng) -> tuple[str, tuple[WorldObject, ...]]:
    n = len(objects)
    options = []
    for kind in cfg.corruptions:
        if kind == "no_op":
            options.append(kind)
        elif kind == "wrong_object":
            others = [
                i for i in range(n)
                if i not in (action.target, action.reference)
                and _feasible(objects, action.verb, i, action.reference, cfg)
            ]  # fmt: skip
            if others:
                options.append(kind)
        elif kind == "wrong_destination" and action.verb == "move_near":
            if _near_cells(objects, action.target, action.reference, cfg, near=False):
                options.append(kind)
    if not options:
        return "no_op", tuple(objects)
    kind = options[int(rng.integers(len(options)))]
    if kind == "no_op":
        return kind, tuple(objects)
    if kind == "wrong_object":
        others = [
            i for i in range(n)
            if i not in (action.target, action.reference)
            and _feasible(objects, action.verb, i, action.reference, cfg)
        ]  # fmt: skip
        wrong = others[int(rng.integers(len(others)))]
        return kind, _apply(objects, action.verb, wrong, action.reference, cfg, rng)
    return kind, _apply(objects, action.verb, action.target, action.reference, cfg, rng, near=False)


def sample_world(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticWorld:
    while True:
        n = int(rng.integers(2, cfg.n_objects_max + 1))
        names = [(c, s) for c in COLORS for s in SHAPES]
        picks = rng.permutation(len(names))[:n]
        cells = rng.permutation(cfg.grid * cfg.grid)[:n]
        objects = tuple(
            WorldObject(
                names[k][0], names[k][1], int(c % cfg.grid), int(c // cfg.grid), bool(rng.random() < cfg.upright_prob)
            )
            for k, c in zip(picks, cells)
        )
        actions = _candidate_actions(objects, cfg)
        if not actions:
            continue
        # uniform over verbs first, then over that verb's feasible actions
        verbs = sorted({a.verb for a in actions}, key=VERBS.index)
        verb = verbs[int(rng.integers(len(verbs)))]
        pool = [a for a in actions if a.verb == verb]
        action = pool[int(rng.integers(len(pool)))]
        if rng.random() < cfg.failure_rate:
            kind, post = _corrupt(objects, action, cfg, rng)
            return SyntheticWorld(objects, action, False, kind, post, cfg.near_threshold)
        post = _apply(objects, action.verb, action.target, action.reference, cfg, rng)
        return SyntheticWorld(objects, action, True, None, post, cfg.near_threshold)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def _onehot(value, options) -> list[float]:
    return [1.0 if value == o else 0.0 for o in options]


def scene_features(objects: Sequence[WorldObject], cfg: SyntheticConfig) -> np.ndarray:
    g = cfg.grid - 1
    out = []
    for i in range(cfg.n_objects_max):
        if i < len(objects):
            o = objects[i]
            out += [1.0, float(o.on_table), float(o.held), float(o.upright), o.x / g, o.y / g]
            out += _onehot(o.color, COLORS) + _onehot(o.shape, SHAPES)
        else:
            out += [0.0] * SLOT_WIDTH
    return np.array(out + [1.0])


def match_indicators(objects: Sequence[WorldObject], action: Action, cfg: SyntheticConfig) -> np.ndarray:
    t = objects[action.target]
    near_ref = 0.0
    if action.reference is not None:
        near_ref = float(t.on_table and chebyshev(t, objects[action.reference]) <= cfg.near_threshold)
    g = cfg.grid - 1
    return np.array(
        [
            float(goal_satisfied(objects, action, cfg.near_threshold)),
            float(t.on_table),
            float(t.upright),
            float(t.held),
            near_ref,
            t.x / g,
            t.y / g,
            1.0,
        ]
    )


def relation_features(objects: Sequence[WorldObject], action: Action, cfg: SyntheticConfig) -> np.ndarray:
    t = objects[action.target]
    out = [float(t.on_table), float(t.upright)]
    if action.reference is not None:
        r = objects[action.reference]
        out += [float(chebyshev(t, r) <= cfg.near_threshold and t.on_table), float(r.on_table)]
    else:
        out += [0.0, 0.0]
    k = cfg.n_objects_max
    for i in range(k):
        for j in range(i + 1, k):
            near = i < len(objects) and j < len(objects)
            near = near and objects[i].on_table and objects[j].on_table
            out.append(float(near and chebyshev(objects[i], objects[j]) <= cfg.near_threshold))
    for i in range(k):
        o = objects[i] if i < len(objects) else None
        out += [float(o is not None and o.on_table), float(o is not None and o.upright)]
    return np.array(out + [1.0])


def instruction_features(objects: Sequence[WorldObject], action: Action) -> np.ndarray:
    t = objects[action.target]
    out = _onehot(action.verb, VERBS) + _onehot(t.color, COLORS) + _onehot(t.shape, SHAPES)
    if action.reference is not None:
        r = objects[action.reference]
        out += _onehot(r.color, COLORS) + _onehot(r.shape, SHAPES) + [1.0]
    else:
        out += [0.0] * (len(COLORS) + len(SHAPES)) + [0.0]
    return np.array(out + [1.0])


def caption_text(objects: Sequence[WorldObject], cfg: SyntheticConfig) -> str:
    parts = []
    for o in objects:
        if o.held:
            parts.append(f"the {o.name} is held by the gripper")
        else:
            pose = "upright" if o.upright else "lying on its side"
            parts.append(f"the {o.name} is {pose} at column {o.x}, row {o.y}")
    return "In the image, " + "; ".join(parts) + "."


def feature_lengths(cfg: SyntheticConfig) -> dict[str, int]:
    k = cfg.n_objects_max
    return {
        "scene": SLOT_WIDTH * k + 1,
        "aligned": N_INDICATORS,
        "narrative": 4 + k * (k - 1) // 2 + 2 * k + 1,
        "language": N_INSTRUCTION,
    }


def synthetic_registry(cfg: SyntheticConfig | None = None) -> SourceRegistry:
    """The default nine source ids, with dims sized for the synthetic features."""
    cfg = cfg or SyntheticConfig()
    lengths = feature_lengths(cfg)
    base = {"scene": 64, "aligned": 32, "narrative": 32, "language": 24}
    dims = {g: max(base[g], lengths[g], lengths["aligned"]) for g in base}
    ids = {
        "scene": ("vit", "dinov2", "clip_image_intermediate"),
        "aligned": ("clip_image_output",),
        "narrative": ("bert_caption", "te3l_caption"),
        "language": ("bert_instruction", "clip_text", "ada_instruction"),
    }
    return SourceRegistry(tuple(SourceSpec(sid, dims[g], g) for g in ids for sid in ids[g]))


class _Backbones:
    """Fixed orthonormal mixing per source; depends only on ``backbone_seed``."""

    def __init__(self, registry: SourceRegistry, cfg: SyntheticConfig):
        self.mix = {}
        lengths = feature_lengths(cfg)
        for idx, s in enumerate(registry):
            rng = np.random.default_rng([cfg.backbone_seed, 7919, idx])
            width = lengths[s.group]
            if s.group in VISUAL_GROUPS and cfg.signal_group is not None:
                width = N_INDICATORS
            q, _ = np.linalg.qr(rng.normal(size=(s.dim, s.dim)))
            self.mix[s.id] = q[:, :width] if width <= s.dim else None


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    registry: SourceRegistry
    episodes: list[Episode]
    worlds: list[SyntheticWorld]
    provider: MemoryProvider
    frame_states: dict[str, list[tuple[WorldObject, ...]]] = field(default_factory=dict)


class _Emitter:
    def __init__(self, cfg: SyntheticConfig, registry: SourceRegistry, provider: MemoryProvider):
        self.cfg = cfg
        self.registry = registry
        self.provider = provider
        self.backbones = _Backbones(registry, cfg)

    def _raw(self, group, objects, action) -> np.ndarray | None:
        cfg = self.cfg
        if cfg.signal_group is not None:
            return match_indicators(objects, action, cfg) if group == cfg.signal_group else None
        if group == "scene":
            return scene_features(objects, cfg)
        if group == "aligned":
            return match_indicators(objects, action, cfg)
        return relation_features(objects, action, cfg)

    def _emit(self, s: SourceSpec, raw, rng) -> np.ndarray:
        noise = rng.normal(0.0, self.cfg.noise, size=s.dim)
        if raw is None:  # label-independent filler
            return rng.normal(0.0, self.cfg.filler_scale, size=s.dim) + noise
        return self.backbones.mix[s.id] @ raw + noise

    def image(self, ep_index: int, episode_id: str, phase: str, phase_code: int, objects, action) -> None:
        seed = self.cfg.seed
        for s_idx, s in enumerate(self.registry):
            if s.group == "language":
                continue
            rng = np.random.default_rng([seed, ep_index, phase_code, s_idx])
            stored = caption_phase(phase) if s.group == "narrative" else phase
            self.provider.put(episode_id, stored, s.id, self._emit(s, self._raw(s.group, objects, action), rng))
        self.provider.put_caption(episode_id, phase, caption_text(objects, self.cfg))

    def instruction(self, ep_index: int, episode_id: str, objects, action) -> None:
        raw = instruction_features(objects, action)
        for s_idx, s in enumerate(self.registry.group("language")):
            rng = np.random.default_rng([self.cfg.seed, ep_index, 1_000_000, s_idx])
            self.provider.put(episode_id, "instruction", s.id, self._emit(s, raw, rng))


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Sample ``n_episodes`` before/after episodes and their feature store."""
    registry = synthetic_registry(cfg)
    provider = MemoryProvider(registry, Provenance.SYNTHETIC)
    emitter = _Emitter(cfg, registry, provider)
    rng = np.random.default_rng([cfg.seed, 17])
    episodes, worlds = [], []
    for i in range(cfg.n_episodes):
        world = sample_world(cfg, rng)
        ep_id = f"syn{cfg.seed}-{i:05d}"
        emitter.image(i, ep_id, "before", 0, world.objects, world.action)
        emitter.image(i, ep_id, "after", 1, world.post, world.action)
        emitter.instruction(i, ep_id, world.objects, world.action)
        episodes.append(Episode(ep_id, world.instruction, world.label))
        worlds.append(world)
    return SyntheticDataset(cfg, registry, episodes, worlds, provider)


def generate_synthetic_videos(
    cfg: SyntheticConfig, n_frames: int = 16, change_at: int | None = None
) -> SyntheticDataset:
    """Videos of ``n_frames`` frames; the executed action takes effect at frame ``change_at``.

    ``change_at=None`` draws it uniformly from 1..n_frames-1 per episode.
    Frames are named ``t00``, ``t01``, ...; the label is the oracle on the last frame.
    """
    if n_frames < 2:
        raise ConfigError("a video needs at least 2 frames")
    if change_at is not None and not 1 <= change_at < n_frames:
        raise ConfigError(f"change_at must be in [1, {n_frames - 1}]")
    registry = synthetic_registry(cfg)
    provider = MemoryProvider(registry, Provenance.SYNTHETIC)
    emitter = _Emitter(cfg, registry, provider)
    rng = np.random.default_rng([cfg.seed, 23])
    width = max(2, len(str(n_frames - 1)))
    names = tuple(f"t{n:0{width}d}" for n in range(n_frames))
    episodes, worlds, states = [], [], {}
    for i in range(cfg.n_episodes):
        world = sample_world(cfg, rng)
        k = change_at if change_at is not None else int(rng.integers(1, n_frames))
        ep_id = f"vid{cfg.seed}-{i:05d}"
        frames = [world.objects if n < k else world.post for n in range(n_frames)]
        for n, objs in enumerate(frames):
            emitter.image(i, ep_id, names[n], n, objs, world.action)
        emitter.instruction(i, ep_id, world.objects, world.action)
        episodes.append(Episode(ep_id, world.instruction, world.label, names[0], names[-1], frames=names))
        worlds.append(world)
        states[ep_id] = frames
    return SyntheticDataset(cfg, registry, episodes, worlds, provider, states)
