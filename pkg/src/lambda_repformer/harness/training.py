"""Training with validation-based model selection, evaluation, and checkpointed models."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..dataset.manifest import DatasetSplit, Episode
from ..decoder import (
    MODES,
    DecoderConfig,
    DecoderParams,
    load_checkpoint,
    loss_and_grads,
    model_spec,
    predict_proba,
    save_checkpoint,
    spec_digest,
)
from ..errors import ConfigError, NumericError, TrainingDivergedError
from ..numerics import AdamState, adam_step
from ..representation.lrep import atomic_write
from ..representation.registry import GROUP_ABBREV, SourceRegistry, register_sources
from .features import FeatureTable, episode_table
from .metrics import ConfusionMatrix, confusion_from_predictions

_GROUP_TO_ABBREV = {v: k for k, v in GROUP_ABBREV.items()}


def _normalize_groups(groups) -> tuple[str, ...]:
    out = []
    for g in groups:
        g = _GROUP_TO_ABBREV.get(g, g)
        if g not in GROUP_ABBREV:
            raise ConfigError(f"unknown representation group {g!r}; expected a subset of SR, AR, NR")
        out.append(g)
    return tuple(a for a in GROUP_ABBREV if a in out)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-1
    batch_size: int = 32
    epochs: int = 150
    seed: int = 0
    mode: str = "cross"
    enabled_groups: tuple[str, ...] = ("SR", "AR", "NR")
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "enabled_groups", _normalize_groups(self.enabled_groups))
        if isinstance(self.decoder, Mapping):
            object.__setattr__(self, "decoder", DecoderConfig.from_dict(self.decoder))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.enabled_groups:
            raise ConfigError("enabled_groups must name at least one of SR, AR, NR")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.weight_decay >= 0):
            raise ConfigError("invalid optimizer settings")

    def to_json(self) -> dict:
        d = asdict(self)
        d["enabled_groups"] = list(self.enabled_groups)
        d["decoder"] = self.decoder.to_dict()
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        if "enabled_groups" in d:
            d["enabled_groups"] = tuple(d["enabled_groups"])
        return cls(**d)

    def digest(self) -> str:
        return spec_digest(self.to_json())


PROFILES = {
    "paper": TrainConfig(),
    "desk": TrainConfig(lr=1e-3, epochs=30, decoder=DecoderConfig(d_model=32, mlp_hidden=(64, 32))),
}


def profile(name: str, **overrides) -> TrainConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(base, **overrides)


def best_epoch(val_accuracy: Sequence[float]) -> int:
    """Index of the highest validation accuracy; ties go to the earliest epoch."""
    if len(val_accuracy) == 0:
        raise ConfigError("no epochs recorded")
    return int(np.argmax(np.asarray(val_accuracy, dtype=np.float64)))


@dataclass(frozen=True)
class RunResult:
    train_loss: tuple[float, ...]
    val_accuracy: tuple[float, ...]
    best_epoch: int
    test: ConfusionMatrix
    seeds: tuple[int, ...]
    mean_accuracy: float
    std_accuracy: float
    config_digest: str = ""
    checkpoint_digest: str = ""

    def to_json(self) -> dict:
        return {
            "train_loss": list(self.train_loss),
            "val_accuracy": list(self.val_accuracy),
            "best_epoch": self.best_epoch,
            "test": self.test.to_json(),
            "seeds": list(self.seeds),
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "config_digest": self.config_digest,
            "checkpoint_digest": self.checkpoint_digest,
        }

    def csv_rows(self) -> list[dict]:
        return [
            {"epoch": i, "train_loss": loss, "val_accuracy": acc, "best": int(i == self.best_epoch)}
            for i, (loss, acc) in enumerate(zip(self.train_loss, self.val_accuracy))
        ]


@dataclass
class Model:
    """Trained parameters plus the attention mode they were trained in."""

    params: DecoderParams
    mode: str = "cross"

    @property
    def registry(self) -> SourceRegistry:
        return self.params.registry

    @property
    def digest(self) -> str:
        return spec_digest(model_spec(self.params.registry, self.params.config, self.mode))

    def predict(self, table: FeatureTable) -> np.ndarray:
        if len(table) == 0:
            return np.zeros(0)
        return predict_proba(self.params, table.batch, self.mode)

    def save(self, path) -> str:
        """Write the LRCK checkpoint and a ``.json`` sidecar holding its model spec."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        digest = save_checkpoint(path, self.params, self.mode)
        spec = model_spec(self.params.registry, self.params.config, self.mode)
        atomic_write(sidecar_path(path), json.dumps(spec, indent=2, sort_keys=True).encode())
        return digest

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        try:
            spec = json.loads(sidecar_path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: missing model spec sidecar {sidecar_path(path).name}") from None
        registry = register_sources(spec["registry"])
        config = DecoderConfig.from_dict(spec["decoder"])
        return cls(load_checkpoint(path, registry, config, spec["mode"]), spec["mode"])


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


@dataclass
class TrainOutcome:
    result: RunResult
    model: Model
    checkpoint: Path | None = None


def _param_norms(params: DecoderParams) -> dict[str, float]:
    return {n: float(np.linalg.norm(v)) for n, v in params.tensors.items()}


def _split_episodes(episodes: Sequence[Episode], split: DatasetSplit):
    by_id = {ep.episode_id: ep for ep in episodes}
    out = []
    for part in (split.train, split.val, split.test):
        missing = [i for i in part if i not in by_id]
        if missing:
            raise ConfigError(f"split names {len(missing)} episode(s) absent from the manifest, e.g. {missing[0]!r}")
        out.append([by_id[i] for i in part])
    return out


def _accuracy(model: Model, table: FeatureTable, threshold: float) -> float:
    if len(table) == 0:
        return 0.0
    return confusion_from_predictions(model.predict(table), table.batch.labels, threshold).accuracy


def train(
    episodes: Sequence[Episode],
    split: DatasetSplit,
    config: TrainConfig,
    provider,
    registry: SourceRegistry | None = None,
    checkpoint_path=None,
) -> TrainOutcome:
    """Mini-batch Adam training; keeps the parameters from the best validation epoch.

    Validation accuracy is computed after every epoch. The selected parameters
    are rounded to checkpoint (float32) precision before the test evaluation,
    so a saved and reloaded checkpoint reproduces the reported test matrix.
    """
    registry = (registry or provider.registry).restrict(config.enabled_groups)
    train_eps, val_eps, test_eps = _split_episodes(episodes, split)
    if not train_eps:
        raise ConfigError("training split is empty")
    tables = [episode_table(provider, registry, eps) for eps in (train_eps, val_eps, test_eps)]
    tr, va, te = tables

    params = DecoderParams.init(registry, config.decoder, seed=config.seed)
    state = AdamState(
        lr=config.lr, beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng([config.seed, 1])
    n = len(tr)
    losses, val_acc = [], []
    best, best_acc = None, -1.0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                loss, grads = loss_and_grads(params, tr.rows(idx), config.mode)
            except NumericError:
                loss = math.nan
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, _param_norms(params))
            new, state = adam_step(params.tensors, grads, state)
            params = params.replace(new)
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / n)
        acc = _accuracy(Model(params, config.mode), va, config.threshold)
        val_acc.append(acc)
        if acc > best_acc:
            best_acc, best = acc, params.quantized()

    model = Model(best, config.mode)
    matrix = confusion_from_predictions(model.predict(te), te.batch.labels, config.threshold)
    digest = ""
    if checkpoint_path is not None:
        digest = model.save(checkpoint_path)
        checkpoint_path = Path(checkpoint_path)
    result = RunResult(
        train_loss=tuple(losses),
        val_accuracy=tuple(val_acc),
        best_epoch=best_epoch(val_acc),
        test=matrix,
        seeds=(config.seed,),
        mean_accuracy=matrix.accuracy,
        std_accuracy=0.0,
        config_digest=config.digest(),
        checkpoint_digest=digest or model.digest,
    )
    return TrainOutcome(result, model, checkpoint_path)


@dataclass
class Evaluation:
    matrix: ConfusionMatrix
    episode_ids: tuple[str, ...]
    p_success: np.ndarray
    excluded: dict[str, str]


def evaluate_detailed(
    model: Model | str | Path, episodes: Sequence[Episode], provider, threshold: float = 0.5, skip_missing=False
) -> Evaluation:
    if not isinstance(model, Model):
        model = Model.load(model)
    table = episode_table(provider, model.registry, episodes, skip_missing=skip_missing)
    p = model.predict(table)
    labels = table.batch.labels
    return Evaluation(confusion_from_predictions(p, labels, threshold), table.episode_ids, p, table.failures)


def evaluate(
    model: Model | str | Path, episodes: Sequence[Episode], provider, threshold: float = 0.5, skip_missing=False
) -> ConfusionMatrix:
    """Confusion matrix with y_hat = 1 iff p_success >= threshold.

    ``model`` is a ``Model`` or a checkpoint path. Missing features raise
    ``FeatureLookupError`` listing every failing episode unless ``skip_missing``.
    """
    return evaluate_detailed(model, episodes, provider, threshold, skip_missing).matrix
