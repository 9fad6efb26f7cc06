"""Ablation runner: representation-group subsets and attention modes."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from ..dataset.manifest import DatasetSplit, Episode
from ..errors import ConfigError
from ..representation.lrep import atomic_write
from .training import TrainConfig, train


@dataclass(frozen=True)
class Condition:
    name: str
    enabled_groups: tuple[str, ...]
    mode: str = "cross"


# rows (i)-(vii): every non-empty subset of {SR, AR, NR}
GROUP_CONDITIONS = (
    Condition("i", ("AR", "NR")),
    Condition("ii", ("SR", "NR")),
    Condition("iii", ("SR", "AR")),
    Condition("iv", ("SR",)),
    Condition("v", ("AR",)),
    Condition("vi", ("NR",)),
    Condition("vii", ("SR", "AR", "NR")),
)
MODE_CONDITIONS = (
    Condition("self", ("SR", "AR", "NR"), "self"),
    Condition("cross", ("SR", "AR", "NR"), "cross"),
)
DEFAULT_CONDITIONS = GROUP_CONDITIONS + MODE_CONDITIONS


def conditions_by_name(names: Sequence[str]) -> tuple[Condition, ...]:
    table = {c.name: c for c in DEFAULT_CONDITIONS}
    out = []
    for n in names:
        if n not in table:
            raise ConfigError(f"unknown ablation condition {n!r}; known: {', '.join(table)}")
        out.append(table[n])
    return tuple(out)


@dataclass(frozen=True)
class AblationRow:
    condition: str
    enabled_groups: tuple[str, ...]
    mode: str
    accuracy: float
    best_epoch: int
    seed: int

    def to_json(self) -> dict:
        return {
            "condition": self.condition,
            "enabled_groups": "+".join(self.enabled_groups),
            "mode": self.mode,
            "accuracy": self.accuracy,
            "best_epoch": self.best_epoch,
            "seed": self.seed,
        }


def run_ablation(
    base: TrainConfig,
    episodes: Sequence[Episode],
    split: DatasetSplit,
    provider,
    conditions: Sequence[Condition] = DEFAULT_CONDITIONS,
    registry=None,
) -> list[AblationRow]:
    """Train and test one model per condition, all with ``base.seed``."""
    if not conditions:
        raise ConfigError("ablation needs at least one condition")
    rows = []
    for c in conditions:
        cfg = replace(base, enabled_groups=c.enabled_groups, mode=c.mode)
        res = train(episodes, split, cfg, provider, registry).result
        rows.append(AblationRow(c.name, cfg.enabled_groups, c.mode, res.test.accuracy, res.best_epoch, cfg.seed))
    return rows


def table_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_table(out_dir, stem: str, rows: Sequence[dict], meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (rows plus ``meta``) and ``<stem>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    j, c = out / f"{stem}.json", out / f"{stem}.csv"
    atomic_write(j, json.dumps({**(meta or {}), "rows": list(rows)}, indent=2).encode())
    atomic_write(c, table_csv(rows).encode())
    return j, c
