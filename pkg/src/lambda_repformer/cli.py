"""Command-line entry point: ``lambda-repformer <command> [flags]``.

Every command accepts ``--config FILE`` (a JSON object whose keys are the
command's long flag names with dashes replaced by underscores), ``--seed``
and ``--out``. Explicit flags win over config values, which win over the
built-in defaults. Outputs are written only under ``--out``, and every JSON
output carries the digest of the effective configuration.

Exit codes: 0 success, 1 runtime failure (JSON error on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import (
    DatasetSplit,
    SyntheticConfig,
    cleanse_negatives,
    dataset_stats,
    generate_synthetic,
    generate_synthetic_videos,
    load_manifest,
    split_dataset,
    write_manifest,
)
from .decoder import DecoderConfig, count_params, param_shapes
from .errors import ConfigError, RepformerError
from .harness import (
    Model,
    TrainConfig,
    classify_video,
    conditions_by_name,
    evaluate_detailed,
    profile,
    run_ablation,
    seed_sweep,
    train,
    write_table,
)
from .harness.ablation import DEFAULT_CONDITIONS
from .harness.gradcheck import decoder_grad_error
from .representation import FileProvider, load_registry, register_sources
from .representation.lrep import atomic_write

GRADCHECK_TOL = 1e-4

# built-in defaults per command; flags default to None so config values can fill in
DEFAULTS = {
    "stats": {},
    "cleanse": {"pool": None},
    "split": {"sizes": None, "stratify": False},
    "synth": {
        "n_episodes": 2500,
        "n_objects_max": 4,
        "failure_rate": 0.5,
        "signal_group": None,
        "near_threshold": 1,
        "noise": 0.05,
        "backbone_seed": 0,
        "sizes": None,
        "video": False,
        "frames": 16,
        "change_at": None,
    },
    "train": {
        "profile": "desk",
        "lr": None,
        "weight_decay": None,
        "batch_size": None,
        "epochs": None,
        "mode": None,
        "groups": None,
        "decoder": None,
        "n_seeds": 1,
    },
    "eval": {"part": "test", "split": None, "threshold": 0.5, "skip_missing": False},
    "ablate": {"profile": "desk", "lr": None, "weight_decay": None, "batch_size": None, "epochs": None,
               "decoder": None, "conditions": None},
    "video": {"episode": None, "threshold": 0.5},
    "gradcheck": {"dims": 4, "seeds": 20, "mode": "cross"},
    "params": {"registry": None, "d_model": 256, "mlp_hidden": "256,256", "mode": "cross"},
}  # fmt: skip
COMMON = {"seed": 0, "out": None, "registry": None}
REQUIRED = {
    "stats": ("manifest",),
    "cleanse": ("manifest",),
    "split": ("manifest", "sizes"),
    "synth": ("out",),
    "train": ("manifest", "features", "split"),
    "eval": ("manifest", "features", "checkpoint"),
    "ablate": ("manifest", "features", "split"),
    "video": ("manifest", "features", "checkpoint"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in str(text).split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lambda-repformer", description="Success prediction for open-vocabulary manipulation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def cmd(name, help_text):
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--config", help="JSON file of flag values (flags override it)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory")
        return s

    def data_flags(s, features=True):
        s.add_argument("--manifest", help="episode manifest (JSON Lines)")
        if features:
            s.add_argument("--features", help="LREP feature store root")
            s.add_argument("--registry", default=None, help="source registry JSON (default: <features>/registry.json)")

    def train_flags(s):
        s.add_argument("--split", help="split JSON written by the split or synth command")
        s.add_argument("--profile", default=None, choices=["desk", "paper"])
        s.add_argument("--lr", type=float, default=None)
        s.add_argument("--weight-decay", type=float, default=None)
        s.add_argument("--batch-size", type=int, default=None)
        s.add_argument("--epochs", type=int, default=None)

    s = cmd("stats", "Counts, vocabulary size and instruction length of a manifest.")
    data_flags(s, features=False)

    s = cmd("cleanse", "Replace the instructions of flagged mislabeled negatives.")
    data_flags(s, features=False)
    s.add_argument("--pool", default=None, help="text file of instructions, one per line (default: manifest)")

    s = cmd("split", "Deterministic train/val/test split.")
    data_flags(s, features=False)
    s.add_argument("--sizes", type=_int_list, default=None, help="train,val,test counts")
    s.add_argument("--stratify", action="store_true", default=None)

    s = cmd("synth", "Generate a synthetic episode set with its LREP feature store.")
    s.add_argument("--n-episodes", type=int, default=None)
    s.add_argument("--n-objects-max", type=int, default=None)
    s.add_argument("--failure-rate", type=float, default=None)
    s.add_argument("--signal-group", choices=["scene", "aligned", "narrative"], default=None)
    s.add_argument("--near-threshold", type=int, default=None)
    s.add_argument("--noise", type=float, default=None)
    s.add_argument("--backbone-seed", type=int, default=None)
    s.add_argument("--sizes", type=_int_list, default=None, help="also write split.json with these sizes")
    s.add_argument("--video", action="store_true", default=None, help="generate multi-frame video episodes")
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--change-at", type=int, default=None)

    s = cmd("train", "Train a decoder and keep the best validation epoch.")
    data_flags(s)
    train_flags(s)
    s.add_argument("--mode", choices=["cross", "self"], default=None)
    s.add_argument("--groups", type=_str_list, default=None, help="enabled groups, e.g. SR,AR,NR")
    s.add_argument("--n-seeds", type=int, default=None, help="seed sweep size")

    s = cmd("eval", "Evaluate a checkpoint on a manifest (optionally one split part).")
    data_flags(s)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default=None)
    s.add_argument("--part", choices=["train", "val", "test"], default=None)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--skip-missing", action="store_true", default=None)

    s = cmd("ablate", "Train/test one model per ablation condition.")
    data_flags(s)
    train_flags(s)
    s.add_argument("--conditions", type=_str_list, default=None,
                   help=f"subset of {','.join(c.name for c in DEFAULT_CONDITIONS)}")  # fmt: skip

    s = cmd("video", "Classify video episodes by the any-pair rule.")
    data_flags(s)
    s.add_argument("--checkpoint")
    s.add_argument("--episode", default=None, help="only this episode id")
    s.add_argument("--threshold", type=float, default=None)

    s = cmd("gradcheck", "Finite-difference check of the decoder gradients.")
    s.add_argument("--dims", type=int, default=None, help="toy d_model")
    s.add_argument("--seeds", type=int, default=None)
    s.add_argument("--mode", choices=["cross", "self"], default=None)

    s = cmd("params", "Trainable parameter count for a registry and decoder size.")
    s.add_argument("--registry", default=None)
    s.add_argument("--d-model", type=int, default=None)
    s.add_argument("--mlp-hidden", default=None, help="comma-separated widths")
    s.add_argument("--mode", choices=["cross", "self"], default=None)
    return p


def _merge(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags."""
    opts = {**COMMON, **DEFAULTS[args.command]}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        known = set(opts) | set(vars(args))
        unknown = set(cfg) - known - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        opts.update({k: v for k, v in cfg.items() if k != "command"})
    for k, v in vars(args).items():
        if k in ("command", "config"):
            continue
        if v is not None or k not in opts:
            opts[k] = v
    missing = [k for k in REQUIRED.get(args.command, ()) if opts.get(k) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"lambda-repformer {args.command}: error: missing required {flags}")
    return opts


def _digest(opts: dict) -> str:
    return hashlib.sha256(json.dumps(opts, sort_keys=True, default=str).encode()).hexdigest()


def _out_dir(opts) -> Path | None:
    if opts.get("out") is None:
        return None
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2) + "\n").encode())


def _emit(opts, name: str | None, payload: dict) -> None:
    payload = {"command": opts["_command"], "config_digest": opts["_digest"], **payload}
    out = _out_dir(opts)
    if out is not None and name is not None:
        _write_json(out / name, payload)
    print(json.dumps(payload, indent=2))


def _provider(opts):
    root = Path(opts["features"])
    reg_path = opts.get("registry") or root / "registry.json"
    registry = load_registry(reg_path) if Path(reg_path).exists() else register_sources()
    return FileProvider(root, registry), registry


def _load_split(path) -> DatasetSplit:
    with open(path, encoding="utf-8") as fh:
        return DatasetSplit.from_json(json.load(fh))


def _train_config(opts) -> TrainConfig:
    overrides = {k: opts[k] for k in ("lr", "weight_decay", "batch_size", "epochs") if opts.get(k) is not None}
    if opts.get("mode"):
        overrides["mode"] = opts["mode"]
    if opts.get("groups"):
        overrides["enabled_groups"] = tuple(opts["groups"])
    overrides["seed"] = opts["seed"]
    cfg = profile(opts["profile"], **overrides)
    if opts.get("decoder"):
        cfg = replace(cfg, decoder=DecoderConfig.from_dict({**cfg.decoder.to_dict(), **opts["decoder"]}))
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_stats(opts):
    stats = dataset_stats(load_manifest(opts["manifest"]))
    _emit(opts, "stats.json", stats.to_json())


def cmd_cleanse(opts):
    eps = load_manifest(opts["manifest"])
    pool = None
    if opts.get("pool"):
        pool = [line.strip() for line in Path(opts["pool"]).read_text(encoding="utf-8").splitlines() if line.strip()]
    cleaned = cleanse_negatives(eps, pool, seed=opts["seed"])
    changed = [a.episode_id for a, b in zip(eps, cleaned) if a.instruction != b.instruction]
    out = _out_dir(opts)
    if out is not None:
        write_manifest(out / "manifest.jsonl", cleaned)
    _emit(opts, "cleanse.json", {"episodes": len(eps), "replaced": len(changed)})


def cmd_split(opts):
    eps = load_manifest(opts["manifest"])
    split = split_dataset(eps, opts["sizes"], seed=opts["seed"], stratify=bool(opts["stratify"]))
    out = _out_dir(opts)
    if out is not None:
        _write_json(out / "split.json", {**split.to_json(), "config_digest": opts["_digest"]})
    print(json.dumps({"sizes": list(split.sizes), "seed": split.seed, "config_digest": opts["_digest"]}))


def cmd_synth(opts):
    out = _out_dir(opts)
    cfg = SyntheticConfig(
        n_episodes=opts["n_episodes"],
        n_objects_max=opts["n_objects_max"],
        failure_rate=opts["failure_rate"],
        seed=opts["seed"],
        signal_group=opts["signal_group"],
        near_threshold=opts["near_threshold"],
        noise=opts["noise"],
        backbone_seed=opts["backbone_seed"],
    )
    if opts["video"]:
        data = generate_synthetic_videos(cfg, n_frames=opts["frames"], change_at=opts["change_at"])
    else:
        data = generate_synthetic(cfg)
    write_manifest(out / "manifest.jsonl", data.episodes)
    data.provider.dump(out / "features")
    _write_json(out / "features" / "registry.json", data.registry.to_config())
    summary = {"episodes": len(data.episodes), "positives": sum(e.label for e in data.episodes)}
    if opts.get("sizes"):
        split = split_dataset(data.episodes, opts["sizes"], seed=opts["seed"])
        _write_json(out / "split.json", {**split.to_json(), "config_digest": opts["_digest"]})
        summary["sizes"] = list(split.sizes)
    _emit(opts, "synth.json", summary)


def cmd_train(opts):
    provider, registry = _provider(opts)
    eps = load_manifest(opts["manifest"])
    split = _load_split(opts["split"])
    cfg = _train_config(opts)
    out = _out_dir(opts)
    n_seeds = int(opts.get("n_seeds") or 1)
    if n_seeds > 1:
        agg, runs = seed_sweep(cfg, eps, split, provider, n_seeds, registry)
        if out is not None:
            rows = [{"seed": r.seeds[0], "accuracy": r.test.accuracy, "best_epoch": r.best_epoch} for r in runs]
            write_table(out, "sweep", rows, {"config_digest": opts["_digest"]})
        _emit(opts, "run.json", {"train_config": cfg.to_json(), "result": agg.to_json()})
        return
    ckpt = None if out is None else out / "model.lrck"
    outcome = train(eps, split, cfg, provider, registry, checkpoint_path=ckpt)
    if out is not None:
        write_table(out, "epochs", outcome.result.csv_rows(), {"config_digest": opts["_digest"]})
    payload = {"train_config": cfg.to_json(), "result": outcome.result.to_json()}
    if ckpt is not None:
        payload["checkpoint"] = str(ckpt)
    _emit(opts, "run.json", payload)


def cmd_eval(opts):
    provider, _ = _provider(opts)
    eps = load_manifest(opts["manifest"])
    if opts.get("split"):
        wanted = set(getattr(_load_split(opts["split"]), opts["part"]))
        eps = [e for e in eps if e.episode_id in wanted]
    ev = evaluate_detailed(opts["checkpoint"], eps, provider, opts["threshold"], bool(opts["skip_missing"]))
    _emit(opts, "eval.json", {"matrix": ev.matrix.to_json(), "excluded": ev.excluded})


def cmd_ablate(opts):
    provider, registry = _provider(opts)
    eps = load_manifest(opts["manifest"])
    split = _load_split(opts["split"])
    cfg = _train_config({**opts, "mode": None, "groups": None})
    conds = conditions_by_name(opts["conditions"]) if opts.get("conditions") else DEFAULT_CONDITIONS
    rows = [r.to_json() for r in run_ablation(cfg, eps, split, provider, conds, registry)]
    out = _out_dir(opts)
    if out is not None:
        write_table(out, "ablation", rows, {"config_digest": opts["_digest"], "train_config": cfg.to_json()})
    print(json.dumps({"config_digest": opts["_digest"], "rows": rows}, indent=2))


def cmd_video(opts):
    provider, _ = _provider(opts)
    model = Model.load(opts["checkpoint"])
    eps = [e for e in load_manifest(opts["manifest"]) if e.frames is not None]
    if opts.get("episode"):
        eps = [e for e in eps if e.episode_id == opts["episode"]]
        if not eps:
            raise ConfigError(f"no video episode {opts['episode']!r} in the manifest")
    results = {e.episode_id: classify_video(model, e, provider, opts["threshold"]).to_json() for e in eps}
    _emit(opts, "video.json", {"episodes": results})


def cmd_gradcheck(opts):
    dims, seeds = int(opts["dims"]), int(opts["seeds"])
    if dims < 1 or seeds < 1:
        raise ConfigError("--dims and --seeds must be >= 1")
    errs = [decoder_grad_error(dims, opts["seed"] + k, opts["mode"]) for k in range(seeds)]
    worst = max(errs)
    _emit(opts, "gradcheck.json", {"max_rel_error": worst, "tolerance": GRADCHECK_TOL, "seeds": seeds})
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_params(opts):
    registry = load_registry(opts["registry"]) if opts.get("registry") else register_sources()
    hidden = opts["mlp_hidden"]
    hidden = _int_list(hidden) if isinstance(hidden, str) else [int(h) for h in hidden]
    cfg = DecoderConfig(d_model=int(opts["d_model"]), mlp_hidden=tuple(hidden))
    pc = count_params(param_shapes(registry, cfg))
    _emit(opts, "params.json", {"total": pc.total, "breakdown": pc.breakdown})


COMMANDS = {
    "stats": cmd_stats,
    "cleanse": cmd_cleanse,
    "split": cmd_split,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "video": cmd_video,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        opts = _merge(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    try:
        opts["_command"] = args.command
        opts["_digest"] = _digest({k: v for k, v in opts.items() if not k.startswith("_")})
        code = COMMANDS[args.command](opts)
        return int(code or 0)
    except (RepformerError, OSError, KeyError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
