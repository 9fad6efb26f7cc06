"""Contrastive decoder: before/after cross-attention, instruction alignment, MLP head.

    h_diff  = CrossAttn(after_tokens, before_tokens)
    h_align = CrossAttn(h_diff, language_tokens)
    P(success) = softmax(MLP(pool(h_align)))[1]

with ``CrossAttn(A, B) = softmax(A W_q (B W_k)^T / sqrt(d_k)) B W_v``.
Everything runs on a ``Tape`` so the same code path serves inference,
training, and gradient checks.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, DigestMismatchError, EmptyKeysError, FormatError, ShapeError
from .numerics import Tape
from .representation import lrep
from .representation.assemble import LambdaRepresentation, LanguageFeature, Projector
from .representation.registry import SourceRegistry

MODES = ("cross", "self")


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 256
    d_k: int | None = None  # None -> d_model
    d_v: int | None = None  # None -> d_model
    heads: int = 1
    mlp_hidden: tuple[int, ...] = (256, 256)
    pooling: str = "mean"  # "mean" | "first"
    residual: bool = False
    norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.d_model <= 0 or self.key_dim <= 0 or self.value_dim <= 0:
            raise ConfigError("d_model, d_k and d_v must be positive")
        if self.heads < 1 or self.key_dim % self.heads or self.value_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must evenly divide d_k={self.key_dim} and d_v={self.value_dim}")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if any(h <= 0 for h in self.mlp_hidden):
            raise ConfigError("MLP widths must be positive")
        if self.residual and self.value_dim != self.d_model:
            raise ConfigError("residual connections need d_v == d_model")

    @property
    def key_dim(self) -> int:
        return self.d_model if self.d_k is None else self.d_k

    @property
    def value_dim(self) -> int:
        return self.d_model if self.d_v is None else self.d_v

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecoderConfig":
        d = dict(d)
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


def param_shapes(registry: SourceRegistry, config: DecoderConfig) -> dict[str, tuple[int, int]]:
    """Ordered name -> shape map of every trainable tensor."""
    dm, dk, dv = config.d_model, config.key_dim, config.value_dim
    shapes = {f"proj.{s.id}": (s.dim, dm) for s in registry}
    shapes.update({"diff.w_q": (dm, dk), "diff.w_k": (dm, dk), "diff.w_v": (dm, dv)})
    shapes.update({"align.w_q": (dv, dk), "align.w_k": (dm, dk), "align.w_v": (dm, dv)})
    widths = (dv,) + config.mlp_hidden + (2,)
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"mlp.{i}.weight"] = (fan_in, fan_out)
        shapes[f"mlp.{i}.bias"] = (1, fan_out)
    return shapes


def model_spec(registry: SourceRegistry, config: DecoderConfig, mode: str = "cross") -> dict:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return {"registry": registry.to_config(), "decoder": config.to_dict(), "mode": mode}


def spec_digest(spec: Mapping) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class AttentionBlockParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    @property
    def d_k(self) -> int:
        return self.w_k.shape[1]


@dataclass
class DecoderParams:
    registry: SourceRegistry
    config: DecoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, registry: SourceRegistry, config: DecoderConfig, seed: int = 0) -> "DecoderParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, seeded."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(registry, config).items():
            fan_in = shape[0] if not name.endswith(".bias") else _bias_fan_in(name, registry, config)
            bound = 1.0 / math.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(registry, config, tensors)

    @classmethod
    def zeros(cls, registry: SourceRegistry, config: DecoderConfig) -> "DecoderParams":
        return cls(registry, config, {n: np.zeros(s) for n, s in param_shapes(registry, config).items()})

    def __post_init__(self):
        if self.tensors:
            want = param_shapes(self.registry, self.config)
            if list(want) != list(self.tensors) or any(self.tensors[n].shape != s for n, s in want.items()):
                raise ShapeError("tensor names/shapes do not match the registry and decoder config")

    def attention(self, block: str) -> AttentionBlockParams:
        t = self.tensors
        return AttentionBlockParams(t[f"{block}.w_q"], t[f"{block}.w_k"], t[f"{block}.w_v"])

    @property
    def diff_attn(self) -> AttentionBlockParams:
        return self.attention("diff")

    @property
    def align_attn(self) -> AttentionBlockParams:
        return self.attention("align")

    @property
    def mlp(self) -> list[tuple[np.ndarray, np.ndarray]]:
        n = len(self.config.mlp_hidden) + 1
        return [(self.tensors[f"mlp.{i}.weight"], self.tensors[f"mlp.{i}.bias"]) for i in range(n)]

    def projector(self) -> Projector:
        return Projector({s.id: self.tensors[f"proj.{s.id}"] for s in self.registry}, self.config.d_model)

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "DecoderParams":
        return DecoderParams(self.registry, self.config, dict(tensors))

    def quantized(self) -> "DecoderParams":
        """Copy rounded to float32 storage precision (what a checkpoint holds)."""
        return self.replace({n: v.astype(np.float32).astype(np.float64) for n, v in self.tensors.items()})

    def equals(self, other: "DecoderParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in self.tensors
        )


def _bias_fan_in(name: str, registry, config) -> int:
    return param_shapes(registry, config)[name.replace(".bias", ".weight")][0]


@dataclass(frozen=True)
class ParamCount:
    total: int
    breakdown: dict[str, int]


def count_params(params: DecoderParams | Mapping[str, tuple[int, int]]) -> ParamCount:
    """Exact trainable-scalar count, split into projections / attention blocks / MLP."""
    shapes = (
        {n: v.shape for n, v in params.tensors.items()} if isinstance(params, DecoderParams) else dict(params)
    )
    parts = {"projections": 0, "diff_attn": 0, "align_attn": 0, "mlp": 0}
    prefix = {"proj": "projections", "diff": "diff_attn", "align": "align_attn", "mlp": "mlp"}
    for name, shape in shapes.items():
        parts[prefix[name.split(".", 1)[0]]] += int(np.prod(shape))
    return ParamCount(sum(parts.values()), parts)


# ---------------------------------------------------------------------------
# batched inputs
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Raw blocks for B episodes: ``{source_id: (B, dim)}`` per image and for the instruction.

    Narrative (caption) blocks of an image live in that image's dict.
    """

    before: dict[str, np.ndarray]
    after: dict[str, np.ndarray]
    language: dict[str, np.ndarray]
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return next(iter(self.language.values())).shape[0]


@dataclass(frozen=True, eq=False)
class PredictionOutput:
    logits: np.ndarray
    p_success: float
    h_diff: np.ndarray
    h_align: np.ndarray


# ---------------------------------------------------------------------------
# tape graph
# ---------------------------------------------------------------------------


def _attend(tape: Tape, a: int, b: int, w: Mapping[str, int], heads: int) -> tuple[int, list[int]]:
    """CrossAttn(A, B) on the tape. Returns (output node, per-head weight nodes)."""
    if tape.value(b).shape[-2] == 0:
        raise EmptyKeysError("cross-attention needs at least one key/value token")
    q = tape.matmul(a, w["w_q"])
    k = tape.matmul(b, w["w_k"])
    v = tape.matmul(b, w["w_v"])
    dk = tape.value(k).shape[-1] // heads
    dv = tape.value(v).shape[-1] // heads
    outs, weights = [], []
    for h in range(heads):
        qh, kh, vh = q, k, v
        if heads > 1:
            qh = tape.take(q, h * dk, (h + 1) * dk, axis=-1)
            kh = tape.take(k, h * dk, (h + 1) * dk, axis=-1)
            vh = tape.take(v, h * dv, (h + 1) * dv, axis=-1)
        scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(dk))
        attn = tape.softmax_rows(scores)
        weights.append(attn)
        outs.append(tape.matmul(attn, vh))
    return (outs[0] if heads == 1 else tape.concat(outs, axis=-1)), weights


def _block(tape, a, b, w, config: DecoderConfig, mode: str) -> int:
    if mode == "cross":
        out, _ = _attend(tape, a, b, w, config.heads)
    else:
        if tape.value(a).shape[-1] != tape.value(b).shape[-1]:
            raise ShapeError("self-attention mode needs both operands to share a width (set d_v == d_model)")
        n_a = tape.value(a).shape[-2]
        joint = tape.concat([a, b], axis=-2)
        full, _ = _attend(tape, joint, joint, w, config.heads)
        out = tape.take(full, 0, n_a, axis=-2)
    if config.residual:
        out = tape.add(out, a)
    if config.norm:
        out = tape.row_norm(out)
    return out


def _tokens(tape: Tape, blocks: Mapping[str, np.ndarray], sources, pnodes) -> int:
    parts = []
    for s in sources:
        try:
            x = blocks[s.id]
        except KeyError:
            raise ConfigError(f"batch is missing source {s.id!r}") from None
        parts.append(tape.matmul(tape.leaf(np.asarray(x, dtype=np.float64)[:, None, :]), pnodes[f"proj.{s.id}"]))
    if not parts:
        raise ShapeError("no tokens to assemble")
    return parts[0] if len(parts) == 1 else tape.concat(parts, axis=-2)


@dataclass
class Graph:
    tape: Tape
    params: dict[str, int]
    probs: int
    logits: int
    h_diff: int
    h_align: int
    loss: int | None = None


def build_graph(params: DecoderParams, batch: Batch, mode: str = "cross", eps: float = 1e-12) -> Graph:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = params.config
    tape = Tape()
    pn = {name: tape.leaf(v) for name, v in params.tensors.items()}
    visual = params.registry.visual()
    before = _tokens(tape, batch.before, visual, pn)
    after = _tokens(tape, batch.after, visual, pn)
    lang = _tokens(tape, batch.language, params.registry.group("language"), pn)

    diff_w = {k: pn[f"diff.{k}"] for k in ("w_q", "w_k", "w_v")}
    align_w = {k: pn[f"align.{k}"] for k in ("w_q", "w_k", "w_v")}
    h_diff = _block(tape, after, before, diff_w, cfg, mode)
    h_align = _block(tape, h_diff, lang, align_w, cfg, mode)

    h = tape.mean_rows(h_align) if cfg.pooling == "mean" else tape.take(h_align, 0, 1, axis=-2)
    n_layers = len(cfg.mlp_hidden) + 1
    for i in range(n_layers):
        h = tape.add(tape.matmul(h, pn[f"mlp.{i}.weight"]), pn[f"mlp.{i}.bias"])
        if i < n_layers - 1:
            h = tape.relu(h)
    probs = tape.softmax_rows(h)
    graph = Graph(tape, pn, probs, h, h_diff, h_align)
    if batch.labels is not None:
        graph.loss = tape.nll(probs, batch.labels, eps)
    return graph


def loss_and_grads(params: DecoderParams, batch: Batch, mode: str = "cross", eps: float = 1e-12):
    """Mean cross-entropy over the batch and its gradient for every tensor."""
    if batch.labels is None:
        raise ConfigError("batch has no labels")
    g = build_graph(params, batch, mode, eps)
    g.tape.backward(g.loss)
    grads = {name: g.tape.grad(node) for name, node in g.params.items()}
    return float(g.tape.value(g.loss)), grads


def batch_loss(params: DecoderParams, batch: Batch, mode: str = "cross", eps: float = 1e-12) -> float:
    g = build_graph(params, batch, mode, eps)
    return float(g.tape.value(g.loss))


def predict_proba(params: DecoderParams, batch: Batch, mode: str = "cross") -> np.ndarray:
    """P(success) per episode, shape (B,)."""
    g = build_graph(params, Batch(batch.before, batch.after, batch.language), mode)
    return g.tape.value(g.probs)[:, 0, 1].copy()


# ---------------------------------------------------------------------------
# single-example API over already-projected tokens
# ---------------------------------------------------------------------------


def _as_tokens(x) -> np.ndarray:
    if isinstance(x, (LambdaRepresentation, LanguageFeature)):
        x = x.tokens
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"token matrix must be 2-D, got shape {x.shape}")
    return x


def _attn_nodes(tape: Tape, p: AttentionBlockParams) -> dict[str, int]:
    return {"w_q": tape.leaf(p.w_q), "w_k": tape.leaf(p.w_k), "w_v": tape.leaf(p.w_v)}


def cross_attention(x_a, x_b, params: AttentionBlockParams, heads: int = 1, return_weights: bool = False):
    """``softmax((x_a W_q)(x_b W_k)^T / sqrt(d_k)) (x_b W_v)`` for token matrices."""
    a, b = _as_tokens(x_a), _as_tokens(x_b)
    if b.shape[0] == 0:
        raise EmptyKeysError("cross-attention needs at least one key/value token")
    if a.shape[1] != params.w_q.shape[0] or b.shape[1] != params.w_k.shape[0] or b.shape[1] != params.w_v.shape[0]:
        raise ShapeError(
            f"cross_attention: x_a {a.shape}, x_b {b.shape} vs W_q {params.w_q.shape}, "
            f"W_k {params.w_k.shape}, W_v {params.w_v.shape}"
        )
    tape = Tape()
    out, weights = _attend(tape, tape.leaf(a), tape.leaf(b), _attn_nodes(tape, params), heads)
    if return_weights:
        return tape.value(out), [tape.value(w) for w in weights]
    return tape.value(out)


def compute_diff(lambda_after, lambda_before, params: DecoderParams) -> np.ndarray:
    """Queries from the after image, keys/values from the before image."""
    if isinstance(lambda_after, LambdaRepresentation) and isinstance(lambda_before, LambdaRepresentation):
        if lambda_after.source_ids != lambda_before.source_ids:
            raise ShapeError(
                f"before/after token structure differs: {lambda_before.source_ids} vs {lambda_after.source_ids}"
            )
    a, b = _as_tokens(lambda_after), _as_tokens(lambda_before)
    if a.shape != b.shape:
        raise ShapeError(f"before/after token matrices differ: {b.shape} vs {a.shape}")
    return cross_attention(a, b, params.diff_attn, params.config.heads)


def compute_align(h_diff, h_l, params: DecoderParams) -> np.ndarray:
    """Queries from h_diff, keys/values from the language tokens."""
    return cross_attention(h_diff, h_l, params.align_attn, params.config.heads)


def mlp_head(h_align, params: DecoderParams, h_diff=None) -> PredictionOutput:
    h_align = _as_tokens(h_align)
    if h_align.shape[0] == 0:
        raise ShapeError("mlp_head needs at least one row")
    h = h_align.mean(axis=0) if params.config.pooling == "mean" else h_align[0]
    layers = params.mlp
    for i, (w, b) in enumerate(layers):
        h = h @ w + b[0]
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    e = np.exp(h - h.max())
    probs = e / e.sum()
    h_diff = np.empty((0, 0)) if h_diff is None else _as_tokens(h_diff)
    return PredictionOutput(h.copy(), float(probs[1]), h_diff, h_align)


@dataclass(frozen=True, eq=False)
class EpisodeFeatures:
    """Raw blocks for one episode: ``{source_id: vector}`` per image and for the instruction."""

    before: Mapping[str, np.ndarray]
    after: Mapping[str, np.ndarray]
    language: Mapping[str, np.ndarray]

    def as_batch(self, label: int | None = None) -> Batch:
        def one(d):
            return {k: np.asarray(v, dtype=np.float64).reshape(1, -1) for k, v in d.items()}

        labels = None if label is None else np.array([label])
        return Batch(one(self.before), one(self.after), one(self.language), labels)


def forward(features: EpisodeFeatures, params: DecoderParams, mode: str = "cross") -> PredictionOutput:
    g = build_graph(params, features.as_batch(), mode)
    t = g.tape
    return PredictionOutput(
        logits=t.value(g.logits)[0, 0].copy(),
        p_success=float(t.value(g.probs)[0, 0, 1]),
        h_diff=t.value(g.h_diff)[0].copy(),
        h_align=t.value(g.h_align)[0].copy(),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LRCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: DecoderParams, mode: str = "cross") -> str:
    """Write an LRCK file; returns the model digest stored in it.

    Layout: magic, u16 version, u16 length + ASCII digest, u32 tensor count,
    then per tensor u32 rows, u32 cols and an LREP record named after it.
    """
    digest = spec_digest(model_spec(params.registry, params.config, mode))
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HH", CKPT_VERSION, len(digest)) + digest.encode("ascii")
    out += struct.pack("<I", len(params.tensors))
    for name, arr in params.tensors.items():
        rows, cols = arr.shape
        out += struct.pack("<II", rows, cols) + lrep.encode(name, arr)
    lrep.atomic_write(Path(path), bytes(out))
    return digest


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an LRCK checkpoint")
    version, n = struct.unpack_from("<HH", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    digest = data[off : off + n].decode("ascii")
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        (sid_len,) = struct.unpack_from("<H", data, off + 6)
        size = 4 + 2 + 2 + sid_len + 4 + 4 * rows * cols
        name, values = lrep.decode(data[off : off + size])
        off += size
        tensors[name] = values.astype(np.float64).reshape(rows, cols)
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return digest, tensors


def load_checkpoint(path, registry: SourceRegistry, config: DecoderConfig, mode: str = "cross") -> DecoderParams:
    """Load parameters, rejecting files written for a different model spec."""
    digest, tensors = read_checkpoint(path)
    want = spec_digest(model_spec(registry, config, mode))
    if digest != want:
        raise DigestMismatchError(f"{path}: checkpoint digest {digest[:12]} does not match config {want[:12]}")
    return DecoderParams(registry, config, tensors)
