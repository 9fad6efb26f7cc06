"""Finite-difference check of the full decoder on toy dimensions."""

from __future__ import annotations

import numpy as np

from ..decoder import Batch, DecoderConfig, DecoderParams, batch_loss, loss_and_grads
from ..numerics import grad_check
from ..representation.registry import SourceRegistry, SourceSpec


def toy_registry(d_model: int) -> SourceRegistry:
    """Three visual tokens (one per group) and two language tokens."""
    return SourceRegistry(
        (
            SourceSpec("scene_a", d_model + 1, "scene"),
            SourceSpec("aligned_a", d_model, "aligned"),
            SourceSpec("narrative_a", d_model + 2, "narrative"),
            SourceSpec("lang_a", d_model + 1, "language"),
            SourceSpec("lang_b", max(2, d_model - 1), "language"),
        )
    )


def toy_problem(d_model: int = 4, seed: int = 0, batch: int = 3, mode: str = "cross"):
    rng = np.random.default_rng(seed)
    reg = toy_registry(d_model)
    cfg = DecoderConfig(d_model=d_model, mlp_hidden=(d_model,))
    params = DecoderParams.init(reg, cfg, seed=seed)

    def blocks(sources):
        return {s.id: rng.normal(size=(batch, s.dim)) for s in sources}

    data = Batch(blocks(reg.visual()), blocks(reg.visual()), blocks(reg.group("language")), rng.integers(0, 2, batch))
    return params, data


def decoder_grad_error(d_model: int = 4, seed: int = 0, mode: str = "cross", h: float = 1e-5) -> float:
    """Max relative error of tape gradients vs central differences over every parameter."""
    params, data = toy_problem(d_model, seed, mode=mode)

    def f(tensors):
        return loss_and_grads(params.replace(tensors), data, mode)

    def value(tensors):
        return batch_loss(params.replace(tensors), data, mode)

    return grad_check(f, params.tensors, h=h, value_fn=value)
