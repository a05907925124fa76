"""Full diarization model: encoder stack plus attractor head.

Also provides the flat named-parameter view used by the optimizer, the
freeze policies, and the checkpoint container.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import eda as eda_mod
from . import encoders, nn
from .autograd import Tensor
from .eda import EdaParams
from .encoders import EncoderParams, ModelConfig
from .features import ModelInput


@dataclass
class DiarizationModel:
    config: ModelConfig
    encoder: EncoderParams
    eda: EdaParams


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> DiarizationModel:
    return DiarizationModel(
        config=cfg,
        encoder=encoders.init_encoder(cfg, rng),
        eda=eda_mod.init_eda(cfg.attractor_dim, rng, cfg.np_dtype),
    )


def _walk(prefix: str, obj) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if is_dataclass(obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, (Tensor, list)) or is_dataclass(value):
                yield from _walk(f"{prefix}.{f.name}" if prefix else f.name, value)
        return
    if isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(f"{prefix}.{i}", item)


def named_parameters(model: DiarizationModel) -> dict[str, Tensor]:
    """Flat name -> tensor map over every trainable parameter."""
    out = {}
    for name, tensor in _walk("encoder", model.encoder):
        out[name] = tensor
    for name, tensor in _walk("eda", model.eda):
        out[name] = tensor
    return out


def zero_grads(model: DiarizationModel) -> None:
    for t in named_parameters(model).values():
        t.zero_grad()


def forward_attractors_posteriors(
    model: DiarizationModel,
    inputs: ModelInput,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Features to per-speaker attractors (d x S) and posteriors (S x T)."""
    embeddings = encoders.encode_session(inputs, model.config, model.encoder)
    attractors = eda_mod.compute_attractors(
        embeddings, model.eda, model.config.n_speakers, shuffle=shuffle, rng=rng
    )
    return attractors, eda_mod.compute_posteriors(attractors, embeddings)


def forward_posteriors(
    model: DiarizationModel,
    inputs: ModelInput,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Features to per-speaker speech activity posteriors (S x T)."""
    return forward_attractors_posteriors(model, inputs, shuffle=shuffle, rng=rng)[1]


# ---------------------------------------------------------------------------
# Freeze policies for single-channel adaptation
# ---------------------------------------------------------------------------

FREEZE_POLICIES = ("none", "channel_invariant")


def freeze_set(model: DiarizationModel, policy: str) -> set[str]:
    """Parameter names excluded from adaptation updates.

    ``channel_invariant`` freezes the multi-channel machinery so adapting on
    single-channel data cannot erode it: the cross-channel attention of every
    spatio-temporal block, and for co-attention the shared query/key set, the
    per-channel value/output and feed-forward paths, plus the layer norms of
    those per-channel residual stages.
    """
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}")
    if policy == "none" or model.config.variant == "transformer":
        return set()
    names = named_parameters(model)
    frozen = set()
    if model.config.variant == "spatio_temporal":
        for name in names:
            if ".cross_channel." in name:
                frozen.add(name)
    else:
        markers = (".multi_qk.", ".multi_vo.", ".multi_ffn.", ".ln_multi_co.", ".ln_multi_ffn.")
        for name in names:
            if any(m in name for m in markers):
                frozen.add(name)
    return frozen
