"""Encoder stacks: transformer, spatio-temporal, and co-attention.

All three consume frame-wise embeddings with frames as columns and produce
the final embedding sequence consumed by the attractor head. The two
multi-channel variants share projections across channels and contain no
positional encodings, so they are invariant to channel count and order:
the spatio-temporal encoder by averaging channels before its final
cross-frame stage, the co-attention encoder by summing per-channel
query/key inner products inside its attention weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import ShapeError, Tensor
from .errors import ConfigError
from .features import ModelInput, VARIANTS


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by all encoder variants."""

    variant: str = "co_attention"
    n_features: int = 345          # spliced feature rows
    n_multi_features: int = 23     # per-channel context-averaged rows
    embed_dim: int = 256           # single-channel embedding width
    multi_embed_dim: int = 64      # per-channel embedding width (co-attention)
    n_heads: int = 4
    ffn_hidden: int = 1024
    multi_ffn_hidden: int = 256
    n_blocks: int = 4
    n_speakers: int = 2
    frame_seconds: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.n_blocks < 1:
            raise ConfigError("need at least one encoder block")
        if self.embed_dim % self.n_heads or self.multi_embed_dim % self.n_heads:
            raise ConfigError("embedding dims must be divisible by the head count")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def attractor_dim(self) -> int:
        if self.variant == "co_attention":
            return self.embed_dim + self.multi_embed_dim
        return self.embed_dim


# ---------------------------------------------------------------------------
# Block parameter containers
# ---------------------------------------------------------------------------


@dataclass
class TransformerBlockParams:
    attn: nn.AttentionParams
    ffn: nn.FfnParams
    ln_attn: nn.LayerNormParams
    ln_ffn: nn.LayerNormParams


@dataclass
class SpatioTemporalBlockParams:
    """Cross-channel then cross-frame self-attention; no feed-forward nets."""

    cross_channel: nn.AttentionParams
    cross_frame: nn.AttentionParams
    ln_channel: nn.LayerNormParams
    ln_frame: nn.LayerNormParams


@dataclass
class CoAttentionBlockParams:
    """One shared query/key set drives both the single- and multi-channel paths.

    ``multi_qk`` is stored once and referenced by the two co-attention call
    sites; the attention weights themselves are computed once per block.
    """

    multi_qk: nn.QKParams          # queries/keys from per-channel embeddings
    single_vo: nn.VOParams         # value/output path for the shared stream
    multi_vo: nn.VOParams          # value/output path per channel
    single_attn: nn.AttentionParams  # cross-frame self-attention on the shared stream
    single_ffn: nn.FfnParams
    multi_ffn: nn.FfnParams
    ln_single_co: nn.LayerNormParams
    ln_single_attn: nn.LayerNormParams
    ln_single_ffn: nn.LayerNormParams
    ln_multi_co: nn.LayerNormParams
    ln_multi_ffn: nn.LayerNormParams


@dataclass
class EncoderParams:
    """Frontends plus the block stack for one variant."""

    frontend: nn.FrontendParams
    frontend_ln: nn.LayerNormParams
    blocks: list
    multi_frontend: nn.FrontendParams | None = None
    multi_frontend_ln: nn.LayerNormParams | None = None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_transformer_block(cfg: ModelConfig, rng) -> TransformerBlockParams:
    d, dt = cfg.embed_dim, cfg.np_dtype
    return TransformerBlockParams(
        attn=nn.init_attention(d, d, cfg.n_heads, rng, dt),
        ffn=nn.init_ffn(d, cfg.ffn_hidden, rng, dt),
        ln_attn=nn.init_layer_norm(d, dt),
        ln_ffn=nn.init_layer_norm(d, dt),
    )


def init_spatio_temporal_block(cfg: ModelConfig, rng) -> SpatioTemporalBlockParams:
    d, dt = cfg.embed_dim, cfg.np_dtype
    return SpatioTemporalBlockParams(
        cross_channel=nn.init_attention(d, d, cfg.n_heads, rng, dt),
        cross_frame=nn.init_attention(d, d, cfg.n_heads, rng, dt),
        ln_channel=nn.init_layer_norm(d, dt),
        ln_frame=nn.init_layer_norm(d, dt),
    )


def init_co_attention_block(cfg: ModelConfig, rng) -> CoAttentionBlockParams:
    d, dm, dt = cfg.embed_dim, cfg.multi_embed_dim, cfg.np_dtype
    return CoAttentionBlockParams(
        multi_qk=nn.init_qk(dm, cfg.n_heads, rng, dt),
        single_vo=nn.init_vo(d, cfg.n_heads, rng, dt),
        multi_vo=nn.init_vo(dm, cfg.n_heads, rng, dt),
        single_attn=nn.init_attention(d, d, cfg.n_heads, rng, dt),
        single_ffn=nn.init_ffn(d, cfg.ffn_hidden, rng, dt),
        multi_ffn=nn.init_ffn(dm, cfg.multi_ffn_hidden, rng, dt),
        ln_single_co=nn.init_layer_norm(d, dt),
        ln_single_attn=nn.init_layer_norm(d, dt),
        ln_single_ffn=nn.init_layer_norm(d, dt),
        ln_multi_co=nn.init_layer_norm(dm, dt),
        ln_multi_ffn=nn.init_layer_norm(dm, dt),
    )


def init_encoder(cfg: ModelConfig, rng) -> EncoderParams:
    dt = cfg.np_dtype
    block_init = {
        "transformer": init_transformer_block,
        "spatio_temporal": init_spatio_temporal_block,
        "co_attention": init_co_attention_block,
    }[cfg.variant]
    params = EncoderParams(
        frontend=nn.init_frontend(cfg.n_features, cfg.embed_dim, rng, dt),
        frontend_ln=nn.init_layer_norm(cfg.embed_dim, dt),
        blocks=[block_init(cfg, rng) for _ in range(cfg.n_blocks)],
    )
    if cfg.variant == "co_attention":
        params.multi_frontend = nn.init_frontend(cfg.n_multi_features, cfg.multi_embed_dim, rng, dt)
        params.multi_frontend_ln = nn.init_layer_norm(cfg.multi_embed_dim, dt)
    return params


# ---------------------------------------------------------------------------
# Block forwards
# ---------------------------------------------------------------------------


def transformer_block(e_in: Tensor, p: TransformerBlockParams) -> Tensor:
    """Self-attention then FFN, each behind a residual and layer norm."""
    e_mid = nn.layer_norm(ag.add(e_in, nn.multi_head_attention(e_in, e_in, e_in, p.attn)), p.ln_attn)
    return nn.layer_norm(ag.add(e_mid, nn.feed_forward(e_mid, p.ffn)), p.ln_ffn)


def spatio_temporal_block(
    channels: Sequence[Tensor], p: SpatioTemporalBlockParams, is_final: bool
) -> list[Tensor] | Tensor:
    """Cross-channel attention per frame, then cross-frame attention.

    Non-final blocks keep the channel axis; the final block averages the
    channels before its cross-frame stage and returns a single matrix.
    """
    if not channels:
        raise ShapeError("spatio-temporal block needs at least one channel")
    n_channels = len(channels)
    n_frames = channels[0].shape[1]

    # Stage 1: for each frame, self-attention across the channel tokens.
    per_frame = []
    for t in range(n_frames):
        frame = ag.concat_cols([ag.slice_cols(ch, t, t + 1) for ch in channels]) if n_channels > 1 else ag.slice_cols(channels[0], t, t + 1)
        attended = nn.multi_head_attention(frame, frame, frame, p.cross_channel)
        per_frame.append(nn.layer_norm(ag.add(frame, attended), p.ln_channel))
    mixed = [
        ag.concat_cols([ag.slice_cols(f, c, c + 1) for f in per_frame]) if n_frames > 1 else ag.slice_cols(per_frame[0], c, c + 1)
        for c in range(n_channels)
    ]

    # Stage 2: self-attention across frames.
    if is_final:
        pooled = ag.mean_tensors(mixed)
        return nn.layer_norm(ag.add(pooled, nn.multi_head_attention(pooled, pooled, pooled, p.cross_frame)), p.ln_frame)
    return [
        nn.layer_norm(ag.add(ch, nn.multi_head_attention(ch, ch, ch, p.cross_frame)), p.ln_frame)
        for ch in mixed
    ]


def co_attention_block(
    e_in: Tensor, p_in: Sequence[Tensor], p: CoAttentionBlockParams, is_final: bool
):
    """Co-attention block: shared weights drive one single- and C channel paths.

    Returns ``(e_out, p_out)`` for non-final blocks and the concatenated
    ``[e_out; mean_c p_out_c]`` matrix for the final block.
    """
    if not p_in:
        raise ShapeError("co-attention block needs at least one channel")
    n_frames = e_in.shape[1]
    if any(pc.shape[1] != n_frames for pc in p_in):
        raise ShapeError("co-attention channels must share the frame count")

    weights = nn.co_attention_weights(p_in, p_in, p.multi_qk)  # computed once

    e_mid = nn.layer_norm(ag.add(e_in, nn.attend(e_in, weights, p.single_vo)), p.ln_single_co)
    e_att = nn.layer_norm(ag.add(e_mid, nn.multi_head_attention(e_mid, e_mid, e_mid, p.single_attn)), p.ln_single_attn)
    e_out = nn.layer_norm(ag.add(e_att, nn.feed_forward(e_att, p.single_ffn)), p.ln_single_ffn)

    p_out = []
    for pc in p_in:
        mid = nn.layer_norm(ag.add(pc, nn.attend(pc, weights, p.multi_vo)), p.ln_multi_co)
        p_out.append(nn.layer_norm(ag.add(mid, nn.feed_forward(mid, p.multi_ffn)), p.ln_multi_ffn))

    if is_final:
        return ag.concat_rows([e_out, ag.mean_tensors(p_out)])
    return e_out, p_out


def encode_session(inputs: ModelInput, cfg: ModelConfig, params: EncoderParams) -> Tensor:
    """Frontends plus the block stack; returns the final embedding sequence."""
    if inputs.variant != cfg.variant:
        raise ShapeError(f"features were assembled for {inputs.variant!r}, model is {cfg.variant!r}")
    if cfg.variant == "transformer":
        e = nn.frontend(Tensor(inputs.single.astype(cfg.np_dtype)), params.frontend, params.frontend_ln)
        for block in params.blocks:
            e = transformer_block(e, block)
        return e
    if cfg.variant == "spatio_temporal":
        chans = [
            nn.frontend(Tensor(c.astype(cfg.np_dtype)), params.frontend, params.frontend_ln)
            for c in inputs.channels
        ]
        for i, block in enumerate(params.blocks):
            final = i == len(params.blocks) - 1
            chans = spatio_temporal_block(chans, block, final)
        return chans
    e = nn.frontend(Tensor(inputs.single.astype(cfg.np_dtype)), params.frontend, params.frontend_ln)
    p = [
        nn.frontend(Tensor(c.astype(cfg.np_dtype)), params.multi_frontend, params.multi_frontend_ln)
        for c in inputs.multi
    ]
    out = (e, p)
    for i, block in enumerate(params.blocks):
        final = i == len(params.blocks) - 1
        out = co_attention_block(out[0], out[1], block, final)
    return out


# ---------------------------------------------------------------------------
# Activation accounting
# ---------------------------------------------------------------------------


@dataclass
class ActivationReport:
    """Float counts of forward activations retained for backward.

    ``total_floats`` mirrors the actual op outputs recorded on the tape for
    one forward pass (frontends + blocks). ``per_channel_state_floats``
    isolates the per-channel residual-stage outputs, the term whose growth
    with the channel count separates the two multi-channel encoders: its
    slope per channel is proportional to the per-channel embedding width.
    """

    variant: str
    n_frames: int
    n_channels: int
    total_floats: int
    per_channel_state_floats: int

    @property
    def per_channel_slope(self) -> float:
        return self.per_channel_state_floats / max(self.n_channels, 1)


def _ma_floats(n_query: int, n_key: int, d_qk_in: int, d_v: int, n_heads: int) -> int:
    """Recorded outputs of one multi-head attention call."""
    rows_qk = d_qk_in // n_heads
    rows_v = d_v // n_heads
    per_head = (
        2 * rows_qk * n_query      # query projection (matmul + bias)
        + 2 * rows_qk * n_key      # key projection
        + rows_qk * n_key          # transpose of keys
        + 3 * n_key * n_query      # logits, scaled logits, softmax
        + 2 * rows_v * n_key       # value projection
        + rows_v * n_query         # mixed head output
    )
    concat = d_v * n_query if n_heads > 1 else 0
    out_proj = 2 * d_v * n_query   # W_o matmul + bias
    return n_heads * per_head + concat + out_proj


def _mca_weight_floats(n_frames: int, d_qk_in: int, n_channels: int, n_heads: int) -> int:
    """Recorded outputs of one shared co-attention weight computation."""
    rows = d_qk_in // n_heads
    per_head = (
        n_channels * (2 * rows * n_frames + 2 * rows * n_frames + rows * n_frames + n_frames * n_frames)
        + (n_channels - 1) * n_frames * n_frames  # logit accumulation adds
        + 2 * n_frames * n_frames                 # scale + softmax
    )
    return n_heads * per_head


def _attend_floats(n_frames: int, d_v: int, n_heads: int) -> int:
    rows_v = d_v // n_heads
    per_head = 2 * rows_v * n_frames + rows_v * n_frames
    concat = d_v * n_frames if n_heads > 1 else 0
    return n_heads * per_head + concat + 2 * d_v * n_frames


def _ffn_floats(n_frames: int, d: int, d_hidden: int) -> int:
    return 3 * d_hidden * n_frames + 2 * d * n_frames


def _frontend_floats(n_frames: int, d: int) -> int:
    return 3 * d * n_frames  # matmul + bias + layer norm


def count_activations(cfg: ModelConfig, n_frames: int, n_channels: int) -> ActivationReport:
    """Analytic per-forward activation count for one session.

    Mirrors the op outputs the implementation records on its tape, so the
    analytic totals can be validated against instrumented runs.
    """
    t, c, h = n_frames, n_channels, cfg.n_heads
    d, dm = cfg.embed_dim, cfg.multi_embed_dim
    n = cfg.n_blocks

    if cfg.variant == "transformer":
        block = (
            _ma_floats(t, t, d, d, h)
            + 2 * d * t                      # residual add + LN
            + _ffn_floats(t, d, cfg.ffn_hidden)
            + 2 * d * t
        )
        total = _frontend_floats(t, d) + n * block
        return ActivationReport(cfg.variant, t, c, total, 0)

    if cfg.variant == "spatio_temporal":
        # Stage 1: per frame, gather the channel tokens, attend, re-gather.
        gather = c * d + (c * d if c > 1 else 0)          # slices + concat per frame
        regather = c * (t * d + (d * t if t > 1 else 0))  # slices + concat per channel
        stage1 = t * (gather + _ma_floats(c, c, d, d, h) + 2 * d * c) + regather
        stage2_nonfinal = c * (_ma_floats(t, t, d, d, h) + 2 * d * t)
        stage2_final = c * d * t + _ma_floats(t, t, d, d, h) + 2 * d * t  # channel mean, then one attention
        total = c * _frontend_floats(t, d) + n * stage1 + (n - 1) * stage2_nonfinal + stage2_final
        per_channel_state = n * (2 * c * d * t)  # both residual-stage outputs carry the channel axis
        return ActivationReport(cfg.variant, t, c, total, per_channel_state)

    # co_attention
    single_path = (
        _attend_floats(t, d, h) + 2 * d * t
        + _ma_floats(t, t, d, d, h) + 2 * d * t
        + _ffn_floats(t, d, cfg.ffn_hidden) + 2 * d * t
    )
    multi_path = c * (
        _attend_floats(t, dm, h) + 2 * dm * t
        + _ffn_floats(t, dm, cfg.multi_ffn_hidden) + 2 * dm * t
    )
    block = _mca_weight_floats(t, dm, c, h) + single_path + multi_path
    final_concat = c * dm * t + (d + dm) * t  # channel mean + concatenation
    total = _frontend_floats(t, d) + c * _frontend_floats(t, dm) + n * block + final_concat
    per_channel_state = n * (2 * c * dm * t)
    return ActivationReport(cfg.variant, t, c, total, per_channel_state)
