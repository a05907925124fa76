"""Waveform to model-input features.

The pipeline is: 23-band log-mel filterbanks every 10 ms, then either
splicing (+/-7 frames concatenated, 345 dims) or context averaging (+/-7
frames averaged, still 23 dims), both followed by subsampling every 10th
frame to a 100 ms grid. Which views a model consumes depends on the encoder
variant:

  transformer      -> one channel-averaged 345-dim stream
  spatio_temporal  -> one 345-dim stream per channel
  co_attention     -> channel-averaged 345-dim stream + per-channel 23-dim
                      context-averaged streams
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

VARIANTS = ("transformer", "spatio_temporal", "co_attention")


@dataclass
class Waveform:
    """Mono audio: samples in [-1, 1] at a fixed rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("waveform must be a non-empty 1-D sample sequence")
        if self.sample_rate not in (8000, 16000):
            raise DataError(f"unsupported sample rate {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureConfig:
    n_mels: int = 23
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    splice_context: int = 7
    subsample_factor: int = 10
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.splice_context <= 0 or self.subsample_factor <= 0:
            raise DataError("splice context and subsample factor must be positive")

    @property
    def spliced_dim(self) -> int:
        return self.n_mels * (2 * self.splice_context + 1)


@dataclass
class ModelInput:
    """Variant-specific feature views for one session (or chunk).

    ``single`` is the channel-averaged spliced stream (345 x T),
    ``channels`` the per-channel spliced streams, ``multi`` the per-channel
    context-averaged streams (23 x T). Unused views are None.
    """

    variant: str
    single: np.ndarray | None = None
    channels: list[np.ndarray] | None = None
    multi: list[np.ndarray] | None = None

    @property
    def n_frames(self) -> int:
        if self.single is not None:
            return self.single.shape[1]
        return self.channels[0].shape[1]


def _mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters linearly spaced on the mel scale from 0 to Nyquist."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(0.0, _mel_scale(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def mel_band_centers(n_mels: int, sample_rate: int) -> np.ndarray:
    edges = _mel_to_hz(np.linspace(0.0, _mel_scale(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, sample_rate: int, cfg: FeatureConfig) -> int:
    """Number of analysis frames under the no-padding framing rule."""
    win = round(sample_rate * cfg.frame_length_ms / 1000.0)
    hop = round(sample_rate * cfg.frame_shift_ms / 1000.0)
    if n_samples < win:
        raise DataError(f"waveform too short: {n_samples} samples < one {win}-sample frame")
    return 1 + (n_samples - win) // hop


def log_mel(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Log-mel filterbank features, one column per 10 ms frame.

    Hann-windowed 25 ms frames, magnitude spectrum, triangular mel bank,
    natural log with a floor.
    """
    win = round(w.sample_rate * cfg.frame_length_ms / 1000.0)
    hop = round(w.sample_rate * cfg.frame_shift_ms / 1000.0)
    n_frames = frame_count(w.samples.size, w.sample_rate, cfg)
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    window = np.hanning(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    segments = w.samples[idx] * window
    magnitude = np.abs(np.fft.rfft(segments, n=n_fft, axis=1))  # (T, bins)
    bank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate)
    energies = bank @ magnitude.T  # (n_mels, T)
    return np.log(np.maximum(energies, cfg.log_floor))


def _padded_context(feats: np.ndarray, context: int) -> np.ndarray:
    return np.pad(feats, ((0, 0), (context, context)), mode="edge")


def splice_and_subsample(feats: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Concatenate +/-context frames (edge-replicated), keep every k-th frame."""
    n_mels, n_frames = feats.shape
    c = cfg.splice_context
    padded = _padded_context(feats, c)
    blocks = [padded[:, c + off : c + off + n_frames] for off in range(-c, c + 1)]
    spliced = np.concatenate(blocks, axis=0)  # ((2c+1)*n_mels, T)
    return spliced[:, :: cfg.subsample_factor].copy()


def context_average(feats: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Average +/-context frames (edge-replicated), keep every k-th frame."""
    n_mels, n_frames = feats.shape
    c = cfg.splice_context
    padded = _padded_context(feats, c)
    total = np.zeros_like(feats)
    for off in range(-c, c + 1):
        total += padded[:, c + off : c + off + n_frames]
    averaged = total / (2 * c + 1)
    return averaged[:, :: cfg.subsample_factor].copy()


@dataclass
class FeatureBank:
    """Precomputed per-channel feature views for one session.

    Lets the trainer assemble inputs for arbitrary channel subsets without
    re-running the filterbank.
    """

    spliced: np.ndarray  # (C, spliced_dim, T)
    context: np.ndarray  # (C, n_mels, T)

    @property
    def n_channels(self) -> int:
        return self.spliced.shape[0]

    @property
    def n_frames(self) -> int:
        return self.spliced.shape[2]


def feature_bank(channels: list[Waveform], cfg: FeatureConfig) -> FeatureBank:
    if not channels:
        raise DataError("need at least one channel")
    n_samples = min(ch.samples.size for ch in channels)
    spliced, context = [], []
    for ch in channels:
        trimmed = Waveform(ch.samples[:n_samples], ch.sample_rate)
        lm = log_mel(trimmed, cfg)
        spliced.append(splice_and_subsample(lm, cfg))
        context.append(context_average(lm, cfg))
    return FeatureBank(spliced=np.stack(spliced), context=np.stack(context))


def model_input_from_bank(bank: FeatureBank, channel_idxs, variant: str) -> ModelInput:
    """Build the variant-specific views for a subset of channels."""
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    idxs = list(channel_idxs)
    if not idxs:
        raise DataError("need at least one channel index")
    if variant == "transformer":
        return ModelInput(variant, single=bank.spliced[idxs].mean(axis=0))
    if variant == "spatio_temporal":
        return ModelInput(variant, channels=[bank.spliced[i] for i in idxs])
    return ModelInput(
        variant,
        single=bank.spliced[idxs].mean(axis=0),
        multi=[bank.context[i] for i in idxs],
    )


def assemble_model_input(channels: list[Waveform], variant: str, cfg: FeatureConfig) -> ModelInput:
    """Waveforms straight to model input, for inference."""
    bank = feature_bank(channels, cfg)
    return model_input_from_bank(bank, range(bank.n_channels), variant)


# ---------------------------------------------------------------------------
# WAV files: PCM 16-bit little-endian, one mono file per channel
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise DataError(f"{path}: expected mono 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    scaled = np.clip(w.samples, -1.0, 1.0) * 32767.0
    pcm = np.round(scaled).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
