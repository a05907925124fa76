"""Session-level inference: posteriors, segments, and posterior dumps."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureConfig, ModelInput, Waveform, assemble_model_input, read_wav
from .model import DiarizationModel, forward_attractors_posteriors, forward_posteriors
from .scoring import (
    DerBreakdown,
    average_posteriors_across_channels,
    der,
    posteriors_to_segments,
    read_rttm,
)

POSTERIOR_MAGIC = b"MCEP"


def infer_attractors_posteriors(
    model: DiarizationModel, channels: list[Waveform], fcfg: FeatureConfig
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Attractors plus speech-activity posteriors for one session.

    Multi-channel encoders consume all channels natively and yield one
    attractor matrix. The transformer baseline given several channels runs
    once per channel and averages the posteriors after aligning speaker
    order by correlation; its attractors are returned per channel.
    """
    if not channels:
        raise DataError("need at least one channel")
    variant = model.config.variant
    if variant == "transformer" and len(channels) > 1:
        per_channel = []
        attractors = {}
        for c, ch in enumerate(channels):
            inputs = assemble_model_input([ch], variant, fcfg)
            b, y = forward_attractors_posteriors(model, inputs)
            per_channel.append(y.data)
            attractors[f"attractors.ch{c:02d}"] = b.data
        return attractors, average_posteriors_across_channels(per_channel)
    inputs = assemble_model_input(channels, variant, fcfg)
    b, y = forward_attractors_posteriors(model, inputs)
    return {"attractors": b.data}, y.data


def infer_posteriors(model: DiarizationModel, channels: list[Waveform], fcfg: FeatureConfig) -> np.ndarray:
    """Speech-activity posteriors for one session (see infer_attractors_posteriors)."""
    return infer_attractors_posteriors(model, channels, fcfg)[1]


def diarize(
    model: DiarizationModel,
    channels: list[Waveform],
    fcfg: FeatureConfig,
    session: str,
    threshold: float = 0.5,
    median_window: int | None = 11,
):
    """Posteriors plus merged segments for one session."""
    posteriors = infer_posteriors(model, channels, fcfg)
    segments = posteriors_to_segments(
        posteriors, session, threshold=threshold, median_window=median_window,
        frame_s=model.config.frame_seconds,
    )
    return posteriors, segments


def evaluate_sessions(
    model: DiarizationModel,
    session_dirs,
    fcfg: FeatureConfig,
    n_channels: int | None = None,
    collar: float = 0.25,
    threshold: float = 0.5,
    median_window: int | None = 11,
) -> DerBreakdown:
    """Aggregate DER of the model over simulated session directories."""
    total = DerBreakdown(0.0, 0.0, 0.0, 0.0)
    for session_dir in session_dirs:
        session_dir = Path(session_dir)
        wav_paths = sorted(session_dir.glob("ch*.wav"))
        k = n_channels if n_channels is not None else len(wav_paths)
        if k > len(wav_paths):
            raise DataError(f"{session_dir}: requested {k} channels, found {len(wav_paths)}")
        channels = [read_wav(p) for p in wav_paths[:k]]
        _, segments = diarize(
            model, channels, fcfg, session_dir.name,
            threshold=threshold, median_window=median_window,
        )
        reference = read_rttm(session_dir / "ref.rttm")
        total = total + der(reference, segments, collar)
    return total


def write_posteriors(path, posteriors: np.ndarray) -> None:
    """Binary dump: magic, uint32 speaker count, uint32 frame count, float32 rows."""
    posteriors = np.asarray(posteriors, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(POSTERIOR_MAGIC)
        f.write(struct.pack("<II", posteriors.shape[0], posteriors.shape[1]))
        f.write(posteriors.astype("<f4").tobytes())


def read_posteriors(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != POSTERIOR_MAGIC:
            raise DataError(f"{path}: not a posterior dump")
        n_speakers, n_frames = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * n_speakers * n_frames), dtype="<f4")
    return data.reshape(n_speakers, n_frames).astype(np.float64)
