"""Synthetic distributed-microphone two-speaker conversations.

Speech is amplitude-modulated noise shaped by a per-voice random spectral
envelope; propagation is free field (pure delay plus 1/r attenuation), which
preserves the spatial cues the multi-channel encoders exploit (time
differences of arrival and level differences) without simulating
reverberation. Hybrid sessions place both speakers at the same point, as if
their utterances were played back from one loudspeaker, which removes all
spatial contrast between them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import Waveform, write_wav

SPEED_OF_SOUND = 343.0


@dataclass
class RoomLayout:
    """Positions in meters; speakers around a table, microphones on it."""

    speaker_positions: list
    mic_positions: list
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.speaker_positions = [np.asarray(p, dtype=float) for p in self.speaker_positions]
        self.mic_positions = [np.asarray(p, dtype=float) for p in self.mic_positions]
        if len(self.mic_positions) < 1:
            raise DataError("layout needs at least one microphone")
        for s in self.speaker_positions:
            for m in self.mic_positions:
                if np.linalg.norm(s - m) <= 0.1:
                    raise DataError("speaker/microphone pair closer than 0.1 m")

    def distance(self, speaker: int, mic: int) -> float:
        return float(np.linalg.norm(self.speaker_positions[speaker] - self.mic_positions[mic]))


@dataclass
class SessionSpec:
    duration_s: float = 60.0
    n_channels: int = 4
    n_speakers: int = 2
    sample_rate: int = 8000
    snr_db: float | None = 20.0
    hybrid: bool = False
    identical_voices: bool = False
    drift_ppm: float = 0.0
    utterance_min_s: float = 1.0
    utterance_max_s: float = 5.0
    pause_mean_s: float = 3.0
    utterance_gain_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise DataError("session duration must be positive")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise DataError("SNR must be finite (or None to disable noise)")
        if self.n_channels < 1:
            raise DataError("need at least one channel")


@dataclass
class GroundTruth:
    """Per-speaker speech intervals in seconds plus the session duration."""

    intervals: list  # one list of (onset, offset) per speaker
    duration: float

    def __post_init__(self):
        for speaker in self.intervals:
            for onset, offset in speaker:
                if not (0.0 <= onset < offset <= self.duration + 1e-9):
                    raise DataError(f"bad interval ({onset}, {offset})")

    def label_matrix(self, n_frames: int, frame_s: float = 0.1) -> np.ndarray:
        """Binary S x T labels; a frame is active iff its center is inside an interval."""
        labels = np.zeros((len(self.intervals), n_frames))
        centers = (np.arange(n_frames) + 0.5) * frame_s
        for s, speaker in enumerate(self.intervals):
            for onset, offset in speaker:
                labels[s, (centers >= onset) & (centers < offset)] = 1.0
        return labels

    def overlap_ratio(self, grid_s: float = 0.01) -> float:
        """Overlapped speech time divided by total speech time."""
        n = int(np.ceil(self.duration / grid_s))
        active = np.zeros(n, dtype=int)
        centers = (np.arange(n) + 0.5) * grid_s
        for speaker in self.intervals:
            speaker_active = np.zeros(n, dtype=bool)
            for onset, offset in speaker:
                speaker_active |= (centers >= onset) & (centers < offset)
            active += speaker_active
        speech = (active >= 1).sum()
        if speech == 0:
            return 0.0
        return float((active >= 2).sum() / speech)


def sample_layout(n_channels: int, rng: np.random.Generator, n_speakers: int = 2) -> RoomLayout:
    """Microphones on a 1 m-radius tabletop disk, speakers on a 2 m circle."""
    mics = []
    for _ in range(n_channels):
        radius = np.sqrt(rng.uniform(0.01, 1.0))
        angle = rng.uniform(0.0, 2 * np.pi)
        mics.append(np.array([radius * np.cos(angle), radius * np.sin(angle), 0.75]))
    speakers = []
    for _ in range(n_speakers):
        angle = rng.uniform(0.0, 2 * np.pi)
        radius = rng.uniform(1.2, 2.2)
        speakers.append(np.array([radius * np.cos(angle), radius * np.sin(angle), 1.2]))
    return RoomLayout(speaker_positions=speakers, mic_positions=mics)


def make_hybrid(layout: RoomLayout) -> RoomLayout:
    """Collapse all speakers onto one position (a shared loudspeaker)."""
    point = layout.speaker_positions[0].copy()
    return RoomLayout(
        speaker_positions=[point.copy() for _ in layout.speaker_positions],
        mic_positions=[m.copy() for m in layout.mic_positions],
        speed_of_sound=layout.speed_of_sound,
    )


def sample_dialog(spec: SessionSpec, rng: np.random.Generator) -> GroundTruth:
    """Independent utterance/pause alternation per speaker; overlap is emergent."""
    intervals = []
    for _ in range(spec.n_speakers):
        speaker = []
        t = rng.exponential(spec.pause_mean_s)
        while t < spec.duration_s:
            u = rng.uniform(spec.utterance_min_s, spec.utterance_max_s)
            speaker.append((t, min(t + u, spec.duration_s)))
            t += u + rng.exponential(spec.pause_mean_s)
        intervals.append(speaker)
    return GroundTruth(intervals=intervals, duration=spec.duration_s)


def voice_filter(voice_seed: int, n_taps: int = 128) -> np.ndarray:
    """Linear-phase FIR from a smooth random log-magnitude envelope."""
    rng = np.random.default_rng(voice_seed)
    n_bins = n_taps // 2 + 1
    control = rng.normal(0.0, 1.2, size=8)
    log_mag = np.interp(np.linspace(0, 7, n_bins), np.arange(8), control)
    mag = np.exp(log_mag)
    mag /= np.sqrt((mag**2).mean())
    taps = np.roll(np.fft.irfft(mag, n=n_taps), n_taps // 2)
    return taps * np.hanning(n_taps)


def synth_speaker_signal(
    intervals: list,
    voice_seed: int,
    sample_rate: int,
    duration_s: float,
    noise_rng: np.random.Generator,
    rms: float = 0.1,
    gain_jitter_db: float = 5.0,
) -> np.ndarray:
    """Speech-like signal: filtered modulated noise inside the intervals, zero outside.

    Each utterance gets an independent level within +/- gain_jitter_db, so a
    speaker's absolute loudness at one microphone is not a stable identity
    cue; the level pattern across microphones is.
    """
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    taps = voice_filter(voice_seed)
    for onset, offset in intervals:
        a = int(round(onset * sample_rate))
        b = min(int(round(offset * sample_rate)), n)
        if b <= a:
            continue
        seg = noise_rng.normal(size=b - a)
        seg = np.convolve(seg, taps, mode="same")
        mod_freq = noise_rng.uniform(2.0, 6.0)
        mod_phase = noise_rng.uniform(0.0, 2 * np.pi)
        t = np.arange(b - a) / sample_rate
        seg *= 0.6 + 0.4 * np.sin(2 * np.pi * mod_freq * t + mod_phase)
        gain = 10.0 ** (noise_rng.uniform(-gain_jitter_db, gain_jitter_db) / 20.0)
        level = np.sqrt((seg**2).mean())
        if level > 0:
            seg *= gain * rms / level
        out[a:b] = seg
    return out


def _fractional_delay(x: np.ndarray, delay_samples: float) -> np.ndarray:
    """Shift right by a (possibly fractional) sample count, linear interpolation."""
    n = x.size
    k = int(np.floor(delay_samples))
    frac = delay_samples - k
    out = np.zeros(n)
    if k < n:
        out[k:] += (1.0 - frac) * x[: n - k]
    if frac > 0 and k + 1 < n:
        out[k + 1 :] += frac * x[: n - k - 1]
    return out


def _resample_by_factor(x: np.ndarray, factor: float) -> np.ndarray:
    positions = np.arange(x.size) * factor
    return np.interp(positions, np.arange(x.size), x, left=0.0, right=0.0)


def render_channels(
    signals: list,
    layout: RoomLayout,
    spec: SessionSpec,
    rng: np.random.Generator,
) -> list[Waveform]:
    """Free-field mix: per channel, delayed and 1/r-scaled speakers plus noise.

    Noise power is set against the mixed speech power so the requested SNR is
    exact by construction. Per-channel clock drift, when enabled, resamples
    each channel by an independent factor within +/- drift_ppm.
    """
    n_channels = len(layout.mic_positions)
    rate = spec.sample_rate
    channels = []
    for c in range(n_channels):
        mix = np.zeros(signals[0].size)
        for s, signal in enumerate(signals):
            dist = layout.distance(s, c)
            if dist <= 0:
                raise DataError("zero speaker-microphone distance")
            delay = dist / layout.speed_of_sound * rate
            mix += _fractional_delay(signal, delay) / dist
        if spec.snr_db is not None:
            speech_power = float((mix**2).mean())
            if speech_power > 0:
                noise_power = speech_power / (10.0 ** (spec.snr_db / 10.0))
                mix = mix + rng.normal(0.0, np.sqrt(noise_power), size=mix.size)
        if spec.drift_ppm:
            factor = 1.0 + rng.uniform(-spec.drift_ppm, spec.drift_ppm) * 1e-6
            mix = _resample_by_factor(mix, factor)
        channels.append(Waveform(np.clip(mix, -1.0, 1.0), rate))
    return channels


@dataclass
class Session:
    spec: SessionSpec
    layout: RoomLayout
    ground_truth: GroundTruth
    channels: list
    voice_seeds: list


def simulate_session(spec: SessionSpec) -> Session:
    """Deterministic session synthesis from the spec's seed."""
    root = np.random.default_rng(spec.seed)
    seeds = root.integers(0, 2**63, size=4 + spec.n_speakers)
    layout = sample_layout(spec.n_channels, np.random.default_rng(seeds[0]), spec.n_speakers)
    if spec.hybrid:
        layout = make_hybrid(layout)
    gt = sample_dialog(spec, np.random.default_rng(seeds[1]))
    base_voice = int(seeds[2])
    voice_seeds = [base_voice if spec.identical_voices else base_voice + s for s in range(spec.n_speakers)]
    signals = [
        synth_speaker_signal(
            gt.intervals[s], voice_seeds[s], spec.sample_rate, spec.duration_s,
            np.random.default_rng(seeds[4 + s]), gain_jitter_db=spec.utterance_gain_db,
        )
        for s in range(spec.n_speakers)
    ]
    channels = render_channels(signals, layout, spec, np.random.default_rng(seeds[3]))
    return Session(spec=spec, layout=layout, ground_truth=gt, channels=channels, voice_seeds=voice_seeds)


def session_metadata(session: Session) -> dict:
    spec = asdict(session.spec)
    return {
        "spec": spec,
        "seed": session.spec.seed,
        "overlap_ratio": session.ground_truth.overlap_ratio(),
        "voice_seeds": [int(v) for v in session.voice_seeds],
        "speaker_positions": [p.tolist() for p in session.layout.speaker_positions],
        "mic_positions": [m.tolist() for m in session.layout.mic_positions],
    }


def write_session(session: Session, out_dir, session_id: str) -> None:
    """Emit ch%02d.wav files, the reference RTTM, and a metadata JSON."""
    from .scoring import Segment, write_rttm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c, wav in enumerate(session.channels):
        write_wav(out / f"ch{c:02d}.wav", wav)
    segments = [
        Segment(session=session_id, speaker=f"spk{s}", onset=onset, offset=offset)
        for s, speaker in enumerate(session.ground_truth.intervals)
        for onset, offset in speaker
    ]
    write_rttm(segments, out / "ref.rttm")
    with open(out / "meta.json", "w") as f:
        json.dump(session_metadata(session), f, indent=2, sort_keys=True)
        f.write("\n")
