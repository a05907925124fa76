"""Posterior post-processing, frame-based DER with collar, and RTTM files.

DER is scored on a 10 ms frame grid: frames whose centers fall within the
collar of any reference segment boundary are excluded, the reference/
hypothesis speaker mapping is optimized by enumeration, and overlap regions
are fully scored (a frame with two reference speakers and one matching
hypothesis speaker still contributes one miss).
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from pathlib import Path

import numpy as np

from .errors import DataError
from .pit import best_permutation_by_correlation

SCORING_STEP = 0.01
MAX_ENUMERATED_SPEAKERS = 6


@dataclass
class Segment:
    session: str
    speaker: str
    onset: float
    offset: float

    def __post_init__(self):
        if not self.onset < self.offset:
            raise DataError(f"segment onset {self.onset} must precede offset {self.offset}")


@dataclass
class DerBreakdown:
    """Error components in seconds; der is their sum over the scored speech."""

    missed: float
    false_alarm: float
    confusion: float
    scored_speech: float

    @property
    def der(self) -> float:
        if self.scored_speech == 0.0:
            return 0.0
        return (self.missed + self.false_alarm + self.confusion) / self.scored_speech

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(
            self.missed + other.missed,
            self.false_alarm + other.false_alarm,
            self.confusion + other.confusion,
            self.scored_speech + other.scored_speech,
        )


def posteriors_to_segments(
    posteriors: np.ndarray,
    session: str,
    threshold: float = 0.5,
    median_window: int | None = None,
    frame_s: float = 0.1,
    speaker_names: list[str] | None = None,
) -> list[Segment]:
    """Binarize per speaker, optionally median-filter, merge runs into segments."""
    posteriors = np.asarray(posteriors)
    n_speakers, n_frames = posteriors.shape
    if speaker_names is None:
        speaker_names = [f"spk{s}" for s in range(n_speakers)]
    segments = []
    for s in range(n_speakers):
        active = posteriors[s] > threshold
        if median_window is not None:
            active = median_filter_binary(active, median_window)
        onset = None
        for t in range(n_frames + 1):
            on = t < n_frames and active[t]
            if on and onset is None:
                onset = t
            elif not on and onset is not None:
                segments.append(Segment(session, speaker_names[s], onset * frame_s, t * frame_s))
                onset = None
    return segments


def median_filter_binary(active: np.ndarray, window: int) -> np.ndarray:
    """Centered median filter with edge replication; window must be odd."""
    if window % 2 == 0:
        raise DataError(f"median window must be odd, got {window}")
    if window == 1:
        return active.copy()
    half = window // 2
    padded = np.pad(active.astype(int), half, mode="edge")
    out = np.empty(active.size, dtype=bool)
    for t in range(active.size):
        out[t] = padded[t : t + window].sum() * 2 > window
    return out


def _frame_activity(segments: list[Segment], speakers: list[str], n_frames: int) -> np.ndarray:
    centers = (np.arange(n_frames) + 0.5) * SCORING_STEP
    activity = np.zeros((len(speakers), n_frames), dtype=bool)
    index = {name: i for i, name in enumerate(speakers)}
    for seg in segments:
        row = index[seg.speaker]
        activity[row] |= (centers >= seg.onset) & (centers < seg.offset)
    return activity


def der(ref: list[Segment], hyp: list[Segment], collar: float = 0.25) -> DerBreakdown:
    """Frame-based diarization error rate at 10 ms resolution.

    The collar excludes frames near reference boundaries only; the speaker
    mapping minimizing total error is found by enumeration.
    """
    if not ref:
        return DerBreakdown(0.0, 0.0, 0.0, 0.0)
    end = max(seg.offset for seg in ref + hyp)
    n_frames = int(np.ceil(end / SCORING_STEP)) + 1
    ref_speakers = sorted({seg.speaker for seg in ref})
    hyp_speakers = sorted({seg.speaker for seg in hyp})
    if max(len(ref_speakers), len(hyp_speakers)) > MAX_ENUMERATED_SPEAKERS:
        raise ValueError("too many speakers for enumeration-based mapping")

    ref_act = _frame_activity(ref, ref_speakers, n_frames)
    hyp_act = _frame_activity(hyp, hyp_speakers, n_frames)

    centers = (np.arange(n_frames) + 0.5) * SCORING_STEP
    scored = np.ones(n_frames, dtype=bool)
    for seg in ref:
        scored &= np.abs(centers - seg.onset) > collar
        scored &= np.abs(centers - seg.offset) > collar

    ref_act = ref_act[:, scored]
    hyp_act = hyp_act[:, scored]
    n_ref = ref_act.sum(axis=0)
    n_hyp = hyp_act.sum(axis=0)

    # Optimal one-to-one speaker mapping: maximize co-active frame count.
    size = max(len(ref_speakers), len(hyp_speakers))
    best_correct = -1
    for perm in permutations(range(size)):
        correct = np.zeros(ref_act.shape[1], dtype=int)
        for r, h in enumerate(perm):
            if r < len(ref_speakers) and h < len(hyp_speakers):
                correct += ref_act[r] & hyp_act[h]
        total = int(correct.sum())
        if total > best_correct:
            best_correct = total
            best_correct_frames = correct

    miss = int(np.maximum(n_ref - n_hyp, 0).sum())
    false_alarm = int(np.maximum(n_hyp - n_ref, 0).sum())
    confusion = int((np.minimum(n_ref, n_hyp) - best_correct_frames).sum())
    return DerBreakdown(
        missed=miss * SCORING_STEP,
        false_alarm=false_alarm * SCORING_STEP,
        confusion=confusion * SCORING_STEP,
        scored_speech=int(n_ref.sum()) * SCORING_STEP,
    )


def average_posteriors_across_channels(per_channel: list[np.ndarray]) -> np.ndarray:
    """Align every channel's speaker order to the first channel, then average."""
    if not per_channel:
        raise DataError("need at least one channel of posteriors")
    reference = np.asarray(per_channel[0])
    total = reference.copy()
    for y in per_channel[1:]:
        y = np.asarray(y)
        if y.shape != reference.shape:
            raise DataError(f"posterior shapes differ: {reference.shape} vs {y.shape}")
        perm = best_permutation_by_correlation(reference, y)
        total += y[list(perm), :]
    return total / len(per_channel)


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------


def write_rttm(segments: list[Segment], path) -> None:
    with open(path, "w") as f:
        for seg in sorted(segments, key=lambda s: (s.session, s.onset, s.speaker)):
            f.write(
                f"SPEAKER {seg.session} 1 {seg.onset:.3f} {seg.offset - seg.onset:.3f} "
                f"<NA> <NA> {seg.speaker} <NA> <NA>\n"
            )


def read_rttm(path) -> list[Segment]:
    segments = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 10 or parts[0] != "SPEAKER":
                raise DataError(f"{path}:{lineno}: malformed RTTM line ({len(parts)} fields)")
            try:
                onset = float(parts[3])
                duration = float(parts[4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric onset/duration") from exc
            segments.append(Segment(session=parts[1], speaker=parts[7], onset=onset, offset=onset + duration))
    return segments
