"""IMU preprocessing: DC removal, linear resampling and sliding-window segmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .tensorcore import DTYPE

SMM = 1
NO_SMM = 0


class Annotation(NamedTuple):
    start: int  # inclusive sample index
    end: int    # exclusive
    label: int = SMM


@dataclass
class Recording:
    """One subject's continuous multi-channel stream, channels shaped ``(c, L)``."""

    subject_id: str
    channels: np.ndarray
    rate: float
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=DTYPE)
        if self.channels.ndim != 2:
            raise ValueError(f"channels must be (c, L), got shape {self.channels.shape}")
        self.annotations = sorted(Annotation(*a) for a in self.annotations)
        L = self.length
        prev_end = 0
        for a in self.annotations:
            if not 0 <= a.start < a.end <= L:
                raise ValueError(f"annotation {a} outside recording of length {L}")
            if a.start < prev_end:
                raise ValueError(f"annotation {a} overlaps its predecessor")
            prev_end = a.end

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    def smm_mask(self) -> np.ndarray:
        mask = np.zeros(self.length, dtype=bool)
        for a in self.annotations:
            if a.label == SMM:
                mask[a.start:a.end] = True
        return mask

    def smm_fraction(self) -> float:
        return float(self.smm_mask().mean())


@dataclass
class Window:
    x: np.ndarray  # (c, w)
    label: int
    subject_id: str
    t_index: int


def highpass_filter(rec: Recording, cutoff_hz: float = 0.1) -> Recording:
    """First-order Butterworth high-pass run forward and backward (zero phase).

    No samples are trimmed; windows within about two seconds of either end
    keep a small residual transient.
    """
    nyquist = rec.rate / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")
    b, a = sps.butter(1, cutoff_hz, btype="highpass", fs=rec.rate)
    # reflect ~10 time constants so the start-up transient decays inside the pad;
    # even reflection avoids the DC step an odd extension makes at a non-mean edge
    padlen = min(int(math.ceil(rec.rate / cutoff_hz)), rec.length - 1)
    filtered = sps.filtfilt(b, a, rec.channels, axis=1, padtype="even", padlen=padlen)
    return replace(rec, channels=filtered)


def resampled_length(n: int, source_hz: float, target_hz: float) -> int:
    ratio = Fraction(target_hz) / Fraction(source_hz)
    return math.floor((n - 1) * ratio) + 1


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def resample_linear(rec: Recording, target_hz: float) -> Recording:
    """Linear interpolation onto a uniform grid at ``target_hz`` over the same span."""
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz == rec.rate:
        return replace(rec, channels=rec.channels.copy())
    n_new = resampled_length(rec.length, rec.rate, target_hz)
    step = Fraction(rec.rate) / Fraction(target_hz)
    k = np.arange(n_new)
    pos = k * float(step)
    pos[-1] = min(pos[-1], rec.length - 1)
    src = np.arange(rec.length, dtype=DTYPE)
    channels = np.stack([np.interp(pos, src, ch) for ch in rec.channels])
    ratio = Fraction(target_hz) / Fraction(rec.rate)
    annotations = []
    for a in rec.annotations:
        start = min(_round_half_up(a.start * ratio), n_new)
        end = min(_round_half_up(a.end * ratio), n_new)
        if end > start:
            annotations.append(Annotation(start, end, a.label))
    return Recording(rec.subject_id, channels, float(target_hz), annotations)


def label_window(annotations, start: int, w: int, threshold: float = 0.5) -> int:
    """1 iff at least ``threshold`` of the window's samples are annotated SMM."""
    end = start + w
    covered = 0
    for a in annotations:
        if Annotation(*a).label != SMM:
            continue
        covered += max(0, min(end, a[1]) - max(start, a[0]))
    return int(covered >= threshold * w)


def window_length(window_s: float, rate: float) -> int:
    return int(round(window_s * rate))


def segment(rec: Recording, window_s: float = 1.0, step_samples: int = 10,
            threshold: float = 0.5) -> list[Window]:
    """Sliding windows starting at 0, step, 2*step, ... with majority labels.

    Window arrays are read-only views into ``rec.channels``.
    """
    w = window_length(window_s, rec.rate)
    if w < 1 or w > rec.length:
        raise ValueError(f"window of {w} samples does not fit a recording of {rec.length}")
    if step_samples < 1:
        raise ValueError("step must be at least one sample")
    starts = np.arange(0, rec.length - w + 1, step_samples)
    cum = np.concatenate([[0], np.cumsum(rec.smm_mask())])
    covered = cum[starts + w] - cum[starts]
    labels = (covered >= threshold * w).astype(int)
    views = sliding_window_view(rec.channels, w, axis=1)
    return [Window(views[:, s, :], int(lab), rec.subject_id, int(s))
            for s, lab in zip(starts, labels)]


def window_overlap(w: int, step: int) -> float:
    return (w - step) / w
