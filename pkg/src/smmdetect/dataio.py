"""Datasets of labelled windows: CSV ingestion, synthetic recordings,
class balancing, leave-one-subject-out splits and LSTM sequence assembly."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import Annotation, Recording, Window, highpass_filter, resample_linear, segment
from .tensorcore import DTYPE, Rng

log = logging.getLogger(__name__)

N_CHANNELS = 9


class CsvSchemaError(ValueError):
    """A recording CSV does not follow the documented schema."""


@dataclass
class Dataset:
    """Columnar store of windows: ``X`` is ``(N, c, w)``, the rest are length N."""

    X: np.ndarray
    y: np.ndarray
    subject: np.ndarray
    t_index: np.ndarray
    rate: float
    step: int
    provenance: str = "synthetic"
    subjects: list[str] = field(default_factory=list)
    selected_indices: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.subject = np.asarray(self.subject, dtype=object)
        self.t_index = np.asarray(self.t_index, dtype=np.int64)
        if not self.subjects:
            self.subjects = list(dict.fromkeys(self.subject.tolist()))
        unknown = set(self.subject.tolist()) - set(self.subjects)
        if unknown:
            raise ValueError(f"windows reference unknown subjects {sorted(unknown)}")

    @classmethod
    def from_windows(cls, windows: list[Window], rate: float, step: int,
                     provenance: str = "synthetic") -> "Dataset":
        if not windows:
            raise ValueError("cannot build a dataset from zero windows")
        return cls(
            X=np.stack([w.x for w in windows]).astype(DTYPE),
            y=[w.label for w in windows],
            subject=[w.subject_id for w in windows],
            t_index=[w.t_index for w in windows],
            rate=rate, step=step, provenance=provenance,
        )

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Window:
        return Window(self.X[i], int(self.y[i]), self.subject[i], int(self.t_index[i]))

    @property
    def windows(self) -> list[Window]:
        return [self[i] for i in range(len(self))]

    @property
    def window_samples(self) -> int:
        return self.X.shape[2]

    def subset(self, idx, subjects=None) -> "Dataset":
        idx = np.asarray(idx)
        subs = list(dict.fromkeys(self.subject[idx].tolist())) if subjects is None else subjects
        return Dataset(self.X[idx], self.y[idx], self.subject[idx], self.t_index[idx],
                       self.rate, self.step, self.provenance, subs)

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return len(self.y) - n1, n1

    def smm_ratio(self) -> float:
        return float(self.y.mean())

    def per_subject_stats(self) -> list[dict]:
        rows = []
        for s in self.subjects:
            m = self.subject == s
            n1 = int(self.y[m].sum())
            n = int(m.sum())
            rows.append({"subject": s, "no_smm": n - n1, "smm": n1, "all": n,
                         "smm_ratio": n1 / n if n else 0.0})
        return rows


@dataclass
class LosoSplit:
    test_subject: str
    train: Dataset
    test: Dataset


@dataclass
class SequenceDataset:
    """Sequences of ``tau`` consecutive windows, stored as row indices into ``data``."""

    data: Dataset
    index: np.ndarray  # (n_seq, tau)
    tau: int

    @property
    def labels(self) -> np.ndarray:
        return self.data.y[self.index[:, -1]]

    def __len__(self):
        return len(self.index)


# --- CSV ---------------------------------------------------------------------

def _header(n_channels):
    return ["t", *(f"ch{i}" for i in range(1, n_channels + 1)), "label"]


def labels_to_annotations(labels) -> list[Annotation]:
    """Run-length encode a 0/1 label column into SMM intervals."""
    labels = np.asarray(labels, dtype=np.int8)
    padded = np.concatenate([[0], labels, [0]])
    edges = np.flatnonzero(np.diff(padded))
    return [Annotation(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def load_csv(path, n_channels: int = N_CHANNELS) -> Recording:
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise CsvSchemaError(f"{path}:1: expected metadata line '# subject=<id> rate=<hz>'")
        meta = dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)
        if "subject" not in meta or "rate" not in meta:
            raise CsvSchemaError(f"{path}:1: metadata line must carry subject= and rate=")
        try:
            rate = float(meta["rate"])
        except ValueError:
            raise CsvSchemaError(f"{path}:1: rate {meta['rate']!r} is not a number") from None
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = _header(n_channels)
        if header != expected:
            raise CsvSchemaError(f"{path}:2: header {header} does not match {expected}")
        rows = []
        labels = []
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(expected):
                raise CsvSchemaError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                t = int(row[0])
                vals = [float(v) for v in row[1:-1]]
                lab = int(row[-1])
            except ValueError as exc:
                raise CsvSchemaError(f"{path}:{lineno}: {exc}") from None
            if lab not in (0, 1):
                raise CsvSchemaError(f"{path}:{lineno}: label must be 0 or 1, got {lab}")
            if t != len(rows):
                raise CsvSchemaError(f"{path}:{lineno}: sample index {t}, expected {len(rows)}")
            rows.append(vals)
            labels.append(lab)
    if not rows:
        raise CsvSchemaError(f"{path}: no samples")
    channels = np.array(rows, dtype=DTYPE).T
    return Recording(meta["subject"], channels, rate, labels_to_annotations(labels))


def write_csv(rec: Recording, path) -> None:
    mask = rec.smm_mask().astype(int)
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# subject={rec.subject_id} rate={rec.rate!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(rec.n_channels))
        for t in range(rec.length):
            w.writerow([t, *(repr(float(v)) for v in rec.channels[:, t]), int(mask[t])])


# --- synthetic recordings ----------------------------------------------------

def _split_integer(total: int, weights) -> np.ndarray:
    """Integer parts of ``total`` proportional to ``weights`` that sum exactly."""
    weights = np.asarray(weights, dtype=DTYPE)
    raw = total * weights / weights.sum()
    parts = np.floor(raw).astype(np.int64)
    rest = total - parts.sum()
    order = np.argsort(-(raw - parts), kind="stable")
    parts[order[:rest]] += 1
    return parts


def _smooth_noise(rng: Rng, shape, std, width=5):
    white = rng.normal(shape, 0.0, std)
    kernel = np.ones(width) / width
    return np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), -1, white)


def generate_synthetic(rng: Rng, n_subjects: int = 5, duration_s: float = 1800.0,
                       rate: float = 100.0, smm_fraction: float = 0.27,
                       band: tuple[float, float] = (2.0, 4.0),
                       n_channels: int = N_CHANNELS) -> list[Recording]:
    """Synthetic wrist-IMU recordings with exactly annotated SMM bursts.

    Background activity is smoothed noise, slow drift, a DC offset per
    channel and occasional short oscillatory gestures. SMM episodes last
    3-12 s and are bursts of sinusoids in ``band`` with a per-subject
    frequency, phase, amplitude and channel mixing; the oscillation briefly
    fades inside long episodes.
    """
    if not 0.0 < smm_fraction < 1.0:
        raise ValueError(f"smm_fraction must be in (0, 1), got {smm_fraction}")
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    L = int(round(duration_s * rate))
    lo, hi = band
    recordings = []
    for s in range(n_subjects):
        r = rng.child(s)
        n_smm = int(round(smm_fraction * L))
        mean_burst = 7.5 * rate
        k = max(1, int(round(n_smm / mean_burst)))
        bursts = _split_integer(n_smm, r.uniform(3.0, 12.0, k))
        gaps = _split_integer(L - n_smm, r.uniform(0.5, 1.5, k + 1))

        t = np.arange(L) / rate
        x = np.zeros((n_channels, L), dtype=DTYPE)
        x += r.normal((n_channels, 1), 0.0, 1.0)  # DC offset per channel
        for _ in range(2):
            fd = r.uniform(0.005, 0.05)
            x += r.normal((n_channels, 1), 0.0, 0.2) * np.sin(2 * np.pi * fd * t + r.uniform(0, 2 * np.pi))
        x += _smooth_noise(r, (n_channels, L), 0.15)

        # subject-specific movement signature
        f0 = r.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
        amp = r.uniform(0.8, 1.4)
        mix = r.normal(n_channels, 0.0, 1.0)
        mix /= np.linalg.norm(mix) / np.sqrt(n_channels)
        phase = r.uniform(0, 2 * np.pi, n_channels)

        annotations = []
        pos = 0
        for i in range(k):
            pos += int(gaps[i])
            start, n = pos, int(bursts[i])
            pos += n
            annotations.append(Annotation(start, start + n))
            tt = np.arange(n) / rate
            freq = np.clip(f0 + r.uniform(-0.25, 0.25) * (hi - lo), lo, hi)
            env = np.ones(n)
            ramp = min(int(0.2 * rate), n // 2)
            if ramp:
                env[:ramp] = np.linspace(0, 1, ramp)
                env[n - ramp:] = np.linspace(1, 0, ramp)
            for _ in range(int(n // (4 * rate))):
                d = int(r.uniform(0.3, 0.6) * rate)
                c0 = int(r.integers(0, max(1, n - d)))
                env[c0:c0 + d] *= 0.15
            wave = np.sin(2 * np.pi * freq * tt[None, :] + phase[:, None])
            wave += 0.3 * np.sin(4 * np.pi * freq * tt[None, :] + 2 * phase[:, None])
            x[:, start:start + n] += amp * mix[:, None] * env[None, :] * wave
        # brief everyday gestures outside SMM episodes
        smm = np.zeros(L, dtype=bool)
        for a in annotations:
            smm[a.start:a.end] = True
        n_gestures = int(L / (10 * rate))
        for _ in range(n_gestures):
            d = int(r.uniform(0.3, 0.7) * rate)
            c0 = int(r.integers(0, L - d))
            if smm[max(0, c0 - int(rate)):c0 + d + int(rate)].any():
                continue
            gf = r.uniform(1.0, 6.0)
            gm = r.normal(n_channels, 0.0, 0.6)
            tt = np.arange(d) / rate
            x[:, c0:c0 + d] += gm[:, None] * np.sin(2 * np.pi * gf * tt + r.uniform(0, 2 * np.pi))[None, :] \
                * np.hanning(d)[None, :]
        recordings.append(Recording(f"sub{s + 1}", x, float(rate), annotations))
    return recordings


# --- window datasets ---------------------------------------------------------

def prepare_dataset(recordings, window_s: float = 1.0, step: int = 10, cutoff_hz: float | None = 0.1,
                    resample_hz: float | None = None, provenance: str = "synthetic",
                    threshold: float = 0.5) -> Dataset:
    """Filter, optionally resample, then segment every recording into one Dataset."""
    windows = []
    rate = None
    for rec in recordings:
        if cutoff_hz is not None:
            rec = highpass_filter(rec, cutoff_hz)
        if resample_hz is not None:
            rec = resample_linear(rec, resample_hz)
        if rate is not None and rec.rate != rate:
            raise ValueError(f"recordings have mixed rates {rate} and {rec.rate}; pass resample_hz")
        rate = rec.rate
        windows.extend(segment(rec, window_s, step, threshold))
    return Dataset.from_windows(windows, rate, step, provenance)


def balance(train: Dataset, rng: Rng) -> Dataset:
    """Undersample the majority class to the minority count, without replacement.

    The kept row indices (in original order) are stored on the result as
    ``selected_indices`` so the draw can be replayed.
    """
    pos = np.flatnonzero(train.y == 1)
    neg = np.flatnonzero(train.y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balancing needs both classes in the training set")
    m = min(len(pos), len(neg))
    if len(pos) > m:
        pos = np.sort(pos[rng.choice(len(pos), m)])
    if len(neg) > m:
        neg = np.sort(neg[rng.choice(len(neg), m)])
    keep = np.sort(np.concatenate([pos, neg]))
    log.debug("balanced %d -> %d windows (%d per class)", len(train), len(keep), m)
    out = train.subset(keep, subjects=train.subjects)
    out.selected_indices = keep
    return out


def loso_splits(data: Dataset) -> list[LosoSplit]:
    if len(data.subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    splits = []
    for s in data.subjects:
        test = data.subject == s
        others = [x for x in data.subjects if x != s]
        splits.append(LosoSplit(s, data.subset(np.flatnonzero(~test), others),
                                data.subset(np.flatnonzero(test), [s])))
    return splits


def build_sequences(data: Dataset, tau: int) -> SequenceDataset:
    """Stride-1 runs of ``tau`` consecutive windows that never cross a subject or a gap."""
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    n = len(data)
    if n == 0:
        return SequenceDataset(data, np.zeros((0, tau), dtype=np.int64), tau)
    same_subject = data.subject[1:] == data.subject[:-1]
    dt = np.diff(data.t_index)
    if np.any(same_subject & (dt <= 0)):
        raise ValueError("windows must be ordered by (subject, t_index)")
    linked = np.concatenate([[False], same_subject & (dt == data.step)])
    # position of each row within its run of consecutive windows
    run_start = np.where(~linked, np.arange(n), 0)
    run_start = np.maximum.accumulate(run_start)
    pos_in_run = np.arange(n) - run_start
    ends = np.flatnonzero(pos_in_run >= tau - 1)
    index = ends[:, None] - (tau - 1) + np.arange(tau)[None, :]
    return SequenceDataset(data, index.astype(np.int64), tau)


def save_dataset(data: Dataset, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, X=data.X, y=data.y, subject=np.array(data.subject, dtype=str),
                 t_index=data.t_index, rate=data.rate, step=data.step,
                 provenance=data.provenance, subjects=np.array(data.subjects, dtype=str))


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        return Dataset(z["X"], z["y"], z["subject"].astype(object), z["t_index"],
                       float(z["rate"]), int(z["step"]), str(z["provenance"]),
                       [str(s) for s in z["subjects"]])
