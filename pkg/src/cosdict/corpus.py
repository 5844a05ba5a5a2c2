"""Corpora, synthetic sources, train/test splits and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .classify import MEASURES, score_frame
from .dictlearn import ConcatDictionary, DictionaryMeta, LearnConfig, concat, learn_dictionary
from .features import AudioSignal, FramingConfig, frame_count, frame_signal, normalize_rows, read_wav
from .solver import SolverConfig

__all__ = [
    "SyntheticSourceSpec",
    "generate_synthetic",
    "default_synthetic_sources",
    "CorpusSpec",
    "CorpusSplit",
    "split_corpus",
    "EvalReport",
    "evaluate",
    "learn_all",
    "sweep",
    "sweep_table",
    "DEFAULT_SWEEP",
]

SYNTHETIC_KINDS = ("bandpass_noise", "harmonic_tone", "am_noise")
N_HARMONICS = 8
DEFAULT_SWEEP = ((0.95, 0.95), (0.95, 1.0), (1.0, 0.95), (1.0, 1.0))


@dataclass(frozen=True)
class SyntheticSourceSpec:
    """Parameters of one synthetic source.

    ``band`` is used by ``bandpass_noise``, ``f0`` by ``harmonic_tone`` and
    ``mod_rate`` by ``am_noise``.
    """

    kind: str
    duration: float
    seed: int = 0
    band: tuple = (1000.0, 2000.0)
    f0: float = 200.0
    mod_rate: float = 4.0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        lo, hi = self.band
        if not 0 <= lo < hi:
            raise ValueError(f"band must satisfy 0 <= low < high, got {self.band}")
        if not self.f0 > 0 or not self.mod_rate > 0:
            raise ValueError("f0 and mod_rate must be positive")


def _smooth_drift(rng, t, n_terms=3, max_rate=0.5):
    rates = rng.uniform(0.05, max_rate, n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    drift = np.sin(2 * np.pi * rates[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
    return drift / n_terms


def generate_synthetic(spec, sample_rate=16000):
    """Render a :class:`SyntheticSourceSpec` as an :class:`AudioSignal` (peak 0.9)."""
    nyquist = sample_rate / 2.0
    n = int(round(spec.duration * sample_rate))
    if n < 1:
        raise ValueError("duration is shorter than one sample")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sample_rate

    if spec.kind == "bandpass_noise":
        lo, hi = spec.band
        if hi > nyquist:
            raise ValueError(f"band {spec.band} exceeds the Nyquist frequency {nyquist} Hz")
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        x = np.fft.irfft(spectrum, n)
    elif spec.kind == "harmonic_tone":
        if N_HARMONICS * spec.f0 >= nyquist:
            raise ValueError(
                f"harmonic {N_HARMONICS} of f0={spec.f0} Hz exceeds the Nyquist frequency"
            )
        x = np.zeros(n)
        for h in range(1, N_HARMONICS + 1):
            amp = (1.0 / h) * (1.0 + 0.5 * _smooth_drift(rng, t))
            phase = rng.uniform(0, 2 * np.pi)
            x += amp * np.sin(2 * np.pi * h * spec.f0 * t + phase)
    else:
        if spec.mod_rate >= nyquist:
            raise ValueError("mod_rate exceeds the Nyquist frequency")
        phase = rng.uniform(0, 2 * np.pi)
        envelope = 1.0 + 0.9 * np.sin(2 * np.pi * spec.mod_rate * t + phase)
        x = rng.standard_normal(n) * envelope

    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.9 * x / peak
    return AudioSignal(x, sample_rate)


def default_synthetic_sources(duration=65.0, seed=0):
    """Six sources: three disjoint-band noises, two harmonic tones, one AM noise."""
    return [
        ("band_low", SyntheticSourceSpec("bandpass_noise", duration, seed + 1, band=(300.0, 800.0))),
        ("band_mid", SyntheticSourceSpec("bandpass_noise", duration, seed + 2, band=(1500.0, 2500.0))),
        ("band_high", SyntheticSourceSpec("bandpass_noise", duration, seed + 3, band=(4000.0, 6000.0))),
        ("tone_220", SyntheticSourceSpec("harmonic_tone", duration, seed + 4, f0=220.0)),
        ("tone_347", SyntheticSourceSpec("harmonic_tone", duration, seed + 5, f0=347.0)),
        ("am_noise", SyntheticSourceSpec("am_noise", duration, seed + 6, mod_rate=4.0)),
    ]


@dataclass
class CorpusSpec:
    """Sources to split into training and held-out test audio.

    Each source is ``(label, items)`` where an item is a WAV path or an
    :class:`AudioSignal`. Items of one source are joined in order.
    """

    sources: list
    test_seconds: float = 5.0
    split: str = "tail_test"

    def __post_init__(self):
        if not self.sources:
            raise ValueError("corpus needs at least one source")
        if self.split not in ("tail_test", "head_test"):
            raise ValueError(f"split must be 'tail_test' or 'head_test', got {self.split!r}")
        if not self.test_seconds > 0:
            raise ValueError(f"test_seconds must be positive, got {self.test_seconds}")
        labels = [label for label, _ in self.sources]
        if len(set(labels)) != len(labels):
            raise ValueError("source labels must be unique")


@dataclass
class CorpusSplit:
    """Normalized features per source plus the sample ranges they came from.

    Ranges are ``(start, stop)`` in the joined-sample index space of each
    source. Silent training frames are dropped; silent test frames stay as
    all-zero rows.
    """

    train: dict
    test: dict
    sample_rate: int
    framing: FramingConfig
    train_ranges: dict = field(default_factory=dict)
    test_ranges: dict = field(default_factory=dict)

    @property
    def labels(self):
        return list(self.train)

    @property
    def meta(self):
        return DictionaryMeta(
            sample_rate=self.sample_rate,
            fft_size=self.framing.n_fft(self.sample_rate),
            frame_ms=float(self.framing.frame_ms),
            hop_ms=float(self.framing.hop_ms),
        )


def _load_item(item):
    if isinstance(item, AudioSignal):
        return item
    path = os.fspath(item)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"audio file not found: {path}")
    try:
        return read_wav(path)
    except ValueError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc


def _features(samples, sample_rate, framing):
    F = frame_signal(AudioSignal(samples, sample_rate), framing)
    return normalize_rows(F)


def split_corpus(spec, framing=None):
    """Carve a held-out test segment from every source; the rest trains."""
    framing = framing or FramingConfig()
    sample_rate = None
    train, test, train_ranges, test_ranges = {}, {}, {}, {}
    for label, items in spec.sources:
        if isinstance(items, (AudioSignal, str, os.PathLike)):
            items = [items]
        signals = [_load_item(it) for it in items]
        if not signals:
            raise ValueError(f"source {label!r} has no audio")
        for s in signals:
            if sample_rate is None:
                sample_rate = s.sample_rate
            elif s.sample_rate != sample_rate:
                raise ValueError(
                    f"inconsistent sample rates: {label!r} has {s.sample_rate} Hz, "
                    f"corpus uses {sample_rate} Hz"
                )
        frame_len = framing.frame_length(sample_rate)
        hop_len = framing.hop_length(sample_rate)
        n_test = int(round(spec.test_seconds * sample_rate))
        lengths = [len(s) for s in signals]
        total = sum(lengths)
        if n_test < frame_len or total - n_test < frame_len:
            raise ValueError(
                f"source too short: {label!r} has {total / sample_rate:.3f} s, needs "
                f"{spec.test_seconds} s of test audio plus at least one training frame"
            )
        if spec.split == "tail_test":
            test_range = (total - n_test, total)
        else:
            test_range = (0, n_test)

        joined = np.concatenate([s.samples for s in signals])
        test[label], _ = _features(joined[test_range[0]:test_range[1]], sample_rate, framing)

        # training pieces: per file, minus the test range, never straddling a boundary
        pieces = []
        start = 0
        for length in lengths:
            stop = start + length
            for a, b in ((start, min(stop, test_range[0])), (max(start, test_range[1]), stop)):
                if b - a >= frame_len:
                    pieces.append((a, b))
            start = stop
        feats = []
        used = []
        for a, b in pieces:
            n_frames = frame_count(b - a, frame_len, hop_len)
            F, silent = _features(joined[a:b], sample_rate, framing)
            feats.append(F[~silent])
            used.append((a, a + (n_frames - 1) * hop_len + frame_len))
        if not feats:
            raise ValueError(f"source too short: {label!r} leaves no training frames")
        train[label] = np.vstack(feats)
        train_ranges[label] = used
        test_ranges[label] = test_range
    return CorpusSplit(train, test, sample_rate, framing, train_ranges, test_ranges)


def learn_all(train, config, meta=None):
    """Learn dictionaries for ``train`` (label -> features) in insertion order."""
    dicts = []
    for label, F in train.items():
        dicts.append(learn_dictionary(F, dicts, config, label, meta))
    return concat(dicts)


def _percent(num, den):
    return float(100.0 * num / den) if den else float("nan")


@dataclass
class EvalReport:
    """Frame and stream accuracies of one evaluation run.

    ``confusion[m][i, j]`` counts frames of source ``i`` predicted as ``j``
    by measure ``m``. ``masdr_accuracy[i, P-1]`` is the percentage of
    complete length-``P`` windows of source ``i`` whose moving SDR sum picks
    source ``i`` (NaN when the stream is shorter than ``P`` frames).
    """

    labels: list
    confusion: dict
    masdr_accuracy: np.ndarray
    silent_frames: list
    nonconverged_frames: int = 0
    intra_threshold: float | None = None
    inter_threshold: float | None = None

    @property
    def measures(self):
        return tuple(self.confusion)

    @property
    def frame_counts(self):
        first = next(iter(self.confusion.values()))
        return first.sum(axis=1).astype(int).tolist()

    def per_source_accuracy(self, measure):
        cm = self.confusion[measure]
        return [_percent(cm[i, i], cm[i].sum()) for i in range(len(self.labels))]

    def overall_accuracy(self, measure):
        """Frame-weighted accuracy (%)."""
        cm = self.confusion[measure]
        return _percent(np.trace(cm), cm.sum())

    def source_averaged_accuracy(self, measure):
        return float(np.nanmean(self.per_source_accuracy(measure)))

    @property
    def classified_frames(self):
        return int(sum(self.frame_counts))

    @property
    def nonconverged_fraction(self):
        total = self.classified_frames
        return self.nonconverged_frames / total if total else 0.0

    def min_window(self):
        """Smallest window giving 100% stream accuracy, per source (``None`` if never)."""
        out = []
        for row in self.masdr_accuracy:
            hits = np.flatnonzero(row == 100.0)
            out.append(int(hits[0]) + 1 if hits.size else None)
        return out

    def to_dict(self):
        return {
            "labels": list(self.labels),
            "confusion": {m: cm.astype(int).tolist() for m, cm in self.confusion.items()},
            "masdr_accuracy": [[None if np.isnan(v) else float(v) for v in row]
                               for row in self.masdr_accuracy],
            "silent_frames": [int(v) for v in self.silent_frames],
            "nonconverged_frames": int(self.nonconverged_frames),
            "intra_threshold": self.intra_threshold,
            "inter_threshold": self.inter_threshold,
            "summary": {
                m: {
                    "overall": self.overall_accuracy(m),
                    "source_averaged": self.source_averaged_accuracy(m),
                    "per_source": self.per_source_accuracy(m),
                }
                for m in self.measures
            },
            "min_window": self.min_window(),
        }

    @classmethod
    def from_dict(cls, data):
        masdr = np.array([[np.nan if v is None else v for v in row]
                          for row in data["masdr_accuracy"]], dtype=np.float64)
        return cls(
            labels=list(data["labels"]),
            confusion={m: np.array(cm, dtype=np.int64) for m, cm in data["confusion"].items()},
            masdr_accuracy=masdr.reshape(len(data["labels"]), -1),
            silent_frames=list(data["silent_frames"]),
            nonconverged_frames=int(data["nonconverged_frames"]),
            intra_threshold=data.get("intra_threshold"),
            inter_threshold=data.get("inter_threshold"),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.to_json() == other.to_json()

    def table(self):
        """Aligned text table: per-source accuracy per measure and the stream window."""
        width = max(8, *(len(label) for label in self.labels))
        cols = [m.upper() for m in self.measures] + ["frames", "min P"]
        lines = [f"{'source':<{width}}  " + "  ".join(f"{c:>7}" for c in cols)]
        min_p = self.min_window()
        per = {m: self.per_source_accuracy(m) for m in self.measures}
        for i, label in enumerate(self.labels):
            cells = [f"{per[m][i]:7.2f}" for m in self.measures]
            cells.append(f"{self.frame_counts[i]:7d}")
            cells.append(f"{'-' if min_p[i] is None else min_p[i]:>7}")
            lines.append(f"{label:<{width}}  " + "  ".join(cells))
        cells = [f"{self.overall_accuracy(m):7.2f}" for m in self.measures]
        cells += [f"{self.classified_frames:7d}", f"{'':>7}"]
        lines.append(f"{'overall':<{width}}  " + "  ".join(cells))
        cells = [f"{self.source_averaged_accuracy(m):7.2f}" for m in self.measures]
        lines.append(f"{'mean':<{width}}  " + "  ".join(cells))
        return "\n".join(lines) + "\n"

    def summary_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source", *(f"{m}_accuracy" for m in self.measures), "frames",
                         "min_window"])
        per = {m: self.per_source_accuracy(m) for m in self.measures}
        min_p = self.min_window()
        for i, label in enumerate(self.labels):
            writer.writerow([label, *(f"{per[m][i]:.4f}" for m in self.measures),
                             self.frame_counts[i], "" if min_p[i] is None else min_p[i]])
        writer.writerow(["overall", *(f"{self.overall_accuracy(m):.4f}" for m in self.measures),
                         self.classified_frames, ""])
        return buf.getvalue()

    def confusion_csv(self, measure):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.labels])
        for label, row in zip(self.labels, self.confusion[measure]):
            writer.writerow([label, *(int(v) for v in row)])
        return buf.getvalue()

    def masdr_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n_windows = self.masdr_accuracy.shape[1]
        writer.writerow(["source", *(f"P{p}" for p in range(1, n_windows + 1))])
        for label, row in zip(self.labels, self.masdr_accuracy):
            writer.writerow([label, *("" if np.isnan(v) else f"{v:.4f}" for v in row)])
        return buf.getvalue()

    def write(self, out_dir, prefix=""):
        """Write text, CSV and JSON renderings into ``out_dir``; returns the paths."""
        os.makedirs(out_dir, exist_ok=True)
        files = {
            f"{prefix}report.txt": self.table(),
            f"{prefix}report.json": self.to_json() + "\n",
            f"{prefix}summary.csv": self.summary_csv(),
            f"{prefix}masdr.csv": self.masdr_csv(),
        }
        for m in self.measures:
            files[f"{prefix}confusion_{m}.csv"] = self.confusion_csv(m)
        paths = []
        for name, text in files.items():
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            paths.append(path)
        return paths


def _window_accuracy(sdr_stream, true_index, max_window):
    acc = np.full(max_window, np.nan)
    n = sdr_stream.shape[0]
    for P in range(1, max_window + 1):
        if n < P:
            break
        sums = np.lib.stride_tricks.sliding_window_view(sdr_stream, P, axis=0).sum(axis=-1)
        acc[P - 1] = _percent(np.count_nonzero(sums.argmax(axis=1) == true_index), sums.shape[0])
    return acc


def evaluate(dictionary, test, config=None, max_window=20):
    """Classify every held-out frame with all measures.

    Parameters
    ----------
    dictionary : ConcatDictionary
    test : dict
        Source label -> feature matrix. Every label must name a dictionary.
    config : SolverConfig, optional
    max_window : int, default=20
        Largest moving-SDR window examined.
    """
    if not isinstance(dictionary, ConcatDictionary):
        dictionary = concat(dictionary)
    cfg = config or SolverConfig()
    labels = dictionary.labels
    index = {label: i for i, label in enumerate(labels)}
    M = len(labels)
    confusion = {m: np.zeros((M, M), dtype=np.int64) for m in MEASURES}
    masdr = np.full((M, max_window), np.nan)
    silent_frames = [0] * M
    nonconverged = 0
    if not test:
        raise ValueError("no test features")
    for label, F in test.items():
        if label not in index:
            raise ValueError(f"test source {label!r} has no dictionary")
        F = np.asarray(F, dtype=np.float64)
        if F.ndim != 2 or F.shape[1] != dictionary.n_bins:
            raise ValueError(
                f"meta mismatch: {label!r} features have shape {F.shape}, dictionaries "
                f"expect {dictionary.n_bins} bins"
            )
        if F.shape[0] == 0:
            raise ValueError(f"test set of {label!r} is empty")
        k = index[label]
        stream = []
        for row in F:
            s = score_frame(row, dictionary, cfg)
            if s.silent:
                silent_frames[k] += 1
                continue
            nonconverged += not s.converged
            for m in MEASURES:
                confusion[m][k, s.predicted[m]] += 1
            stream.append(s.sdr)
        if stream:
            masdr[k] = _window_accuracy(np.array(stream), k, max_window)
    meta = dictionary.meta
    return EvalReport(labels, confusion, masdr, silent_frames, nonconverged,
                      meta.intra_threshold, meta.inter_threshold)


def sweep(split, thresholds=DEFAULT_SWEEP, n_atoms=100, seed=0, config=None, max_window=20):
    """Learn and evaluate once per ``(intra, inter)`` threshold pair."""
    reports = []
    for t_intra, t_inter in thresholds:
        learn_cfg = LearnConfig(t_intra, t_inter, n_atoms, seed)
        cd = learn_all(split.train, learn_cfg, split.meta)
        reports.append(evaluate(cd, split.test, config, max_window))
    return reports


def sweep_table(reports):
    """One row per threshold pair with the overall accuracy of each measure."""
    lines = ["  T_i   T_I      SDR      NNZ       SW"]
    for r in reports:
        lines.append(
            f"{r.intra_threshold:5.2f} {r.inter_threshold:5.2f} "
            + " ".join(f"{r.overall_accuracy(m):8.2f}" for m in MEASURES)
        )
    return "\n".join(lines) + "\n"


def sweep_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["intra_threshold", "inter_threshold", *(f"{m}_accuracy" for m in MEASURES)])
    for r in reports:
        writer.writerow([r.intra_threshold, r.inter_threshold,
                         *(f"{r.overall_accuracy(m):.4f}" for m in MEASURES)])
    return buf.getvalue()
