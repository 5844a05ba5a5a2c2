"""Magnitude-STFT features for dictionary learning and classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.io import wavfile
from sklearn.base import BaseEstimator, TransformerMixin

__all__ = [
    "SILENCE_EPSILON",
    "AudioSignal",
    "FramingConfig",
    "frame_signal",
    "frame_count",
    "normalize",
    "normalize_rows",
    "read_wav",
    "write_wav",
    "SpectralFeatures",
]

SILENCE_EPSILON = 1e-10


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 2:
            # (n_samples, n_channels) -> mono
            samples = samples.mean(axis=1)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D or (n, channels), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self):
        return self.samples.shape[0] / self.sample_rate

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class FramingConfig:
    """Frame length, hop, window and FFT size.

    ``fft_size="auto"`` picks the smallest power of two that holds one frame.
    """

    frame_ms: float = 60.0
    hop_ms: float = 15.0
    window: str = "hann"
    fft_size: Union[int, str] = "auto"

    def __post_init__(self):
        if not self.frame_ms > 0:
            raise ValueError(f"frame_ms must be positive, got {self.frame_ms}")
        if not 0 < self.hop_ms <= self.frame_ms:
            raise ValueError(f"hop_ms must satisfy 0 < hop_ms <= frame_ms, got {self.hop_ms}")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"window must be 'hann' or 'rect', got {self.window!r}")
        if self.fft_size != "auto":
            if isinstance(self.fft_size, bool) or not isinstance(self.fft_size, (int, np.integer)):
                raise ValueError(f"fft_size must be a positive integer or 'auto', got {self.fft_size!r}")
            if self.fft_size <= 0:
                raise ValueError(f"fft_size must be positive, got {self.fft_size}")

    def frame_length(self, sample_rate):
        return int(round(self.frame_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate):
        return max(1, int(round(self.hop_ms * sample_rate / 1000.0)))

    def n_fft(self, sample_rate):
        frame_len = self.frame_length(sample_rate)
        if self.fft_size == "auto":
            return 1 << max(0, int(frame_len - 1).bit_length())
        if self.fft_size < frame_len:
            raise ValueError(
                f"fft_size {self.fft_size} is shorter than the frame ({frame_len} samples)"
            )
        return int(self.fft_size)

    def n_bins(self, sample_rate):
        return self.n_fft(sample_rate) // 2 + 1


def frame_count(n_samples, frame_len, hop_len):
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop_len + 1


def _window(kind, length):
    if kind == "rect":
        return np.ones(length)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def frame_signal(signal, config=None):
    """Magnitude spectra of the windowed frames of ``signal``.

    Returns an array of shape ``(n_frames, n_fft // 2 + 1)`` where
    ``n_frames = (len - frame_len) // hop_len + 1``. Only frames lying fully
    inside the signal are emitted.
    """
    cfg = config or FramingConfig()
    sr = signal.sample_rate
    frame_len = cfg.frame_length(sr)
    hop_len = cfg.hop_length(sr)
    n_fft = cfg.n_fft(sr)
    if frame_len < 1:
        raise ValueError("frame length rounds to zero samples")
    n = frame_count(len(signal), frame_len, hop_len)
    if n == 0:
        raise ValueError(
            f"signal too short: {len(signal)} samples, one frame needs {frame_len}"
        )
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, frame_len)[::hop_len][:n]
    spectra = np.abs(np.fft.rfft(frames * _window(cfg.window, frame_len), n=n_fft, axis=1))
    return spectra


def normalize(f, eps=SILENCE_EPSILON):
    """L2-normalize one feature vector.

    Returns ``(vector, silent)``. A vector whose norm does not exceed ``eps``
    is returned unchanged with ``silent=True``.
    """
    f = np.asarray(f, dtype=np.float64)
    norm = np.linalg.norm(f)
    if norm <= eps:
        return f, True
    return f / norm, False


def normalize_rows(F, eps=SILENCE_EPSILON):
    """Row-wise :func:`normalize`; returns ``(F_normalized, silent_mask)``."""
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=1)
    silent = norms <= eps
    out = F.copy()
    out[~silent] /= norms[~silent, None]
    return out, silent


def read_wav(path):
    """Read a PCM16 or float32 WAV file as a mono :class:`AudioSignal`."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    return AudioSignal(samples, sr)


def write_wav(path, signal, dtype="int16"):
    if dtype == "int16":
        data = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif dtype == "float32":
        data = signal.samples.astype(np.float32)
    else:
        raise ValueError(f"dtype must be 'int16' or 'float32', got {dtype!r}")
    wavfile.write(path, signal.sample_rate, data)


class SpectralFeatures(TransformerMixin, BaseEstimator):
    """Turn a waveform into (optionally normalized) magnitude-STFT frames.

    Stateless: ``fit`` only validates parameters.

    Parameters
    ----------
    sample_rate : int, default=16000
        Rate assumed for bare arrays passed to ``transform``. An
        :class:`AudioSignal` must match it.
    frame_ms, hop_ms : float, default=60.0, 15.0
    window : {'hann', 'rect'}, default='hann'
    fft_size : int or 'auto', default='auto'
    normalize : bool, default=True
        L2-normalize each frame. Silent frames stay all-zero and are
        recorded in ``silent_`` after ``transform``.
    """

    def __init__(self, sample_rate=16000, frame_ms=60.0, hop_ms=15.0, window="hann",
                 fft_size="auto", normalize=True):
        self.sample_rate = sample_rate
        self.frame_ms = frame_ms
        self.hop_ms = hop_ms
        self.window = window
        self.fft_size = fft_size
        self.normalize = normalize

    @property
    def framing(self):
        return FramingConfig(self.frame_ms, self.hop_ms, self.window, self.fft_size)

    def fit(self, X=None, y=None):
        self.framing.n_fft(self.sample_rate)
        self.n_bins_ = self.framing.n_bins(self.sample_rate)
        return self

    def transform(self, X):
        if isinstance(X, AudioSignal):
            if X.sample_rate != self.sample_rate:
                raise ValueError(
                    f"sample rate mismatch: signal {X.sample_rate} Hz, expected {self.sample_rate} Hz"
                )
            signal = X
        else:
            signal = AudioSignal(X, self.sample_rate)
        F = frame_signal(signal, self.framing)
        if not self.normalize:
            self.silent_ = np.linalg.norm(F, axis=1) <= SILENCE_EPSILON
            return F
        F, self.silent_ = normalize_rows(F)
        return F
