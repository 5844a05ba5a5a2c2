import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import get_window
from sklearn.base import clone

from cosdict.features import (
    AudioSignal,
    FramingConfig,
    SpectralFeatures,
    frame_count,
    frame_signal,
    normalize,
    normalize_rows,
    read_wav,
    write_wav,
)


def test_five_seconds_gives_330_frames():
    sig = AudioSignal(np.random.default_rng(0).standard_normal(5 * 16000), 16000)
    F = frame_signal(sig, FramingConfig(60, 15))
    assert F.shape == (330, 513)


def test_default_sizes_at_16k():
    cfg = FramingConfig()
    assert cfg.frame_length(16000) == 960
    assert cfg.hop_length(16000) == 240
    assert cfg.n_fft(16000) == 1024
    assert cfg.n_bins(16000) == 513


def test_zero_signal_gives_zero_features():
    F = frame_signal(AudioSignal(np.zeros(4000), 8000), FramingConfig(window="rect"))
    assert F.shape[0] > 0
    assert not F.any()


@pytest.mark.parametrize("k", [3, 50, 200, 511])
def test_bin_centred_sinusoid_peaks_at_its_bin(k):
    sr = 16000
    cfg = FramingConfig(frame_ms=64, hop_ms=16, window="rect")  # 1024 samples, no padding
    n_fft = cfg.n_fft(sr)
    assert n_fft == cfg.frame_length(sr)
    t = np.arange(sr) / sr
    F = frame_signal(AudioSignal(np.cos(2 * np.pi * k * sr / n_fft * t), sr), cfg)
    assert np.all(F.argmax(axis=1) == k)


def test_magnitudes_match_naive_dft():
    # 16-sample frames, hop 4, at 1 kHz; compare against an explicit DFT sum
    sr = 1000
    cfg = FramingConfig(frame_ms=16, hop_ms=4, window="hann", fft_size=32)
    x = np.random.default_rng(1).standard_normal(60)
    F = frame_signal(AudioSignal(x, sr), cfg)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(16) / 16)
    n = np.arange(16)
    for i in range(F.shape[0]):
        seg = x[4 * i: 4 * i + 16] * win
        for k in range(17):
            ref = abs(sum(seg[m] * np.exp(-2j * np.pi * k * m / 32) for m in n))
            assert F[i, k] == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_hann_is_periodic():
    sr = 16000
    cfg = FramingConfig(frame_ms=1, hop_ms=1, window="hann", fft_size=16)
    x = np.zeros(16)
    x[5] = 1.0  # impulse picks out one window sample
    F = frame_signal(AudioSignal(x, sr), cfg)
    assert F[0, 0] == pytest.approx(get_window("hann", 16)[5], rel=1e-12)


def test_signal_too_short():
    with pytest.raises(ValueError, match="signal too short"):
        frame_signal(AudioSignal(np.ones(100), 16000))


@pytest.mark.parametrize("kwargs", [
    {"frame_ms": 0}, {"hop_ms": 0}, {"hop_ms": 100}, {"window": "hamming"},
    {"fft_size": 0}, {"fft_size": 2.5},
])
def test_bad_framing_config(kwargs):
    with pytest.raises(ValueError):
        FramingConfig(**kwargs)


def test_fft_size_shorter_than_frame():
    with pytest.raises(ValueError, match="shorter than the frame"):
        FramingConfig(fft_size=512).n_fft(16000)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 5000), frame=st.integers(1, 600), hop=st.integers(1, 600))
def test_frame_count_formula(n, frame, hop):
    expected = 0 if n < frame else (n - frame) // hop + 1
    assert frame_count(n, frame, hop) == expected
    # the count is also the largest i with i*hop + frame <= n, plus one
    assert expected == sum(1 for i in range(n + 1) if i * hop + frame <= n)


def test_normalize_examples():
    v, silent = normalize([3.0, 4.0])
    assert not silent
    np.testing.assert_allclose(v, [0.6, 0.8], rtol=1e-15)
    e = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(normalize(e)[0], e)
    z, silent = normalize(np.zeros(4))
    assert silent and not z.any()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e3)))
def test_normalize_is_idempotent(f):
    v, silent = normalize(f)
    if silent:
        assert np.linalg.norm(f) <= 1e-10
        return
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(normalize(v)[0], v, rtol=1e-12, atol=1e-15)


def test_normalize_rows_flags_silence():
    F = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
    out, silent = normalize_rows(F)
    assert silent.tolist() == [False, True, False]
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0], [1.0, 0.0]])


def test_audio_signal_downmix_and_checks():
    stereo = np.stack([np.ones(10), -np.ones(10) * 3], axis=1)
    sig = AudioSignal(stereo, 8000)
    assert sig.samples.shape == (10,)
    np.testing.assert_allclose(sig.samples, -1.0)
    assert sig.duration == pytest.approx(10 / 8000)
    with pytest.raises(ValueError, match="finite"):
        AudioSignal([0.0, np.nan], 8000)
    with pytest.raises(ValueError, match="sample_rate"):
        AudioSignal([0.0], 0)


@pytest.mark.parametrize("dtype,tol", [("int16", 0.5 / 32768 + 1e-12), ("float32", 1e-7)])
def test_wav_round_trip(tmp_path, dtype, tol):
    x = 0.8 * np.sin(np.linspace(0, 40, 2000))
    path = tmp_path / "a.wav"
    write_wav(path, AudioSignal(x, 22050), dtype=dtype)
    back = read_wav(path)
    assert back.sample_rate == 22050
    np.testing.assert_allclose(back.samples, x, atol=tol)


def test_spectral_features_estimator():
    est = SpectralFeatures(sample_rate=8000, frame_ms=32, hop_ms=16)
    assert clone(est).get_params() == est.get_params()
    x = np.concatenate([np.zeros(800), np.random.default_rng(0).standard_normal(4000)])
    F = est.fit_transform(x)
    assert F.shape[1] == est.n_bins_ == 129
    assert est.silent_[0] and not est.silent_[-1]
    np.testing.assert_allclose(np.linalg.norm(F[~est.silent_], axis=1), 1.0)
    with pytest.raises(ValueError, match="sample rate mismatch"):
        est.transform(AudioSignal(x, 16000))
