import json

import numpy as np
import pytest
from scipy.signal import find_peaks, welch

from cosdict.classify import MEASURES
from cosdict.corpus import (
    CorpusSpec,
    EvalReport,
    SyntheticSourceSpec,
    _window_accuracy,
    default_synthetic_sources,
    evaluate,
    generate_synthetic,
    split_corpus,
    sweep,
    sweep_csv,
    sweep_table,
)
from cosdict.dictlearn import LearnConfig, concat, learn_dictionary
from cosdict.features import AudioSignal, FramingConfig, write_wav

from conftest import SR, features_of, meta_for


def test_bandpass_energy_stays_in_band():
    sig = generate_synthetic(SyntheticSourceSpec("bandpass_noise", 5.0, 7, band=(1000, 2000)), SR)
    f, pxx = welch(sig.samples, fs=SR, nperseg=4096)
    inside = pxx[(f >= 900) & (f <= 2100)].sum()
    assert inside / pxx.sum() >= 0.95


def test_harmonic_tone_peaks():
    sig = generate_synthetic(SyntheticSourceSpec("harmonic_tone", 2.0, 3, f0=200.0), SR)
    seg = sig.samples[:SR] * np.hanning(SR)  # 1 s -> 1 Hz bins
    mag = np.abs(np.fft.rfft(seg))
    peaks, props = find_peaks(mag, height=mag.max() * 1e-3)
    top = np.sort(peaks[np.argsort(props["peak_heights"])[-8:]])
    np.testing.assert_allclose(top, 200 * np.arange(1, 9), atol=1)


def test_am_noise_envelope_rate():
    sig = generate_synthetic(SyntheticSourceSpec("am_noise", 4.0, 5, mod_rate=4.0), SR)
    power = sig.samples ** 2
    spec = np.abs(np.fft.rfft(power - power.mean()))
    freqs = np.fft.rfftfreq(power.size, 1 / SR)
    assert freqs[np.argmax(spec)] == pytest.approx(4.0, abs=0.25)


def test_synthetic_is_deterministic():
    spec = SyntheticSourceSpec("harmonic_tone", 1.0, 42, f0=330.0)
    a, b = generate_synthetic(spec, SR), generate_synthetic(spec, SR)
    assert a.samples.tobytes() == b.samples.tobytes()
    c = generate_synthetic(SyntheticSourceSpec("harmonic_tone", 1.0, 43, f0=330.0), SR)
    assert not np.array_equal(a.samples, c.samples)
    assert np.max(np.abs(a.samples)) == pytest.approx(0.9)


def test_synthetic_spec_errors():
    with pytest.raises(ValueError, match="Nyquist"):
        generate_synthetic(SyntheticSourceSpec("bandpass_noise", 1.0, band=(1000, 9000)), SR)
    with pytest.raises(ValueError, match="Nyquist"):
        generate_synthetic(SyntheticSourceSpec("harmonic_tone", 1.0, f0=1500.0), SR)
    with pytest.raises(ValueError):
        SyntheticSourceSpec("chirp", 1.0)
    with pytest.raises(ValueError):
        SyntheticSourceSpec("am_noise", 0.0)


def test_default_sources_cover_the_three_kinds():
    kinds = [spec.kind for _, spec in default_synthetic_sources(1.0)]
    assert kinds.count("bandpass_noise") == 3
    assert kinds.count("harmonic_tone") == 2
    assert kinds.count("am_noise") == 1


def _noise(seconds, seed, sr=SR):
    return AudioSignal(np.random.default_rng(seed).standard_normal(int(seconds * sr)), sr)


def test_split_gives_330_test_frames():
    split = split_corpus(CorpusSpec([("a", [_noise(8.0, 0)]), ("b", [_noise(7.0, 1)])]))
    assert split.test["a"].shape == (330, 513)
    assert split.test["b"].shape == (330, 513)
    assert split.labels == ["a", "b"]
    assert split.meta.fft_size == 1024


@pytest.mark.parametrize("mode", ["tail_test", "head_test"])
def test_split_ranges_are_disjoint(mode):
    # two files per source so a training piece also ends at a file boundary
    spec = CorpusSpec([("a", [_noise(3.0, 0), _noise(4.0, 1)]), ("b", [_noise(6.5, 2)])],
                      test_seconds=5.0, split=mode)
    split = split_corpus(spec)
    for label in ("a", "b"):
        t0, t1 = split.test_ranges[label]
        assert t1 - t0 == 5 * SR
        total = 7 * SR if label == "a" else int(6.5 * SR)
        assert (t0 == 0) if mode == "head_test" else (t1 == total)
        for a, b in split.train_ranges[label]:
            assert b <= t0 or a >= t1
            if label == "a":
                assert b <= 3 * SR or a >= 3 * SR  # no frame crosses the file boundary
        n_train = sum((b - a - 960) // 240 + 1 for a, b in split.train_ranges[label])
        assert split.train[label].shape[0] == n_train


def test_split_errors(tmp_path):
    with pytest.raises(ValueError, match="source too short"):
        split_corpus(CorpusSpec([("a", [_noise(5.0, 0)])]))
    with pytest.raises(ValueError, match="inconsistent sample rates"):
        split_corpus(CorpusSpec([("a", [_noise(6.0, 0)]), ("b", [_noise(6.0, 1, 8000)])]))
    missing = tmp_path / "nope.wav"
    with pytest.raises(FileNotFoundError, match="nope.wav"):
        split_corpus(CorpusSpec([("a", [missing])]))
    with pytest.raises(ValueError, match="unique"):
        CorpusSpec([("a", []), ("a", [])])


def test_split_reads_wav_files(tmp_path):
    path = tmp_path / "x.wav"
    write_wav(path, _noise(6.0, 3), dtype="float32")
    split = split_corpus(CorpusSpec([("x", [str(path)])], test_seconds=1.0))
    assert split.test["x"].shape[0] == 63


def test_window_accuracy_matches_brute_force():
    rng = np.random.default_rng(0)
    stream = rng.normal(size=(15, 3))
    stream[:, 1] += 0.4
    acc = _window_accuracy(stream, 1, 20)
    for P in range(1, 21):
        if P > 15:
            assert np.isnan(acc[P - 1])
            continue
        hits = [int(np.argmax(stream[s:s + P].sum(axis=0)) == 1) for s in range(15 - P + 1)]
        assert acc[P - 1] == pytest.approx(100.0 * sum(hits) / len(hits))


def test_resubstitution_is_perfect(small_dictionary):
    test = {d.label: d.atoms.T[::2] for d in small_dictionary}
    report = evaluate(small_dictionary, test, max_window=5)
    assert report.overall_accuracy("sdr") == 100.0
    assert report.per_source_accuracy("sdr") == [100.0] * 3


def test_single_source_is_perfect(small_sources):
    F = features_of(small_sources["tone"])
    d = learn_dictionary(F[:100], [], LearnConfig(n_atoms=10), "tone", meta_for())
    report = evaluate(concat([d]), {"tone": F[100:130]})
    for m in MEASURES:
        assert report.overall_accuracy(m) == 100.0
    assert report.min_window() == [1]


def test_report_invariants_and_round_trip(small_dictionary, small_sources, tmp_path):
    test = {label: features_of(sig)[::10] for label, sig in small_sources.items()}
    test["low"] = np.vstack([np.zeros((2, 513)), test["low"]])  # silent rows are skipped
    report = evaluate(small_dictionary, test, max_window=4)
    assert report.silent_frames == [2, 0, 0]
    counts = [test[k].shape[0] for k in small_dictionary.labels]
    counts[0] -= 2
    for m in MEASURES:
        assert report.confusion[m].sum(axis=1).tolist() == counts
        per = report.per_source_accuracy(m)
        weighted = sum(p * c for p, c in zip(per, counts)) / sum(counts)
        assert report.overall_accuracy(m) == pytest.approx(weighted)
    assert report.masdr_accuracy.shape == (3, 4)

    back = EvalReport.from_json(report.to_json())
    assert back == report
    assert json.loads(report.to_json())["labels"] == ["low", "high", "tone"]

    paths = report.write(tmp_path / "out", prefix="x_")
    names = sorted(p.split("/")[-1] for p in paths)
    assert names == sorted(["x_report.txt", "x_report.json", "x_summary.csv", "x_masdr.csv",
                            "x_confusion_sdr.csv", "x_confusion_nnz.csv", "x_confusion_sw.csv"])
    header = (tmp_path / "out" / "x_summary.csv").read_text().splitlines()[0]
    assert header == "source,sdr_accuracy,nnz_accuracy,sw_accuracy,frames,min_window"
    assert "SDR" in report.table()


def test_evaluate_errors(small_dictionary):
    with pytest.raises(ValueError, match="meta mismatch"):
        evaluate(small_dictionary, {"low": np.ones((3, 100))})
    with pytest.raises(ValueError, match="no dictionary"):
        evaluate(small_dictionary, {"other": np.ones((3, 513))})
    with pytest.raises(ValueError, match="empty"):
        evaluate(small_dictionary, {"low": np.ones((0, 513))})


def test_sweep_grid():
    framing = FramingConfig()
    specs = [("lo", SyntheticSourceSpec("bandpass_noise", 2.0, 1, band=(300.0, 800.0))),
             ("hi", SyntheticSourceSpec("bandpass_noise", 2.0, 2, band=(4000.0, 6000.0)))]
    spec = CorpusSpec([(k, [generate_synthetic(s, SR)]) for k, s in specs], test_seconds=0.3)
    split = split_corpus(spec, framing)
    reports = sweep(split, n_atoms=10, max_window=3)
    assert [(r.intra_threshold, r.inter_threshold) for r in reports] == [
        (0.95, 0.95), (0.95, 1.0), (1.0, 0.95), (1.0, 1.0)]
    assert len(sweep_table(reports).splitlines()) == 5
    assert len(sweep_csv(reports).splitlines()) == 5
