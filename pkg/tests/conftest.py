import numpy as np
import pytest

from cosdict.corpus import SyntheticSourceSpec, generate_synthetic, learn_all
from cosdict.dictlearn import DictionaryMeta, LearnConfig
from cosdict.features import FramingConfig, frame_signal, normalize_rows

SR = 16000

_acceptance_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_acceptance_key] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, text in sorted(lines):
        terminalreporter.write_line(text)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion (``ok=None`` for SKIP); printed after the run."""
    store = request.config.stash[_acceptance_key]

    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        text = f"criterion {number}: {status}  {detail}"
        store.append((number, text))
        print(text)
        return ok

    return record


def random_dictionary(rng, p, k):
    D = rng.uniform(0.0, 1.0, (p, k))
    return D / np.linalg.norm(D, axis=0)


def features_of(signal, framing=None):
    F, silent = normalize_rows(frame_signal(signal, framing or FramingConfig()))
    return F[~silent]


def meta_for(framing=None, sample_rate=SR):
    framing = framing or FramingConfig()
    return DictionaryMeta(
        sample_rate=sample_rate,
        fft_size=framing.n_fft(sample_rate),
        frame_ms=float(framing.frame_ms),
        hop_ms=float(framing.hop_ms),
    )


@pytest.fixture(scope="session")
def small_sources():
    """Three short synthetic sources with well separated spectra."""
    specs = {
        "low": SyntheticSourceSpec("bandpass_noise", 3.0, 1, band=(300.0, 800.0)),
        "high": SyntheticSourceSpec("bandpass_noise", 3.0, 2, band=(4000.0, 6000.0)),
        "tone": SyntheticSourceSpec("harmonic_tone", 3.0, 3, f0=220.0),
    }
    return {label: generate_synthetic(spec, SR) for label, spec in specs.items()}


@pytest.fixture(scope="session")
def small_dictionary(small_sources):
    train = {label: features_of(sig) for label, sig in small_sources.items()}
    return learn_all(train, LearnConfig(n_atoms=20, seed=0), meta_for())
