"""Audio source classification with cosine-thresholded spectral dictionaries.

Dictionaries of unit-norm magnitude spectra are learned per source, frames
are coded with non-negative weights under the generalized KL divergence, and
the source is picked by reconstruction SDR, non-zero count or weight sum.
"""

from .classify import (
    MEASURES,
    DictionaryClassifier,
    FrameScores,
    StreamState,
    score_frame,
    score_frame_concat,
    score_frame_sdr,
    sdr,
)
from .corpus import (
    CorpusSpec,
    CorpusSplit,
    EvalReport,
    SyntheticSourceSpec,
    default_synthetic_sources,
    evaluate,
    generate_synthetic,
    learn_all,
    split_corpus,
    sweep,
)
from .dictlearn import (
    ConcatDictionary,
    CosineDictionaryLearner,
    DictionaryFormatError,
    DictionaryMeta,
    LearnConfig,
    SourceDictionary,
    concat,
    cosine_similarity,
    learn_dictionary,
    load_dictionary,
    save_dictionary,
)
from .features import (
    AudioSignal,
    FramingConfig,
    SpectralFeatures,
    frame_signal,
    normalize,
    read_wav,
    write_wav,
)
from .solver import SolveReport, SolverConfig, kkt_residual, kl_divergence, solve_weights

__version__ = "0.1.0"
