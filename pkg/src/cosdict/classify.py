"""Frame- and stream-level source classification from learned dictionaries.

Three per-frame measures pick the source:

* ``sdr``: each source dictionary reconstructs the frame on its own; the
  source with the highest signal-to-distortion ratio wins.
* ``nnz``: one solve against the concatenated dictionary; the source owning
  the most non-zero weights wins.
* ``sw``: same solve; the source with the largest sum of weights wins.

Streams are classified with the moving sum of per-frame SDR vectors over the
last ``window`` non-silent frames.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dictlearn import (
    ConcatDictionary,
    CosineDictionaryLearner,
    SourceDictionary,
    concat,
)
from .features import SILENCE_EPSILON, normalize
from .solver import SolverConfig, solve_weights

__all__ = [
    "SDR_CAP_DB",
    "NNZ_RELATIVE_THRESHOLD",
    "MEASURES",
    "FrameScores",
    "StreamState",
    "sdr",
    "score_frame_sdr",
    "score_frame_concat",
    "score_frame",
    "update_stream",
    "DictionaryClassifier",
]

SDR_CAP_DB = 300.0
NNZ_RELATIVE_THRESHOLD = 1e-8
MEASURES = ("sdr", "nnz", "sw")
CASCADE_SHORTLIST = 3


def sdr(y, yhat):
    """Signal-to-distortion ratio ``20 log10(|y| / |y - yhat|)`` in dB, capped."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    ny = np.linalg.norm(y)
    if ny <= SILENCE_EPSILON:
        raise ValueError("silent frame: SDR is undefined")
    err = np.linalg.norm(y - yhat)
    if err < ny * 1e-15:
        return SDR_CAP_DB
    return float(min(20.0 * np.log10(ny / err), SDR_CAP_DB))


def _argmax(values):
    # np.argmax already returns the first (lowest-index) maximum
    return int(np.argmax(values))


def _dict_list(dicts):
    if isinstance(dicts, ConcatDictionary):
        return list(dicts.dicts)
    if isinstance(dicts, SourceDictionary):
        return [dicts]
    return list(dicts)


def score_frame_sdr(y, dicts, config=None, return_reports=False):
    """SDR of ``y`` against each source dictionary solved separately.

    Returns an array of M SDR values (dB); with ``return_reports`` also the
    list of solver reports.
    """
    dicts = _dict_list(dicts)
    if not dicts:
        raise ValueError("need at least one dictionary")
    y = np.asarray(y, dtype=np.float64)
    out = np.empty(len(dicts))
    reports = []
    for i, d in enumerate(dicts):
        x, rep = solve_weights(y, d.atoms, config)
        out[i] = sdr(y, d.atoms @ x)
        reports.append(rep)
    if return_reports:
        return out, reports
    return out


def _partition(x, D):
    nnz = np.zeros(D.n_sources, dtype=np.int64)
    sw = np.zeros(D.n_sources)
    peak = x.max(initial=0.0)
    if peak <= 0:
        return nnz, sw
    tau = NNZ_RELATIVE_THRESHOLD * peak
    for i in range(D.n_sources):
        xi = x[D.block(i)]
        nnz[i] = int(np.count_nonzero(xi > tau))
        sw[i] = float(xi.sum())
    return nnz, sw


def score_frame_concat(y, D, config=None, return_report=False):
    """NNZ and SW per source from one solve against the concatenated dictionary."""
    if not isinstance(D, ConcatDictionary):
        D = concat(_dict_list(D))
    x, rep = solve_weights(y, D.atoms, config)
    nnz, sw = _partition(x, D)
    if return_report:
        return nnz, sw, x, rep
    return nnz, sw


@dataclass
class FrameScores:
    """Measures of one frame. ``predicted`` maps measure name to source index."""

    sdr: np.ndarray
    nnz: np.ndarray
    sw: np.ndarray
    predicted: dict
    silent: bool = False
    converged: bool = True

    @classmethod
    def unclassifiable(cls, n_sources):
        return cls(
            sdr=np.full(n_sources, np.nan),
            nnz=np.zeros(n_sources, dtype=np.int64),
            sw=np.zeros(n_sources),
            predicted={},
            silent=True,
        )


def score_frame(y, D, config=None, cascade=False):
    """All measures for one frame; silent frames come back flagged."""
    if not isinstance(D, ConcatDictionary):
        D = concat(_dict_list(D))
    y, silent = normalize(y)
    if silent:
        return FrameScores.unclassifiable(D.n_sources)
    nnz, sw, _, rep = score_frame_concat(y, D, config, return_report=True)
    converged = rep.converged
    sdr_vec, reports = score_frame_sdr(y, D, config, return_reports=True)
    converged = converged and all(r.converged for r in reports)
    predicted = {"sdr": _argmax(sdr_vec), "nnz": _argmax(nnz), "sw": _argmax(sw)}
    if cascade:
        predicted["cascade"] = _cascade(sw, sdr_vec)
    return FrameScores(sdr_vec, nnz, sw, predicted, False, converged)


def _cascade(sw, sdr_vec):
    # shortlist by sum of weights (stable: ties keep the lower index), then SDR
    shortlist = np.argsort(-sw, kind="stable")[:CASCADE_SHORTLIST]
    shortlist = np.sort(shortlist)
    return int(shortlist[_argmax(sdr_vec[shortlist])])


class StreamState:
    """Accumulated and moving-window SDR for one input stream.

    Parameters
    ----------
    n_sources : int
    window : int
        Number of most recent frames summed by :attr:`masdr`. Before that
        many frames have arrived the sum runs over what is available.
    """

    def __init__(self, n_sources, window=6):
        if int(window) < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.n_sources = int(n_sources)
        self.window = int(window)
        self.buffer = deque(maxlen=self.window)
        self.asdr = np.zeros(self.n_sources)
        self.q = 0

    def update(self, sdr_vector):
        v = np.asarray(sdr_vector, dtype=np.float64)
        if v.shape != (self.n_sources,):
            raise ValueError(f"expected {self.n_sources} SDR values, got shape {v.shape}")
        self.buffer.append(v.copy())
        self.asdr = self.asdr + v
        self.q += 1
        return self

    @property
    def masdr(self):
        if not self.buffer:
            return np.zeros(self.n_sources)
        return np.sum(np.stack(list(self.buffer)), axis=0)

    @property
    def full(self):
        return self.q >= self.window

    def prediction(self):
        """Index of the source with the largest moving SDR sum, ``None`` before any frame."""
        if self.q == 0:
            return None
        return _argmax(self.masdr)

    def accumulated_prediction(self):
        if self.q == 0:
            return None
        return _argmax(self.asdr)


def update_stream(state, sdr_vector):
    return state.update(sdr_vector)


class DictionaryClassifier(ClassifierMixin, BaseEstimator):
    """Classify feature frames among sources with per-source dictionaries.

    ``fit`` learns the dictionaries with :class:`CosineDictionaryLearner`;
    :meth:`from_dictionary` wraps dictionaries learned or loaded elsewhere.

    Parameters
    ----------
    intra_threshold, inter_threshold : float, default=0.95
    n_atoms : int, default=100
    random_state : int, default=0
    measure : {'sdr', 'nnz', 'sw', 'cascade'}, default='sdr'
        Measure used by :meth:`predict`.
    window : int, default=6
        Moving-window length for :meth:`predict_stream`.
    kkt_tol : float, default=1e-6
    max_iters : int, default=500
    meta : DictionaryMeta or None, default=None
        Feature settings recorded in learned dictionaries.

    Attributes
    ----------
    classes_ : ndarray of source labels, in dictionary order
    dictionary_ : ConcatDictionary
    """

    def __init__(self, intra_threshold=0.95, inter_threshold=0.95, n_atoms=100,
                 random_state=0, measure="sdr", window=6, kkt_tol=1e-6, max_iters=500,
                 meta=None):
        self.intra_threshold = intra_threshold
        self.inter_threshold = inter_threshold
        self.n_atoms = n_atoms
        self.random_state = random_state
        self.measure = measure
        self.window = window
        self.kkt_tol = kkt_tol
        self.max_iters = max_iters
        self.meta = meta

    def fit(self, X, y):
        learner = CosineDictionaryLearner(
            intra_threshold=self.intra_threshold,
            inter_threshold=self.inter_threshold,
            n_atoms=self.n_atoms,
            random_state=self.random_state,
            meta=self.meta,
        ).fit(X, y)
        self.classes_ = learner.classes_
        self.dictionary_ = learner.dictionary_
        self.n_features_in_ = learner.n_features_in_
        return self

    @classmethod
    def from_dictionary(cls, dictionary, **params):
        if not isinstance(dictionary, ConcatDictionary):
            dictionary = concat(_dict_list(dictionary))
        meta = dictionary.meta
        clf = cls(
            intra_threshold=meta.intra_threshold,
            inter_threshold=meta.inter_threshold,
            n_atoms=dictionary.dicts[0].n_atoms,
            random_state=meta.seed,
            meta=meta,
            **params,
        )
        clf.dictionary_ = dictionary
        clf.classes_ = np.array(dictionary.labels)
        clf.n_features_in_ = dictionary.n_bins
        return clf

    @property
    def solver_config(self):
        return SolverConfig(kkt_tol=self.kkt_tol, max_iters=self.max_iters)

    def _validate(self, X):
        check_is_fitted(self, "dictionary_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.dictionary_.n_bins:
            raise ValueError(
                f"X has {X.shape[1]} bins, dictionaries expect {self.dictionary_.n_bins}"
            )
        return X

    def score_frames(self, X):
        """:class:`FrameScores` for every row of ``X``."""
        X = self._validate(X)
        cfg = self.solver_config
        cascade = self.measure == "cascade"
        return [score_frame(row, self.dictionary_, cfg, cascade=cascade) for row in X]

    def _labels(self, indices):
        out = np.empty(len(indices), dtype=object)
        for i, k in enumerate(indices):
            out[i] = None if k is None else self.classes_[k]
        return out

    def predict(self, X):
        """Per-frame source label under ``measure``; ``None`` for silent frames."""
        if self.measure not in MEASURES + ("cascade",):
            raise ValueError(f"unknown measure {self.measure!r}")
        scores = self.score_frames(X)
        return self._labels([None if s.silent else s.predicted[self.measure] for s in scores])

    def decision_function(self, X):
        """Per-frame SDR against every source dictionary (NaN for silent frames)."""
        X = self._validate(X)
        cfg = self.solver_config
        out = np.full((X.shape[0], self.dictionary_.n_sources), np.nan)
        for i, row in enumerate(X):
            y, silent = normalize(row)
            if not silent:
                out[i] = score_frame_sdr(y, self.dictionary_, cfg)
        return out

    def predict_stream(self, X):
        """Moving-window SDR label after each frame, treating ``X`` as one stream.

        Silent frames do not advance the window and repeat the previous label.
        """
        sdr_matrix = self.decision_function(X)
        state = StreamState(self.dictionary_.n_sources, self.window)
        labels = []
        for row in sdr_matrix:
            if not np.isnan(row).any():
                state.update(row)
            labels.append(state.prediction())
        return self._labels(labels)
