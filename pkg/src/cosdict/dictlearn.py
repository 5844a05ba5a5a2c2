"""Per-source dictionaries built by cosine-similarity-thresholded atom selection.

Atoms are drawn from a source's own (normalized) training frames in random
order. A candidate joins the dictionary when its cosine similarity to every
atom already in that dictionary is at most ``intra_threshold`` and its
similarity to every atom of the previously learned sources is at most
``inter_threshold``. If too few candidates pass, the dictionary is topped up
with the rejected frames in order of increasing maximum similarity to the
accepted atoms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .features import SILENCE_EPSILON
from .solver import solve_weights

__all__ = [
    "LearnConfig",
    "DictionaryMeta",
    "SourceDictionary",
    "ConcatDictionary",
    "DictionaryFormatError",
    "cosine_similarity",
    "learn_dictionary",
    "concat",
    "save_dictionary",
    "load_dictionary",
    "CosineDictionaryLearner",
]

MAGIC = b"SDCT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIddddIIQ")


@dataclass(frozen=True)
class LearnConfig:
    intra_threshold: float = 0.95
    inter_threshold: float = 0.95
    n_atoms: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("intra_threshold", "inter_threshold"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if int(self.n_atoms) < 1:
            raise ValueError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if int(self.seed) < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")


@dataclass(frozen=True)
class DictionaryMeta:
    """Feature and learning settings a dictionary was built with."""

    sample_rate: int = 0
    fft_size: int = 0
    frame_ms: float = 0.0
    hop_ms: float = 0.0
    intra_threshold: float = 0.95
    inter_threshold: float = 0.95
    n_atoms: int = 100
    seed: int = 0

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    def compatible(self, other):
        return (self.sample_rate, self.fft_size, self.frame_ms, self.hop_ms) == (
            other.sample_rate, other.fft_size, other.frame_ms, other.hop_ms,
        )


@dataclass(frozen=True, eq=False)
class SourceDictionary:
    """Unit-norm, non-negative atoms of one source, one atom per column.

    ``n_accepted`` counts the leading columns that passed both similarity
    thresholds; the rest were appended as fallback. It is not stored on disk
    and is ``None`` for loaded dictionaries.
    """

    label: str
    atoms: np.ndarray
    meta: DictionaryMeta = field(default_factory=DictionaryMeta)
    n_accepted: int | None = None

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise ValueError(f"atoms must be 2-D (n_bins, n_atoms), got shape {atoms.shape}")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def n_atoms(self):
        return self.atoms.shape[1]

    @property
    def n_bins(self):
        return self.atoms.shape[0]

    @property
    def used_fallback(self):
        return self.n_accepted is not None and self.n_accepted < self.n_atoms

    def __eq__(self, other):
        if not isinstance(other, SourceDictionary):
            return NotImplemented
        return (
            self.label == other.label
            and self.meta == other.meta
            and self.atoms.shape == other.atoms.shape
            and self.atoms.tobytes() == other.atoms.tobytes()
        )


class ConcatDictionary:
    """Column-wise concatenation ``[D_1 ... D_M]`` of source dictionaries."""

    def __init__(self, dicts):
        self.dicts = tuple(dicts)
        sizes = [d.n_atoms for d in self.dicts]
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
        self.atoms = np.hstack([d.atoms for d in self.dicts])
        self.atoms.setflags(write=False)

    @property
    def labels(self):
        return [d.label for d in self.dicts]

    @property
    def meta(self):
        return self.dicts[0].meta

    @property
    def n_sources(self):
        return len(self.dicts)

    @property
    def n_bins(self):
        return self.atoms.shape[0]

    def block(self, i):
        """Column slice of source ``i`` inside :attr:`atoms`."""
        start = self.offsets[i]
        return slice(start, start + self.dicts[i].n_atoms)

    def source_index(self):
        """Source index of every column."""
        return np.repeat(np.arange(self.n_sources), [d.n_atoms for d in self.dicts])

    def __len__(self):
        return self.n_sources

    def __iter__(self):
        return iter(self.dicts)

    def __getitem__(self, i):
        return self.dicts[i]

    def __eq__(self, other):
        if not isinstance(other, ConcatDictionary):
            return NotImplemented
        return self.dicts == other.dicts

    def __repr__(self):
        return f"ConcatDictionary(labels={self.labels}, n_atoms={self.atoms.shape[1]})"


class DictionaryFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def cosine_similarity(a, b):
    """``a.b / (|a| |b|)``; raises on zero-norm input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("degenerate vector: cosine similarity needs non-zero norms")
    return float(a @ b / (na * nb))


def _prepare_features(features):
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"features must be 2-D (n_frames, n_bins), got shape {F.shape}")
    if np.any(F < 0) or not np.all(np.isfinite(F)):
        raise ValueError("features must be finite and non-negative")
    norms = np.linalg.norm(F, axis=1)
    if np.any(norms <= SILENCE_EPSILON):
        raise ValueError("features contain silent frames; drop them before learning")
    return F / norms[:, None]


def learn_dictionary(features, prior=(), config=None, label="source", meta=None):
    """Learn one source dictionary.

    Parameters
    ----------
    features : array-like of shape (n_frames, n_bins)
        Non-silent magnitude spectra of this source (normalized internally).
    prior : sequence of SourceDictionary
        Dictionaries of the sources learned before this one; candidates are
        checked against all of their atoms with ``inter_threshold``.
    config : LearnConfig
    label : str
    meta : DictionaryMeta, optional
        Feature settings to record. Defaults to the meta of ``prior`` (or a
        bare meta when there is none); learning settings are always taken
        from ``config``.

    Returns
    -------
    SourceDictionary
        ``config.n_atoms`` columns: threshold-accepted atoms in acceptance
        order, then fallback atoms.
    """
    cfg = config or LearnConfig()
    prior = list(prior)
    F = _prepare_features(features)
    n_frames = F.shape[0]
    n_atoms = int(cfg.n_atoms)

    if prior:
        base = prior[0].meta
        for d in prior[1:]:
            if not d.meta.compatible(base):
                raise ValueError("prior dictionaries have mismatched meta")
        if meta is not None and not meta.compatible(base):
            raise ValueError("meta mismatch between new dictionary and prior dictionaries")
        for d in prior:
            if d.n_bins != F.shape[1]:
                raise ValueError(
                    f"meta mismatch: features have {F.shape[1]} bins, prior dictionary "
                    f"{d.label!r} has {d.n_bins}"
                )
        meta = meta or base
    meta = replace(
        meta or DictionaryMeta(),
        intra_threshold=float(cfg.intra_threshold),
        inter_threshold=float(cfg.inter_threshold),
        n_atoms=n_atoms,
        seed=int(cfg.seed),
    )
    if meta.fft_size and meta.n_bins != F.shape[1]:
        raise ValueError(f"meta mismatch: fft_size {meta.fft_size} implies {meta.n_bins} bins, "
                         f"features have {F.shape[1]}")

    if n_frames < n_atoms:
        raise ValueError(
            f"insufficient training data: {n_frames} frames for {n_atoms} atoms ({label!r})"
        )

    rng = np.random.default_rng([int(cfg.seed), len(prior)])
    order = rng.permutation(n_frames)

    if prior:
        P = np.hstack([d.atoms for d in prior])
        P = P / np.linalg.norm(P, axis=0)
        inter_ok = (F @ P).max(axis=1) <= cfg.inter_threshold
    else:
        inter_ok = np.ones(n_frames, dtype=bool)

    chosen = np.empty((n_atoms, F.shape[1]))
    accepted = []
    for t in order:
        if not inter_ok[t]:
            continue
        n = len(accepted)
        if n and (chosen[:n] @ F[t]).max() > cfg.intra_threshold:
            continue
        chosen[n] = F[t]
        accepted.append(t)
        if len(accepted) == n_atoms:
            break

    columns = list(accepted)
    n_accepted = len(accepted)
    if n_accepted < n_atoms:
        rejected = np.setdiff1d(np.arange(n_frames), accepted)
        if n_accepted:
            key = (F[rejected] @ chosen[:n_accepted].T).max(axis=1)
        else:
            key = np.zeros(rejected.size)
        ranked = rejected[np.argsort(key, kind="stable")]
        columns.extend(ranked[: n_atoms - n_accepted].tolist())

    return SourceDictionary(label, F[columns].T.copy(), meta, n_accepted)


def concat(dicts):
    dicts = list(dicts)
    if not dicts:
        raise ValueError("concat needs at least one dictionary")
    base = dicts[0]
    for d in dicts[1:]:
        if not d.meta.compatible(base.meta) or d.n_bins != base.n_bins:
            raise ValueError(f"meta mismatch between {base.label!r} and {d.label!r}")
    return ConcatDictionary(dicts)


def _as_concat(dictionary):
    if isinstance(dictionary, ConcatDictionary):
        return dictionary
    if isinstance(dictionary, SourceDictionary):
        return concat([dictionary])
    return concat(dictionary)


def save_dictionary(path, dictionary):
    """Write dictionaries to the little-endian ``SDCT`` binary format."""
    cd = _as_concat(dictionary)
    meta = cd.meta
    n_atoms = cd.dicts[0].n_atoms
    if any(d.n_atoms != n_atoms for d in cd.dicts):
        raise ValueError("all dictionaries must have the same number of atoms to be saved")
    if meta.fft_size <= 0 or meta.n_bins != cd.n_bins:
        raise ValueError("dictionary meta must record the fft_size matching its atoms")
    parts = [_HEADER.pack(
        MAGIC, FORMAT_VERSION, meta.sample_rate, meta.fft_size, meta.frame_ms, meta.hop_ms,
        meta.intra_threshold, meta.inter_threshold, n_atoms, cd.n_sources, meta.seed,
    )]
    for d in cd.dicts:
        label = d.label.encode("utf-8")
        parts.append(struct.pack("<H", len(label)))
        parts.append(label)
        # column-major block == row-major bytes of the transpose
        parts.append(np.ascontiguousarray(d.atoms.T, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dictionary(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return _parse_dictionary(buf)


def _parse_dictionary(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DictionaryFormatError("not a dictionary file", 0)
    if len(buf) < _HEADER.size:
        raise DictionaryFormatError("truncated header", len(buf))
    (_, version, sr, fft_size, frame_ms, hop_ms, t_i, t_I,
     n_atoms, n_sources, seed) = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise DictionaryFormatError(f"unsupported version {version}", 4)
    meta = DictionaryMeta(sr, fft_size, frame_ms, hop_ms, t_i, t_I, n_atoms, seed)
    n_bins = fft_size // 2 + 1
    block = n_bins * n_atoms * 8
    pos = _HEADER.size
    dicts = []
    for _ in range(n_sources):
        if pos + 2 > len(buf):
            raise DictionaryFormatError("truncated label length", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise DictionaryFormatError("truncated label", pos)
        try:
            label = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DictionaryFormatError("label is not valid UTF-8", pos) from exc
        pos += n
        if pos + block > len(buf):
            raise DictionaryFormatError("truncated atom block", pos)
        atoms = np.frombuffer(buf, dtype="<f8", count=n_bins * n_atoms, offset=pos)
        atoms = atoms.reshape(n_atoms, n_bins).T.astype(np.float64)
        pos += block
        dicts.append(SourceDictionary(label, atoms, meta))
    if pos != len(buf):
        raise DictionaryFormatError("trailing bytes after last source", pos)
    if not dicts:
        raise DictionaryFormatError("file holds no sources", _HEADER.size)
    return ConcatDictionary(dicts)


class CosineDictionaryLearner(BaseEstimator):
    """Learn one dictionary per class from labelled feature frames.

    Parameters
    ----------
    intra_threshold : float, default=0.95
        Largest cosine similarity allowed between atoms of the same source.
    inter_threshold : float, default=0.95
        Largest cosine similarity allowed between a new atom and any atom of
        an earlier source.
    n_atoms : int, default=100
        Atoms per source.
    random_state : int, default=0
        Seed of the candidate order.
    meta : DictionaryMeta or None, default=None
        Feature settings recorded in the learned dictionaries.

    Attributes
    ----------
    classes_ : ndarray
        Source labels in learning order (order of first appearance in ``y``).
    dictionary_ : ConcatDictionary
    """

    def __init__(self, intra_threshold=0.95, inter_threshold=0.95, n_atoms=100,
                 random_state=0, meta=None):
        self.intra_threshold = intra_threshold
        self.inter_threshold = inter_threshold
        self.n_atoms = n_atoms
        self.random_state = random_state
        self.meta = meta

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} labels")
        cfg = LearnConfig(self.intra_threshold, self.inter_threshold, self.n_atoms,
                          self.random_state)
        _, first = np.unique(y, return_index=True)
        classes = y[np.sort(first)]
        keep = np.linalg.norm(X, axis=1) > SILENCE_EPSILON
        dicts = []
        for label in classes:
            dicts.append(learn_dictionary(X[keep & (y == label)], dicts, cfg, str(label),
                                          self.meta))
        self.classes_ = classes
        self.dictionary_ = concat(dicts)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Sparse codes of ``X`` against the concatenated dictionary."""
        check_is_fitted(self, "dictionary_")
        X = check_array(X, dtype=np.float64)
        codes = np.zeros((X.shape[0], self.dictionary_.atoms.shape[1]))
        for i, row in enumerate(X):
            if np.linalg.norm(row) > SILENCE_EPSILON:
                codes[i] = solve_weights(row, self.dictionary_)[0]
        return codes
