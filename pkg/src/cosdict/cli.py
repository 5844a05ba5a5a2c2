"""Command-line entry point: ``cosdict {train,classify,eval,synth}``.

Configuration is a flat ``key=value`` file with section prefixes::

    framing.frame_ms = 60
    framing.hop_ms = 15
    learning.n_atoms = 100
    solver.kkt_tol = 1e-6
    stream.window = 6
    corpus.test_seconds = 5
    corpus.split = tail_test
    source.factory = factory1.wav, factory2.wav

Blank lines and lines starting with ``#`` are ignored. Relative audio paths
are resolved against the directory holding the config file. Sources keep
the order in which they appear, which is also the dictionary order.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .classify import MEASURES, StreamState, score_frame
from .corpus import (
    DEFAULT_SWEEP,
    CorpusSpec,
    default_synthetic_sources,
    evaluate,
    generate_synthetic,
    learn_all,
    split_corpus,
    sweep_csv,
    sweep_table,
)
from .dictlearn import DictionaryMeta, LearnConfig, load_dictionary, save_dictionary
from .features import FramingConfig, frame_signal, normalize_rows, read_wav, write_wav
from .solver import SolverConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
NONCONVERGED_LIMIT = 0.01


class ConfigError(ValueError):
    """Malformed or invalid configuration file."""


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    framing: FramingConfig = field(default_factory=FramingConfig)
    learning: LearnConfig = field(default_factory=LearnConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    window: int = 6
    test_seconds: float = 5.0
    split: str = "tail_test"
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if int(self.window) < 1:
            raise ConfigError(f"stream.window must be >= 1, got {self.window}")


def _fft_size(text):
    return text if text == "auto" else int(text)


# key -> (section, field, converter); section None means a RunConfig field
_KEYS = {
    "framing.frame_ms": ("framing", "frame_ms", float),
    "framing.hop_ms": ("framing", "hop_ms", float),
    "framing.window": ("framing", "window", str),
    "framing.fft_size": ("framing", "fft_size", _fft_size),
    "learning.intra_threshold": ("learning", "intra_threshold", float),
    "learning.inter_threshold": ("learning", "inter_threshold", float),
    "learning.n_atoms": ("learning", "n_atoms", int),
    "learning.seed": ("learning", "seed", int),
    "solver.kkt_tol": ("solver", "kkt_tol", float),
    "solver.max_iters": ("solver", "max_iters", int),
    "solver.y_floor": ("solver", "y_floor", float),
    "stream.window": (None, "window", int),
    "corpus.test_seconds": (None, "test_seconds", float),
    "corpus.split": (None, "split", str),
}


def parse_config(text, base_dir="."):
    """Parse config text into a :class:`RunConfig`. Raises :class:`ConfigError`."""
    sections = {"framing": {}, "learning": {}, "solver": {}}
    top = {}
    sources = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key.startswith("source."):
            label = key[len("source."):]
            paths = [p.strip() for p in value.split(",") if p.strip()]
            if not label or not paths:
                raise ConfigError(f"line {lineno}: source needs a label and at least one path")
            sources.append((label, [os.path.join(base_dir, p) for p in paths]))
            continue
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, conv = _KEYS[key]
        try:
            converted = conv(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        (sections[section] if section else top)[name] = converted
    try:
        return RunConfig(
            framing=FramingConfig(**sections["framing"]),
            learning=LearnConfig(**sections["learning"]),
            solver=SolverConfig(**sections["solver"]),
            sources=sources,
            **top,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def _meta_for(cfg, sample_rate):
    return DictionaryMeta(
        sample_rate=sample_rate,
        fft_size=cfg.framing.n_fft(sample_rate),
        frame_ms=float(cfg.framing.frame_ms),
        hop_ms=float(cfg.framing.hop_ms),
    )


def _resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.learning = replace(cfg.learning, seed=args.seed)
    if getattr(args, "window", None) is not None:
        if args.window < 1:
            raise UsageError(f"--window must be >= 1, got {args.window}")
        cfg.window = args.window
    return cfg


def _check_nonconverged(count, total, out):
    if total and count / total > NONCONVERGED_LIMIT:
        print(f"error: solver did not converge on {count} of {total} frames", file=out)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_dict(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dictionary file not found: {path}")
    return load_dictionary(path)


def cmd_train(args, out=None):
    out = out or sys.stdout
    cfg = _resolve(args)
    if not cfg.sources:
        raise UsageError("config lists no sources (source.<label> = file.wav, ...)")
    if not args.dict:
        raise UsageError("train needs --dict PATH for the output dictionary")
    sample_rate = None
    train = {}
    for label, paths in cfg.sources:
        feats = []
        for path in paths:
            if not os.path.isfile(path):
                raise FileNotFoundError(f"audio file not found: {path}")
            sig = read_wav(path)
            if sample_rate is None:
                sample_rate = sig.sample_rate
            elif sig.sample_rate != sample_rate:
                raise ValueError(
                    f"inconsistent sample rates: {path} is {sig.sample_rate} Hz, "
                    f"expected {sample_rate} Hz"
                )
            F, silent = normalize_rows(frame_signal(sig, cfg.framing))
            feats.append(F[~silent])
        train[label] = np.vstack(feats)
    dictionary = learn_all(train, cfg.learning, _meta_for(cfg, sample_rate))
    save_dictionary(args.dict, dictionary)
    print("source,atoms,accepted,fallback", file=out)
    for d in dictionary:
        print(f"{d.label},{d.n_atoms},{d.n_accepted},{'yes' if d.used_fallback else 'no'}",
              file=out)
    print(f"total,{dictionary.atoms.shape[1]},,", file=out)
    return EXIT_OK


def cmd_classify(args, out=None):
    out = out or sys.stdout
    cfg = _resolve(args)
    if not args.dict:
        raise UsageError("classify needs --dict PATH")
    if not os.path.isfile(args.wav):
        raise FileNotFoundError(f"audio file not found: {args.wav}")
    dictionary = _load_dict(args.dict)
    signal = read_wav(args.wav)
    meta = dictionary.meta
    if signal.sample_rate != meta.sample_rate:
        raise ValueError(
            f"sample rate mismatch: {args.wav} is {signal.sample_rate} Hz, "
            f"dictionary expects {meta.sample_rate} Hz"
        )
    # framing comes from the dictionary, not the config
    framing = replace(cfg.framing, frame_ms=meta.frame_ms, hop_ms=meta.hop_ms,
                      fft_size=meta.fft_size)
    F = frame_signal(signal, framing)
    hop = framing.hop_length(signal.sample_rate)
    labels = dictionary.labels
    measure = args.measure
    state = StreamState(dictionary.n_sources, cfg.window)
    lines = ["frame,time_s,label,masdr_label"]
    nonconverged = 0
    for i, row in enumerate(F):
        s = score_frame(row, dictionary, cfg.solver, cascade=measure == "cascade")
        if s.silent:
            label = "unclassifiable"
        else:
            nonconverged += not s.converged
            state.update(s.sdr)
            label = labels[s.predicted[measure]]
        current = state.prediction()
        stream_label = "none" if current is None else labels[current]
        lines.append(f"{i},{i * hop / signal.sample_rate:.6f},{label},{stream_label}")
    verdict = state.prediction()
    lines.append(f"verdict,,{'none' if verdict is None else labels[verdict]},")
    text = "\n".join(lines) + "\n"
    out.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "classify.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return _check_nonconverged(nonconverged, state.q, sys.stderr)


def cmd_eval(args, out=None):
    out = out or sys.stdout
    cfg = _resolve(args)
    if not cfg.sources:
        raise UsageError("config lists no sources (source.<label> = file.wav, ...)")
    spec = CorpusSpec(cfg.sources, test_seconds=cfg.test_seconds, split=cfg.split)
    split = split_corpus(spec, cfg.framing)
    max_window = max(20, cfg.window)
    out_dir = args.out or "."
    if args.sweep:
        if args.dict:
            raise UsageError("--sweep learns its own dictionaries; drop --dict")
        reports = []
        for t_intra, t_inter in DEFAULT_SWEEP:
            learn_cfg = replace(cfg.learning, intra_threshold=t_intra, inter_threshold=t_inter)
            dictionary = learn_all(split.train, learn_cfg, split.meta)
            report = evaluate(dictionary, split.test, cfg.solver, max_window)
            report.write(out_dir, prefix=f"Ti{t_intra:.2f}_TI{t_inter:.2f}_")
            reports.append(report)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(sweep_csv(reports))
        table = sweep_table(reports)
        with open(os.path.join(out_dir, "sweep.txt"), "w", encoding="utf-8", newline="") as fh:
            fh.write(table)
        out.write(table)
        count = sum(r.nonconverged_frames for r in reports)
        total = sum(r.classified_frames for r in reports)
        return _check_nonconverged(count, total, sys.stderr)

    if args.dict:
        dictionary = _load_dict(args.dict)
        if dictionary.meta.sample_rate != split.sample_rate:
            raise ValueError(
                f"sample rate mismatch: corpus is {split.sample_rate} Hz, dictionary "
                f"expects {dictionary.meta.sample_rate} Hz"
            )
        if not dictionary.meta.compatible(split.meta):
            raise ValueError("meta mismatch: dictionary framing differs from the config")
    else:
        dictionary = learn_all(split.train, cfg.learning, split.meta)
    report = evaluate(dictionary, split.test, cfg.solver, max_window)
    report.write(out_dir)
    out.write(report.table())
    return _check_nonconverged(report.nonconverged_frames, report.classified_frames, sys.stderr)


def cmd_synth(args, out=None):
    out = out or sys.stdout
    if not args.out:
        raise UsageError("synth needs --out DIR")
    if not args.duration > 0:
        raise UsageError(f"--duration must be positive, got {args.duration}")
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    lines = [
        "# synthetic six-source corpus",
        "framing.frame_ms = 60",
        "framing.hop_ms = 15",
        "learning.intra_threshold = 0.95",
        "learning.inter_threshold = 0.95",
        "learning.n_atoms = 50",
        f"learning.seed = {seed}",
        "stream.window = 6",
        "corpus.test_seconds = 5",
        "corpus.split = tail_test",
    ]
    for label, spec in default_synthetic_sources(args.duration, seed):
        signal = generate_synthetic(spec, args.sample_rate)
        name = f"{label}.wav"
        write_wav(os.path.join(args.out, name), signal, dtype="float32")
        lines.append(f"source.{label} = {name}")
        print(f"wrote {name} ({signal.duration:.3f} s)", file=out)
    with open(os.path.join(args.out, "corpus.cfg"), "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    print("wrote corpus.cfg", file=out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="cosdict", description="Dictionary-based audio source classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key=value configuration file")
        p.add_argument("--seed", type=int, metavar="N", help="override learning.seed")
        p.add_argument("--window", type=int, metavar="P", help="override stream.window")

    p = sub.add_parser("train", help="learn dictionaries for every configured source")
    common(p)
    p.add_argument("--dict", metavar="PATH", help="output dictionary file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="label every frame of a WAV file")
    common(p)
    p.add_argument("--dict", metavar="PATH", help="dictionary file from 'train'")
    p.add_argument("--measure", choices=MEASURES + ("cascade",), default="sdr")
    p.add_argument("--out", metavar="DIR", help="also write classify.csv here")
    p.add_argument("wav")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="split, learn, evaluate and write reports")
    common(p)
    p.add_argument("--dict", metavar="PATH", help="evaluate this dictionary instead of learning")
    p.add_argument("--out", metavar="DIR", help="report directory (default: current)")
    p.add_argument("--sweep", action="store_true",
                   help="evaluate every (intra, inter) threshold pair in {0.95, 1.0}^2")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic six-source corpus and its config")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--duration", type=float, default=65.0, help="seconds per source")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cosdict: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"cosdict: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
