"""Synthetic activity-grammar streams, their Bayes ceilings, jitter, and feature I/O.

Stream layout (``fps`` frames per second)::

    ctx_0 | gap | ctx_1 | gap | act_1 | ctx_2 | gap | act_2 | ...

Each context segment shows one of ``K`` symbols (fixed embedding + noise) for
``L`` frames, each gap is ``G`` frames of pure noise, and action ``k`` has class
``table[ctx_{k-1}][ctx_k]``.  Gap frames therefore carry no label information on
their own; only the history determines the upcoming action.
"""

from __future__ import annotations

import csv
import io
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .numerics import ContractError, Rng

FEATURE_MAGIC = b"IAMF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIf")
ANNOTATION_HEADER = ["start_s", "stop_s", "action", "verb", "noun"]


class ParseError(ValueError):
    def __init__(self, message: str, offset: int = 0, path: str | None = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")


@dataclass(frozen=True)
class SegmentAnnotation:
    start_s: float
    stop_s: float
    action: int
    verb: int = -1
    noun: int = -1

    def __post_init__(self):
        if not (self.stop_s > self.start_s >= 0):
            raise ContractError(f"bad segment times [{self.start_s}, {self.stop_s})")


@dataclass
class FeatureFile:
    fps: float
    data: np.ndarray           # (T, F) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ContractError("feature payload must be (T, F)")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def F(self) -> int:
        return self.data.shape[1]

    def frame_times(self) -> np.ndarray:
        return np.arange(self.T) / self.fps


# -------------------------------------------------------------------- grammar

def additive_table(K: int, C: int) -> tuple[tuple[int, ...], ...]:
    """``table[a][b] = (a + b) mod C`` -- a Latin square when C == K."""
    return tuple(tuple((a + b) % C for b in range(K)) for a in range(K))


@dataclass(frozen=True)
class GrammarConfig:
    K: int = 4
    C: int | None = None
    L: int = 3
    G: int = 6
    action_frames: int | None = None
    sigma: float = 0.5
    F: int = 16
    T: int = 2000
    fps: float = 1.0
    table: tuple | None = None
    seed: int = 0
    embedding_seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ContractError("need at least 2 context symbols")
        if self.L < 1 or self.G < 1:
            raise ContractError("segment and gap lengths must be >= 1")
        if self.sigma < 0 or self.F < 1 or self.fps <= 0:
            raise ContractError("invalid noise, feature dim or fps")
        table = np.asarray(self.transition_table)
        if table.shape != (self.K, self.K) or table.min() < 0 or table.max() >= self.n_actions:
            raise ContractError("transition table must be K x K with ids < C")

    @property
    def n_actions(self) -> int:
        return self.C if self.C is not None else self.K

    @property
    def n_action_frames(self) -> int:
        return self.action_frames if self.action_frames is not None else self.L

    @property
    def transition_table(self) -> tuple:
        return self.table if self.table is not None else additive_table(self.K, self.n_actions)

    @property
    def cycle_frames(self) -> int:
        return self.L + self.G + self.n_action_frames

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Context and action embeddings; shared by every stream with this embedding_seed."""
        rng = Rng(self.embedding_seed)
        return rng.normal(size=(self.K, self.F)), rng.normal(size=(self.n_actions, self.F))


@dataclass(frozen=True)
class ContextSegment:
    start_frame: int
    symbol: int


def gen_stream(cfg: GrammarConfig, rng: np.random.Generator | None = None
               ) -> tuple[FeatureFile, list[SegmentAnnotation], list[ContextSegment]]:
    """Generate one stream; returns features, action annotations and the context schedule."""
    rng = rng if rng is not None else Rng(cfg.seed)
    prelude = cfg.L + cfg.G
    if cfg.T < prelude + cfg.cycle_frames:
        raise ContractError(
            f"T={cfg.T} is shorter than one full cycle ({prelude + cfg.cycle_frames} frames)")
    ctx_emb, act_emb = cfg.embeddings()
    table = cfg.transition_table
    T, A = cfg.T, cfg.n_action_frames

    means = np.zeros((T, cfg.F))
    annotations: list[SegmentAnnotation] = []
    contexts: list[ContextSegment] = []

    pos = 0
    prev = int(rng.integers(cfg.K))
    contexts.append(ContextSegment(pos, prev))
    means[pos:pos + cfg.L] = ctx_emb[prev]
    pos += prelude
    while pos + cfg.cycle_frames <= T:
        cur = int(rng.integers(cfg.K))
        contexts.append(ContextSegment(pos, cur))
        means[pos:pos + cfg.L] = ctx_emb[cur]
        start = pos + cfg.L + cfg.G
        action = int(table[prev][cur])
        means[start:start + A] = act_emb[action]
        annotations.append(SegmentAnnotation(start / cfg.fps, (start + A) / cfg.fps, action))
        prev = cur
        pos += cfg.cycle_frames
    data = means + cfg.sigma * rng.normal(size=means.shape)
    return FeatureFile(cfg.fps, data.astype(np.float32)), annotations, contexts


def bayes_oracle(cfg: GrammarConfig) -> tuple[float, float]:
    """Exact top-1 ceilings on gap frames: (memoryless, full-history).

    Context symbols are uniform and independent, so enumerating the K^2 ordered
    pairs gives the joint law of (history, action).  A gap frame is pure noise,
    so a memoryless predictor can do no better than the action marginal's mode.
    """
    if cfg.K > 8:
        raise ContractError("oracle enumeration limited to K <= 8")
    table = cfg.transition_table
    # integer counts keep the ceilings exact fractions until the final division
    joint = np.zeros((cfg.K * cfg.K, cfg.n_actions), dtype=np.int64)
    for i, (a, b) in enumerate(itertools.product(range(cfg.K), repeat=2)):
        joint[i, table[a][b]] += 1
    total = cfg.K ** 2
    memoryless = int(joint.sum(axis=0).max()) / total
    history = int(joint.max(axis=1).sum()) / total
    return memoryless, history


# --------------------------------------------------------------------- jitter

def jitter_indices(base_indices: Sequence[int], F_device: int, F_train: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Shift every index but the first back by a uniform integer in [-(F_device - F_train), 0]."""
    base = np.asarray(base_indices, dtype=np.int64)
    if F_train < 1 or F_device < F_train:
        raise ContractError("need F_device >= F_train >= 1")
    width = F_device - F_train
    if base.size == 0 or width == 0:
        return base.copy()
    if base.size > 1:
        gaps = np.diff(base)
        if gaps.min() <= width:
            raise ContractError(
                f"index spacing {gaps.min()} too small for jitter width {width}")
    out = base.copy()
    out[1:] += rng.integers(-width, 1, size=base.size - 1)
    return out


# ------------------------------------------------------------------ file I/O

def write_feature_file(path: str | Path, ff: FeatureFile) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, ff.F, ff.T, ff.fps))
        fh.write(ff.data.astype("<f4").tobytes())


def _parse_header(raw: bytes, path: str | None) -> tuple[int, int, float]:
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}", 0, path)
    if len(raw) < _HEADER.size:
        raise ParseError(f"truncated header: expected {_HEADER.size} bytes, "
                         f"got {len(raw)}", len(raw), path)
    _, version, F, T, fps = _HEADER.unpack(raw[:_HEADER.size])
    if version != FEATURE_VERSION:
        raise ParseError(f"unsupported version {version}", 4, path)
    if F == 0 or not fps > 0:
        raise ParseError(f"invalid header F={F} fps={fps}", 8, path)
    return F, T, fps


def read_feature_file(path: str | Path) -> FeatureFile:
    raw = Path(path).read_bytes()
    F, T, fps = _parse_header(raw, str(path))
    expected = _HEADER.size + 4 * F * T
    if len(raw) != expected:
        raise ParseError(f"payload size mismatch: expected {expected} bytes, "
                         f"got {len(raw)}", min(len(raw), expected), str(path))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, F)
    return FeatureFile(fps, data.astype(np.float32))


def iter_feature_frames(stream: BinaryIO) -> tuple[int, int, float, Iterator[np.ndarray]]:
    """Parse the header then lazily yield one frame at a time from a byte stream."""
    raw = _read_exact(stream, _HEADER.size)
    F, T, fps = _parse_header(raw, None)

    def frames():
        nbytes = 4 * F
        for t in range(T):
            chunk = _read_exact(stream, nbytes)
            if len(chunk) != nbytes:
                offset = _HEADER.size + t * nbytes + len(chunk)
                raise ParseError(f"truncated payload at frame {t}: expected "
                                 f"{nbytes} bytes, got {len(chunk)}", offset)
            yield np.frombuffer(chunk, dtype="<f4").astype(np.float32)
    return F, T, fps, frames()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf.extend(chunk)
    return bytes(buf)


def write_annotations(path: str | Path, segments: Sequence[SegmentAnnotation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for s in segments:
            writer.writerow([repr(float(s.start_s)), repr(float(s.stop_s)),
                             s.action, s.verb, s.noun])


def read_annotations(path: str | Path) -> list[SegmentAnnotation]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ANNOTATION_HEADER:
        raise ParseError(f"annotation header must be {','.join(ANNOTATION_HEADER)}",
                         0, str(path))
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            start, stop, action, verb, noun = row
            out.append(SegmentAnnotation(float(start), float(stop), int(action),
                                         int(verb), int(noun)))
        except (ValueError, ContractError) as exc:
            raise ParseError(f"line {lineno}: {exc}", 0, str(path)) from exc
    return out


# -------------------------------------------------------------------- windows

def make_windows(features: FeatureFile, annotations: Sequence[SegmentAnnotation],
                 cfg, rng: np.random.Generator | None = None, jitter: bool | None = None):
    """One window per action segment, ending ``tau_a`` seconds before its start.

    Frames are sampled every ``fps / fps_train`` source frames.  Positions that
    fall before the stream start repeat frame 0 and are masked.  Labels follow
    the rolling rule at the nominal (unjittered) frame times; with jitter the
    features come from the jittered source indices.  Fully masked windows are
    dropped.
    """
    from .training import LabeledWindow, MASK, anticipation_labels

    jitter = cfg.jitter if jitter is None else jitter
    ratio = features.fps / cfg.fps_train
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ContractError(f"stream fps {features.fps} is not an integer multiple "
                            f"of fps_train {cfg.fps_train}")
    if jitter and rng is None:
        raise ContractError("jitter needs an rng")
    segments = sorted(annotations, key=lambda s: s.start_s)
    offsets = stride * np.arange(cfg.window_T - 1, -1, -1)
    windows = []
    for seg in segments:
        end_time = seg.start_s - cfg.tau_a
        end = int(round(end_time * features.fps))
        if end_time < -1e-9 or end >= features.T:
            continue
        nominal = end - offsets
        valid = nominal >= 0
        labels = np.full(cfg.window_T, MASK, dtype=np.int64)
        lab, _ = anticipation_labels(segments, nominal[valid] / features.fps, cfg.tau_a)
        labels[valid] = lab
        if not np.any(labels != MASK):
            continue
        src = nominal.copy()
        if jitter and valid.sum() > 1:
            src[valid] = jitter_indices(nominal[valid], int(round(features.fps)),
                                        int(round(cfg.fps_train)), rng)
        src = np.maximum(src, 0)
        windows.append(LabeledWindow(features.data[src], labels, labels != MASK, src))
    return windows
