"""Frame-synchronous acoustic + articulatory feature streams.

A :class:`FeatureMatrix` is a ``(T, D)`` array plus a :class:`StreamLayout`
that names its column blocks. A segment with ``has_deltas`` occupies
``3 * width`` columns ordered ``[static | delta | delta-delta]``; segments are
laid out in declaration order.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, CorruptFileError, InvalidArgumentError

FRAME_SHIFT = 0.005
UNVOICED = -1.0e10

FMTX_MAGIC = b"FMTX"
FMTX_VERSION = 1

DELTA_WIN = (-0.5, 0.0, 0.5)
ACC_WIN = (1.0, -2.0, 1.0)


@dataclass(frozen=True)
class Segment:
    name: str
    width: int
    has_deltas: bool = False

    @property
    def total(self):
        return self.width * (3 if self.has_deltas else 1)


@dataclass(frozen=True)
class StreamLayout:
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate segment names in layout: {names}")
        for s in self.segments:
            if s.width < 1:
                raise InvalidArgumentError(f"segment {s.name} has width {s.width}")

    @property
    def total(self):
        return sum(s.total for s in self.segments)

    @property
    def names(self):
        return [s.name for s in self.segments]

    def __contains__(self, name):
        return name in self.names

    def segment(self, name):
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def offset(self, name):
        off = 0
        for s in self.segments:
            if s.name == name:
                return off
            off += s.total
        raise KeyError(name)

    def columns(self, name, block="all"):
        """Column slice of a segment; ``block`` is 'all', 'static', 'delta' or 'acc'."""
        s = self.segment(name)
        off = self.offset(name)
        if block == "all":
            return slice(off, off + s.total)
        k = {"static": 0, "delta": 1, "acc": 2}[block]
        if k and not s.has_deltas:
            raise InvalidArgumentError(f"segment {name} has no delta blocks")
        return slice(off + k * s.width, off + (k + 1) * s.width)

    def static_columns(self):
        """Indices of all static columns, in layout order."""
        idx = []
        for s in self.segments:
            off = self.offset(s.name)
            idx.extend(range(off, off + s.width))
        return np.array(idx, dtype=int)

    def static_layout(self):
        return StreamLayout(tuple(Segment(s.name, s.width, False) for s in self.segments))

    def with_deltas(self, names=None):
        return StreamLayout(tuple(
            Segment(s.name, s.width, (names is None or s.name in names) or s.has_deltas)
            for s in self.segments))

    def __add__(self, other):
        return StreamLayout(self.segments + other.segments)


def acoustic_layout(mgc=60, bap=5, lf0=1, deltas=True):
    """MGC / BAP / LF0 with dynamic features, plus a plain VUV bit (199 columns by default)."""
    return StreamLayout((
        Segment("mgc", mgc, deltas),
        Segment("bap", bap, deltas),
        Segment("lf0", lf0, deltas),
        Segment("vuv", 1, False),
    ))


def articulatory_layout(n_components, deltas=True):
    return StreamLayout((Segment("ultpca", n_components, deltas),))


@dataclass(eq=False)
class FeatureMatrix:
    layout: StreamLayout
    frames: np.ndarray
    frame_shift: float = FRAME_SHIFT

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2:
            self.frames = self.frames.reshape(len(self.frames), -1)
        if self.frames.shape[1] != self.layout.total:
            raise InvalidArgumentError(
                f"frame width {self.frames.shape[1]} does not match layout width {self.layout.total}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def stream(self, name, block="all"):
        return self.frames[:, self.layout.columns(name, block)]

    def statics(self):
        return FeatureMatrix(self.layout.static_layout(),
                             self.frames[:, self.layout.static_columns()], self.frame_shift)


# ---------------------------------------------------------------------------
# dynamic features

def _pad_edges(x):
    return np.concatenate([x[:1], x, x[-1:]], axis=0)


def delta(x):
    p = _pad_edges(x)
    return DELTA_WIN[0] * p[:-2] + DELTA_WIN[2] * p[2:]


def delta_delta(x):
    p = _pad_edges(x)
    return ACC_WIN[0] * p[:-2] + ACC_WIN[1] * p[1:-1] + ACC_WIN[2] * p[2:]


def append_deltas(stream):
    """Return ``[x | delta(x) | delta-delta(x)]`` with edge replication over time."""
    x = np.asarray(stream, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise InvalidArgumentError("cannot compute deltas of an empty stream")
    return np.concatenate([x, delta(x), delta_delta(x)], axis=1)


def expand_layout(fm):
    """Append delta blocks to every segment of a static FeatureMatrix except VUV."""
    segs, blocks = [], []
    for s in fm.layout.segments:
        x = fm.stream(s.name)
        if s.has_deltas or s.name == "vuv":
            segs.append(s)
            blocks.append(x)
        else:
            segs.append(Segment(s.name, s.width, True))
            blocks.append(append_deltas(x))
    return FeatureMatrix(StreamLayout(tuple(segs)), np.concatenate(blocks, axis=1), fm.frame_shift)


# ---------------------------------------------------------------------------
# resampling

def resampled_length(n, from_rate, to_rate):
    return int(math.floor((n - 1) * to_rate / from_rate + 1e-9)) + 1


def resample_stream(stream, from_rate, to_rate):
    """Linear interpolation of every column onto a new frame rate."""
    x = np.asarray(stream, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if from_rate <= 0 or to_rate <= 0:
        raise InvalidArgumentError("sample rates must be positive")
    n = x.shape[0]
    if n < 2:
        raise InvalidArgumentError(f"resampling needs at least 2 frames, got {n}")
    if from_rate == to_rate:
        return x.copy()[:, 0] if squeeze else x.copy()
    m = resampled_length(n, from_rate, to_rate)
    t = np.clip(np.arange(m) * (from_rate / to_rate), 0, n - 1)
    i0 = np.minimum(np.floor(t).astype(int), n - 2)
    f = (t - i0)[:, None]
    out = x[i0] + f * (x[i0 + 1] - x[i0])
    return out[:, 0] if squeeze else out


def fit_length(x, n):
    """Trim or edge-pad a stream to exactly ``n`` frames."""
    if len(x) >= n:
        return x[:n]
    pad = np.repeat(x[-1:], n - len(x), axis=0)
    return np.concatenate([x, pad], axis=0)


# ---------------------------------------------------------------------------
# normalisation

@dataclass(frozen=True, eq=False)
class NormStats:
    mode: str            # "minmax" or "meanvar"
    a: np.ndarray        # min or mean
    b: np.ndarray        # max or stddev
    lo: float = 0.01
    hi: float = 0.99

    @property
    def width(self):
        return self.a.shape[0]

    @property
    def constant(self):
        if self.mode == "minmax":
            return (self.b - self.a) < 1e-12
        return self.b < 1e-12

    def subset(self, columns):
        return NormStats(self.mode, self.a[columns], self.b[columns], self.lo, self.hi)

    def to_dict(self):
        return {"mode": self.mode, "a": self.a.tolist(), "b": self.b.tolist(),
                "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], np.array(d["a"], dtype=float), np.array(d["b"], dtype=float),
                   d.get("lo", 0.01), d.get("hi", 0.99))


def fit_norm(stream, mode="meanvar", lo=0.01, hi=0.99):
    x = np.asarray(stream, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise InvalidArgumentError("cannot fit normalisation on an empty stream")
    if mode == "minmax":
        return NormStats(mode, x.min(axis=0), x.max(axis=0), lo, hi)
    if mode == "meanvar":
        return NormStats(mode, x.mean(axis=0), x.std(axis=0), lo, hi)
    raise InvalidArgumentError(f"unknown normalisation mode {mode!r}")


def _check_width(stats, x):
    if x.shape[-1] != stats.width:
        raise InvalidArgumentError(
            f"stream width {x.shape[-1]} does not match normaliser width {stats.width}")


def apply_norm(stats, stream):
    x = np.asarray(stream, dtype=float)
    _check_width(stats, x)
    const = stats.constant
    if stats.mode == "minmax":
        span = np.where(const, 1.0, stats.b - stats.a)
        y = stats.lo + (x - stats.a) / span * (stats.hi - stats.lo)
        return np.where(const, 0.5 * (stats.lo + stats.hi), y)
    std = np.where(const, 1.0, stats.b)
    return np.where(const, 0.0, (x - stats.a) / std)


def invert_norm(stats, stream):
    y = np.asarray(stream, dtype=float)
    _check_width(stats, y)
    const = stats.constant
    if stats.mode == "minmax":
        span = np.where(const, 1.0, stats.b - stats.a)
        x = stats.a + (y - stats.lo) / (stats.hi - stats.lo) * span
        return np.where(const, stats.a, x)
    std = np.where(const, 1.0, stats.b)
    return np.where(const, stats.a, y * std + stats.a)


# ---------------------------------------------------------------------------
# target composition

def compose_target(acoustic, articulatory):
    if acoustic.n_frames != articulatory.n_frames:
        raise AlignmentError(acoustic.n_frames, articulatory.n_frames,
                             "acoustic/articulatory frame counts")
    if not math.isclose(acoustic.frame_shift, articulatory.frame_shift):
        raise AlignmentError(acoustic.frame_shift, articulatory.frame_shift, "frame shifts")
    return FeatureMatrix(acoustic.layout + articulatory.layout,
                         np.concatenate([acoustic.frames, articulatory.frames], axis=1),
                         acoustic.frame_shift)


def split_target(target, acoustic_names=("mgc", "bap", "lf0", "vuv")):
    """Inverse of :func:`compose_target`; segments named in ``acoustic_names`` go left."""
    left = [s for s in target.layout.segments if s.name in acoustic_names]
    right = [s for s in target.layout.segments if s.name not in acoustic_names]
    cols_l = [np.arange(target.layout.total)[target.layout.columns(s.name)] for s in left]
    cols_r = [np.arange(target.layout.total)[target.layout.columns(s.name)] for s in right]
    cl = np.concatenate(cols_l) if cols_l else np.zeros(0, int)
    cr = np.concatenate(cols_r) if cols_r else np.zeros(0, int)
    return (FeatureMatrix(StreamLayout(tuple(left)), target.frames[:, cl], target.frame_shift),
            FeatureMatrix(StreamLayout(tuple(right)), target.frames[:, cr], target.frame_shift))


# ---------------------------------------------------------------------------
# F0

def is_unvoiced(lf0):
    lf0 = np.asarray(lf0, dtype=float)
    return ~np.isfinite(lf0) | (lf0 <= UNVOICED / 10)


def interpolate_lf0(lf0):
    """Fill unvoiced gaps linearly; returns ``(continuous_lf0, vuv)``.

    Unvoiced frames carry :data:`UNVOICED` (or NaN). Leading and trailing gaps
    hold the nearest voiced value. An all-unvoiced input gives zeros.
    """
    x = np.asarray(lf0, dtype=float).reshape(-1)
    voiced = ~is_unvoiced(x)
    vuv = voiced.astype(float)
    if not voiced.any():
        return np.zeros_like(x), vuv
    t = np.arange(len(x))
    filled = np.interp(t, t[voiced], x[voiced])
    return filled, vuv


def restore_unvoiced(lf0, vuv, threshold=0.5):
    out = np.asarray(lf0, dtype=float).copy().reshape(-1)
    out[np.asarray(vuv).reshape(-1) < threshold] = UNVOICED
    return out


# ---------------------------------------------------------------------------
# FMTX files

def write_fmtx(path, fm):
    frames = np.ascontiguousarray(fm.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FMTX_MAGIC)
        f.write(struct.pack("<Hd", FMTX_VERSION, fm.frame_shift))
        f.write(struct.pack("<H", len(fm.layout.segments)))
        for s in fm.layout.segments:
            name = s.name.encode("utf-8")
            f.write(struct.pack("<B", len(name)) + name)
            f.write(struct.pack("<IB", s.width, int(s.has_deltas)))
        f.write(struct.pack("<I", frames.shape[0]))
        f.write(frames.tobytes())


def read_fmtx(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FMTX_MAGIC:
        raise CorruptFileError(f"{path}: not an FMTX feature file")
    try:
        version, shift = struct.unpack_from("<Hd", blob, 4)
        if version != FMTX_VERSION:
            raise CorruptFileError(f"{path}: unsupported FMTX version {version}")
        off = 14
        (n_seg,) = struct.unpack_from("<H", blob, off)
        off += 2
        segs = []
        for _ in range(n_seg):
            (ln,) = struct.unpack_from("<B", blob, off)
            name = blob[off + 1:off + 1 + ln].decode("utf-8")
            off += 1 + ln
            width, deltas = struct.unpack_from("<IB", blob, off)
            off += 5
            segs.append(Segment(name, width, bool(deltas)))
        (T,) = struct.unpack_from("<I", blob, off)
        off += 4
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated header") from exc
    layout = StreamLayout(tuple(segs))
    need = off + 4 * T * layout.total
    if len(blob) != need:
        raise CorruptFileError(f"{path}: expected {need} bytes, found {len(blob)}")
    frames = np.frombuffer(blob, "<f4", T * layout.total, off).reshape(T, layout.total)
    return FeatureMatrix(layout, frames.astype(float), shift)
