"""Corpus I/O and a synthetic articulatory-acoustic corpus generator.

On-disk corpus layout::

    root/
      inventory.txt  lexicon.txt
      <speaker>/<utt>.ult     raw uint8 scanline frames, frame after frame
      <speaker>/<utt>.param   key=value: scanlines, samples, fps
      <speaker>/<utt>.lab     phone<TAB>frames (5 ms frames)
      <speaker>/<utt>.txt     prompt text
      <speaker>/<utt>.cmp     FMTX static acoustic features (mgc, bap, lf0)
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .codec import RAW_SHAPE, REDUCED_SHAPE, render_wedge, resize_bicubic, write_pgm
from .errors import ConfigError, CorruptFileError, DataError, InvalidArgumentError
from .features import (FRAME_SHIFT, UNVOICED, FeatureMatrix, Segment, StreamLayout,
                       read_fmtx, resample_stream, write_fmtx)
from .frontend import (load_inventory, read_durations, text_to_phones, write_durations,
                       write_inventory, write_lexicon)

log = logging.getLogger(__name__)

ULT_FPS = 81.5
EXP_DIMS = (1, 2, 4, 8, 16, 32, 64, 128)


@dataclass(eq=False)
class UtteranceRecord:
    utt_id: str
    text: str
    phones: tuple
    durations: np.ndarray          # frames at the acoustic frame shift
    ultrasound: np.ndarray         # (N, scanlines, samples) uint8
    acoustic: FeatureMatrix        # static mgc / bap / lf0
    ult_fps: float = ULT_FPS
    speaker: str = "spk"

    @property
    def n_frames(self):
        return int(np.sum(self.durations))


def static_acoustic_layout(mgc=60, bap=5):
    return StreamLayout((Segment("mgc", mgc), Segment("bap", bap), Segment("lf0", 1)))


# ---------------------------------------------------------------------------
# raw ultrasound files

def read_params(path):
    params = {}
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                params[key.strip()] = value.strip()
    except FileNotFoundError as exc:
        raise ConfigError(f"ultrasound parameter file not found: {path}") from exc
    try:
        return {"scanlines": int(params["scanlines"]), "samples": int(params["samples"]),
                "fps": float(params["fps"])}
    except KeyError as exc:
        raise ConfigError(f"{path}: missing parameter {exc.args[0]!r}") from exc


def write_params(path, scanlines, samples, fps):
    with open(path, "w") as f:
        f.write(f"scanlines={scanlines}\nsamples={samples}\nfps={fps!r}\n")


def import_raw_ultrasound(data_path, params_path):
    """Read consecutive uint8 scanline frames; returns ``(frames, fps)``."""
    p = read_params(params_path)
    frame_bytes = p["scanlines"] * p["samples"]
    with open(data_path, "rb") as f:
        blob = f.read()
    if len(blob) == 0:
        log.warning("%s is empty; no frames imported", data_path)
    if len(blob) % frame_bytes:
        raise CorruptFileError(
            f"{data_path}: {len(blob)} bytes is not a multiple of the "
            f"{frame_bytes}-byte frame size ({p['scanlines']}x{p['samples']})")
    frames = np.frombuffer(blob, np.uint8).reshape(-1, p["scanlines"], p["samples"])
    return frames, p["fps"]


def write_raw_ultrasound(data_path, params_path, frames, fps):
    frames = np.asarray(frames, dtype=np.uint8)
    with open(data_path, "wb") as f:
        f.write(np.ascontiguousarray(frames).tobytes())
    write_params(params_path, frames.shape[1], frames.shape[2], fps)


# ---------------------------------------------------------------------------
# corpus directories

def list_speakers(root):
    return sorted(d for d in os.listdir(root)
                  if os.path.isdir(os.path.join(root, d)) and not d.startswith("."))


def list_utterances(root, speaker):
    d = os.path.join(root, speaker)
    return sorted(f[:-4] for f in os.listdir(d) if f.endswith(".ult"))


def load_utterance(root, speaker, utt_id):
    base = os.path.join(root, speaker, utt_id)
    try:
        frames, fps = import_raw_ultrasound(base + ".ult", base + ".param")
        phones, durs = read_durations(base + ".lab")
        acoustic = read_fmtx(base + ".cmp")
    except FileNotFoundError as exc:
        raise DataError(f"utterance {speaker}/{utt_id}: missing file {exc.filename}") from exc
    text = ""
    if os.path.exists(base + ".txt"):
        with open(base + ".txt") as f:
            text = f.read().strip()
    return UtteranceRecord(utt_id, text, tuple(phones), durs, frames, acoustic, fps, speaker)


def save_utterance(root, rec):
    d = os.path.join(root, rec.speaker)
    os.makedirs(d, exist_ok=True)
    base = os.path.join(d, rec.utt_id)
    write_raw_ultrasound(base + ".ult", base + ".param", rec.ultrasound, rec.ult_fps)
    write_durations(base + ".lab", rec.phones, rec.durations)
    write_fmtx(base + ".cmp", rec.acoustic)
    with open(base + ".txt", "w") as f:
        f.write(rec.text + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass
class SynthCorpusConfig:
    seed: int = 0
    n_utterances: int = 200
    speaker: str = "spk01"
    inventory_path: str = None
    smoothing_width: int = 9
    noise_level: float = 0.05
    ult_fps: float = ULT_FPS
    raw_shape: tuple = RAW_SHAPE
    reduced_shape: tuple = REDUCED_SHAPE
    min_phones: int = 3
    max_phones: int = 12
    min_duration: int = 5
    max_duration: int = 30
    mgc_dim: int = 60
    bap_dim: int = 5
    vocabulary_size: int = 60
    archetypes: dict = field(default=None, repr=False)

    def validate(self):
        if self.noise_level < 0:
            raise InvalidArgumentError("noise_level must be >= 0")
        if self.smoothing_width < 1:
            raise InvalidArgumentError("smoothing_width must be >= 1")
        if not 3 <= self.min_phones <= self.max_phones:
            raise InvalidArgumentError("need 3 <= min_phones <= max_phones")
        if not 1 <= self.min_duration <= self.max_duration:
            raise InvalidArgumentError("need 1 <= min_duration <= max_duration")
        if self.n_utterances < 1:
            raise InvalidArgumentError("n_utterances must be >= 1")


def tongue_image(shape, base, amp, centre, width, tilt):
    """Smooth scanline-space image with a bright tongue-surface band.

    Rows are scanlines, columns echo samples; values lie in [0, 1].
    """
    n_lines, n_samp = shape
    i = np.arange(n_lines)[:, None] / (n_lines - 1)
    s = np.arange(n_samp)[None, :] / (n_samp - 1)
    depth = base + amp * np.exp(-0.5 * ((i - centre) / width) ** 2) + tilt * (i - 0.5)
    band = np.exp(-0.5 * ((s - depth) / 0.035) ** 2)
    below = 0.25 / (1.0 + np.exp(-(s - depth) / 0.02)) * np.exp(-np.clip(s - depth, 0, None) / 0.3)
    return np.clip(0.85 * band + below, 0.0, 1.0)


def make_archetypes(config, inventory):
    """Per-phone articulatory images and acoustic vectors for one speaker."""
    rng = np.random.default_rng([config.seed, 1])
    imgs, acs, lf0 = [], [], []
    dims = np.arange(config.mgc_dim)
    mgc_scale = 1.0 / (1.0 + dims / 4.0)
    for sym in inventory.symbols:
        fl = inventory.flags[sym]
        if sym == inventory.silence:
            params = (0.45, 0.0, 0.5, 0.3, 0.0)
        else:
            params = (rng.uniform(0.3, 0.6), rng.uniform(-0.25, 0.25), rng.uniform(0.2, 0.8),
                      rng.uniform(0.12, 0.3), rng.uniform(-0.15, 0.15))
        imgs.append(tongue_image(config.reduced_shape, *params))
        mgc = rng.normal(0.0, 1.0, config.mgc_dim) * mgc_scale
        if sym == inventory.silence:
            mgc[0] -= 3.0
        bap = rng.uniform(-3.0, 0.0, config.bap_dim)
        acs.append(np.concatenate([mgc, bap]))
        lf0.append(rng.uniform(4.6, 5.3) if "voiced" in fl else np.nan)
    return {"images": np.array(imgs), "acoustic": np.array(acs), "lf0": np.array(lf0)}


def make_vocabulary(config, inventory):
    rng = np.random.default_rng([config.seed, 2])
    phones = [s for s in inventory.symbols if s != inventory.silence]
    vocab = {}
    while len(vocab) < config.vocabulary_size:
        pron = tuple(str(p) for p in rng.choice(phones, size=rng.integers(1, 5)))
        word = "".join(p.lower() for p in pron) + "x" * (len(vocab) % 2)
        if word not in vocab and pron not in vocab.values():
            vocab[word] = pron
    return vocab


def _smooth(weights, width):
    if width <= 1:
        return weights
    return uniform_filter1d(weights, size=width, axis=0, mode="nearest")


def render_utterance(config, inventory, archetypes, phones, durations, rng):
    """Acoustic and ultrasound streams for a phone string with known durations."""
    idx = np.array([inventory.index(p) for p in phones])
    frame_phone = np.repeat(idx, durations)
    T = len(frame_phone)
    W = np.zeros((T, len(inventory)))
    W[np.arange(T), frame_phone] = 1.0
    W = _smooth(W, config.smoothing_width)

    ac = W @ archetypes["acoustic"]
    lf0_arch = archetypes["lf0"]
    voiced_mean = np.nanmean(lf0_arch) if np.any(np.isfinite(lf0_arch)) else 5.0
    lf0 = W @ np.where(np.isfinite(lf0_arch), lf0_arch, voiced_mean)
    if config.noise_level > 0:
        ac = ac + rng.normal(0.0, config.noise_level, ac.shape)
        lf0 = lf0 + rng.normal(0.0, config.noise_level, lf0.shape)
    lf0[~np.isfinite(lf0_arch[frame_phone])] = UNVOICED
    acoustic = FeatureMatrix(static_acoustic_layout(config.mgc_dim, config.bap_dim),
                             np.column_stack([ac, lf0]), FRAME_SHIFT)

    Wn = resample_stream(W, 1.0 / FRAME_SHIFT, config.ult_fps)
    h, w = config.reduced_shape
    reduced = (Wn @ archetypes["images"].reshape(len(inventory), -1)).reshape(-1, h, w)
    raw = resize_bicubic(reduced, *config.raw_shape)
    if config.noise_level > 0:
        raw = raw + rng.normal(0.0, config.noise_level, raw.shape)
    ult = np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8)
    return acoustic, ult


def iter_synthetic_corpus(config):
    """Yield synthetic :class:`UtteranceRecord` objects one at a time."""
    config.validate()
    inventory = load_inventory(config.inventory_path)
    archetypes = config.archetypes or make_archetypes(config, inventory)
    vocab = make_vocabulary(config, inventory)
    words = sorted(vocab)
    rng = np.random.default_rng([config.seed, 3])
    for u in range(config.n_utterances):
        target = int(rng.integers(config.min_phones, config.max_phones + 1)) - 2
        chosen, n = [], 0
        while True:
            w = words[int(rng.integers(len(words)))]
            if chosen and n + len(vocab[w]) > target:
                break
            if not chosen and len(vocab[w]) > max(target, 1):
                continue
            chosen.append(w)
            n += len(vocab[w])
        text = " ".join(chosen) + "."
        seq = text_to_phones(text, vocab, inventory)
        durations = rng.integers(config.min_duration, config.max_duration + 1, len(seq))
        acoustic, ult = render_utterance(config, inventory, archetypes, seq.phones,
                                         durations, rng)
        yield UtteranceRecord(f"{config.speaker}_{u:04d}", text, seq.phones, durations,
                              ult, acoustic, config.ult_fps, config.speaker)


def generate_synthetic_corpus(config):
    return list(iter_synthetic_corpus(config))


def write_synthetic_corpus(root, config):
    """Generate and write one speaker's synthetic corpus; returns the utterance ids."""
    os.makedirs(root, exist_ok=True)
    inventory = load_inventory(config.inventory_path)
    write_inventory(os.path.join(root, "inventory.txt"), inventory)
    vocab = make_vocabulary(config, inventory)
    lex_path = os.path.join(root, "lexicon.txt")
    merged = {}
    if os.path.exists(lex_path):
        from .frontend import load_lexicon
        merged.update(load_lexicon(lex_path))
    merged.update(vocab)
    write_lexicon(lex_path, merged)
    ids = []
    for rec in iter_synthetic_corpus(config):
        save_utterance(root, rec)
        ids.append(rec.utt_id)
    return ids


# ---------------------------------------------------------------------------
# exports

def export_video_frames(frames, geometry, directory, stride=1, frame_shift=FRAME_SHIFT):
    """Write every ``stride``-th frame as a wedge-rendered PGM plus a time manifest.

    ``frames`` is an ``(N, scanlines, samples)`` stack in 8-bit intensity units.
    Returns the list of written image paths.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or len(frames) == 0:
        raise InvalidArgumentError("export_video_frames needs a non-empty (N, H, W) stack")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    os.makedirs(directory, exist_ok=True)
    paths = []
    with open(os.path.join(directory, "manifest.txt"), "w") as man:
        for k in range(0, len(frames), stride):
            path = os.path.join(directory, f"{k:06d}.pgm")
            write_pgm(path, render_wedge(frames[k], geometry))
            man.write(f"{k}\t{k * frame_shift:.6f}\n")
            paths.append(path)
    return paths


def default_dims(width):
    return [d for d in EXP_DIMS if d <= width]


def plot_coefficient_trajectories(original, predictions, path, dims=None,
                                  frame_shift=FRAME_SHIFT, original_name="original"):
    """Write selected coefficient tracks as a whitespace-delimited table.

    ``original`` is ``(T, K)``; ``predictions`` maps series names to ``(T, K)``
    arrays. ``dims`` are 1-based; by default the exponential set 1, 2, 4, ... 128
    (limited to K). Columns: time, then ``<series>_pca<d>`` for each dim and series.
    Returns ``(header, table)``.
    """
    orig = np.asarray(original.frames if isinstance(original, FeatureMatrix) else original,
                      dtype=float)
    series = [(original_name, orig)]
    for name, arr in predictions.items():
        arr = np.asarray(arr.frames if isinstance(arr, FeatureMatrix) else arr, dtype=float)
        if arr.shape != orig.shape:
            raise InvalidArgumentError(f"series {name} has shape {arr.shape}, expected {orig.shape}")
        series.append((name, arr))
    K = orig.shape[1]
    dims = default_dims(K) if dims is None else list(dims)
    for d in dims:
        if not 1 <= d <= K:
            raise InvalidArgumentError(f"dimension {d} out of range 1..{K}")
    header = ["time"]
    cols = [np.arange(orig.shape[0]) * frame_shift]
    for d in dims:
        for name, arr in series:
            header.append(f"{name}_pca{d}")
            cols.append(arr[:, d - 1])
    table = np.column_stack(cols)
    np.savetxt(path, table, fmt="%.8g", header="\t".join(header), comments="", delimiter="\t")
    return header, table
