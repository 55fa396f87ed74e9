"""Text to phones to linguistic input vectors.

Stands in for a full-context label pipeline with an explicit encoding.
Each phone-level vector holds:

* one-hot previous / current / next phone (inventory plus a boundary symbol),
* the inventory's attribute flags for the current phone, then word-initial
  and word-final bits,
* four positional slots: phone position in word, word position in
  utterance, within-phone frame position, phone duration in frames.

The last two slots are zero at phone level and get filled by
:func:`upsample_to_frames`.
"""

import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ConfigError, CorruptFileError, InvalidArgumentError
from .features import FRAME_SHIFT, FeatureMatrix, Segment, StreamLayout

BOUNDARY = "<b>"
BOUNDARY_FLAGS = ("word_initial", "word_final")
N_POSITIONAL = 4

_TOKEN_RE = re.compile(r"[a-z0-9']+|[.,;:!?]")


@dataclass(frozen=True)
class Inventory:
    symbols: tuple
    flags: dict            # symbol -> frozenset of flag names
    silence: str = "sil"

    def __post_init__(self):
        if self.silence not in self.symbols:
            raise ConfigError(f"silence symbol {self.silence!r} missing from inventory")
        if BOUNDARY in self.symbols:
            raise ConfigError(f"{BOUNDARY!r} is reserved")

    @property
    def flag_names(self):
        return tuple(sorted({f for fs in self.flags.values() for f in fs}))

    @property
    def attribute_names(self):
        return self.flag_names + BOUNDARY_FLAGS

    def index(self, symbol):
        try:
            return self._index[symbol]
        except AttributeError:
            object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})
            return self._index[symbol]

    def __contains__(self, symbol):
        return symbol in self.flags

    def __len__(self):
        return len(self.symbols)

    @property
    def vector_width(self):
        return 3 * (len(self.symbols) + 1) + len(self.attribute_names) + N_POSITIONAL


@dataclass(frozen=True)
class PhoneSeq:
    phones: tuple
    word_index: tuple      # -1 for silences
    pos_in_word: tuple     # -1 for silences
    word_length: tuple     # 0 for silences
    n_words: int

    def __len__(self):
        return len(self.phones)


def parse_inventory(text, silence="sil"):
    symbols, flags = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sym, *fl = line.split()
        if sym in flags:
            raise CorruptFileError(f"inventory line {lineno}: duplicate symbol {sym!r}")
        symbols.append(sym)
        flags[sym] = frozenset(fl)
    return Inventory(tuple(symbols), flags, silence)


def load_inventory(path=None, silence="sil"):
    if path is None:
        text = resources.files("ultratts.data").joinpath("inventory.txt").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return parse_inventory(text, silence)


def parse_lexicon(text):
    lex = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        if "\t" not in raw:
            raise CorruptFileError(f"lexicon line {lineno}: expected 'word<TAB>phones'")
        word, phones = raw.split("\t", 1)
        lex[word.strip().lower()] = tuple(phones.split())
    return lex


def load_lexicon(path=None):
    if path is None:
        text = resources.files("ultratts.data").joinpath("lexicon.txt").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return parse_lexicon(text)


def write_lexicon(path, lexicon):
    with open(path, "w") as f:
        for word, phones in lexicon.items():
            f.write(f"{word}\t{' '.join(phones)}\n")


def write_inventory(path, inventory):
    with open(path, "w") as f:
        for s in inventory.symbols:
            f.write(" ".join([s, *sorted(inventory.flags[s])]) + "\n")


def text_to_phones(text, lexicon, inventory=None):
    """Tokenise, look words up, and wrap the result in silences.

    Unknown words are spelled letter by letter (each letter upper-cased and
    used as a phone symbol). Punctuation inside the text becomes a silence;
    consecutive silences collapse into one.
    """
    if inventory is None:
        inventory = load_inventory()
    tokens = _TOKEN_RE.findall(text.lower().strip())
    if not any(t[0].isalnum() or t[0] == "'" for t in tokens):
        raise InvalidArgumentError(f"no words in text {text!r}")

    sil = inventory.silence
    phones, widx, pos, wlen = [sil], [-1], [-1], [0]
    n_words = 0
    for tok in tokens:
        if tok in ".,;:!?":
            if phones[-1] != sil:
                phones.append(sil)
                widx.append(-1)
                pos.append(-1)
                wlen.append(0)
            continue
        pron = lexicon.get(tok)
        if pron is None:
            pron = tuple(ch.upper() for ch in tok if ch != "'")
        for p in pron:
            if p not in inventory:
                raise InvalidArgumentError(
                    f"phone {p!r} (from word {tok!r}) is not in the inventory")
        for i, p in enumerate(pron):
            phones.append(p)
            widx.append(n_words)
            pos.append(i)
            wlen.append(len(pron))
        n_words += 1
    if phones[-1] != sil:
        phones.append(sil)
        widx.append(-1)
        pos.append(-1)
        wlen.append(0)
    return PhoneSeq(tuple(phones), tuple(widx), tuple(pos), tuple(wlen), n_words)


def phone_seq_from_labels(phones, inventory):
    """Rebuild word structure for a bare phone list: silences split words."""
    widx, pos, wlen = [], [], []
    words, cur = [], []
    for p in phones:
        if p not in inventory:
            raise InvalidArgumentError(f"phone {p!r} is not in the inventory")
        if p == inventory.silence:
            if cur:
                words.append(cur)
                cur = []
            words.append(None)
        else:
            cur.append(p)
    if cur:
        words.append(cur)
    n = 0
    for w in words:
        if w is None:
            widx.append(-1)
            pos.append(-1)
            wlen.append(0)
        else:
            widx.extend([n] * len(w))
            pos.extend(range(len(w)))
            wlen.extend([len(w)] * len(w))
            n += 1
    return PhoneSeq(tuple(phones), tuple(widx), tuple(pos), tuple(wlen), n)


def phone_level_vectors(seq, inventory):
    """One row per phone; the two frame-level slots are left at zero."""
    n_sym = len(inventory) + 1
    attrs = inventory.attribute_names
    W = inventory.vector_width
    out = np.zeros((len(seq), W))
    bidx = len(inventory)
    ids = [inventory.index(p) for p in seq.phones]
    for i, p in enumerate(seq.phones):
        prev_id = ids[i - 1] if i > 0 else bidx
        next_id = ids[i + 1] if i + 1 < len(ids) else bidx
        out[i, prev_id] = 1.0
        out[i, n_sym + ids[i]] = 1.0
        out[i, 2 * n_sym + next_id] = 1.0
        base = 3 * n_sym
        for k, name in enumerate(inventory.flag_names):
            if name in inventory.flags[p]:
                out[i, base + k] = 1.0
        k0 = base + len(inventory.flag_names)
        if seq.word_index[i] >= 0:
            out[i, k0] = float(seq.pos_in_word[i] == 0)
            out[i, k0 + 1] = float(seq.pos_in_word[i] == seq.word_length[i] - 1)
            pbase = base + len(attrs)
            wl = seq.word_length[i]
            out[i, pbase] = seq.pos_in_word[i] / (wl - 1) if wl > 1 else 0.0
            out[i, pbase + 1] = (seq.word_index[i] / (seq.n_words - 1)
                                 if seq.n_words > 1 else 0.0)
    return out


def linguistic_layout(inventory):
    return StreamLayout((Segment("ling", inventory.vector_width, False),))


def upsample_to_frames(phone_vectors, durations, frame_shift=FRAME_SHIFT):
    """Repeat each phone row ``durations[i]`` times and fill the frame-level slots."""
    pv = np.asarray(phone_vectors, dtype=float)
    dur = np.asarray(durations)
    if dur.ndim != 1 or len(dur) != len(pv):
        raise InvalidArgumentError(
            f"{len(pv)} phone vectors but {dur.size} durations")
    if np.any(dur < 1) or not np.all(dur == np.floor(dur)):
        raise InvalidArgumentError("durations must be integers >= 1")
    dur = dur.astype(int)
    frames = np.repeat(pv, dur, axis=0)
    frac = np.concatenate([(np.arange(d) + 0.5) / d for d in dur])
    frames[:, -2] = frac
    frames[:, -1] = np.repeat(dur, dur)
    layout = StreamLayout((Segment("ling", pv.shape[1], False),))
    return FeatureMatrix(layout, frames, frame_shift)


def read_durations(path):
    """Duration label file: ``phone<TAB>frames`` per line."""
    phones, durs = [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                p, d = raw.rstrip("\n").split("\t")
                durs.append(int(d))
            except ValueError as exc:
                raise CorruptFileError(f"{path}:{lineno}: expected 'phone<TAB>frames'") from exc
            phones.append(p)
    return phones, np.array(durs, dtype=int)


def write_durations(path, phones, durations):
    with open(path, "w") as f:
        for p, d in zip(phones, durations):
            f.write(f"{p}\t{int(d)}\n")
