"""Objective evaluation: corpus split, MCD, normalised ULT-PCA RMSE."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InsufficientDataError, InvalidArgumentError
from .features import FeatureMatrix, apply_norm
from .generation import generate_static

MCD_CONST = 10.0 / math.log(10.0)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.85
    dev: float = 0.10
    test: float = 0.05
    seed: int = 0

    def __post_init__(self):
        r = (self.train, self.dev, self.test)
        if min(r) <= 0 or abs(sum(r) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"split ratios must be positive and sum to 1, got {r}")


def _round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def split_sizes(n, spec=SplitSpec()):
    if n < 3:
        raise InsufficientDataError(f"need at least 3 utterances to split, got {n}")
    n_train = _round_half_up(spec.train * n)
    n_dev = _round_half_up(spec.dev * n)
    n_dev = max(n_dev, 1)
    n_train = min(max(n_train, 1), n - n_dev - 1)
    if n_train < 1:
        n_train, n_dev = 1, n - 2
    return n_train, n_dev, n - n_train - n_dev


def split_corpus(utterance_ids, spec=SplitSpec()):
    """Seeded shuffle followed by a contiguous train / dev / test cut."""
    ids = list(utterance_ids)
    n_train, n_dev, _ = split_sizes(len(ids), spec)
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_dev],
            shuffled[n_train + n_dev:])


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mcd_frames(reference_mgc, predicted_mgc):
    """Per-frame mel-cepstral distortion in dB, energy coefficient excluded."""
    r, p = _pair(reference_mgc, predicted_mgc)
    if r.ndim != 2 or r.shape[1] < 2:
        raise InvalidArgumentError("MCD needs (T, D) cepstra with D >= 2")
    diff = r[:, 1:] - p[:, 1:]
    return MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=1))


def mcd(reference_mgc, predicted_mgc):
    return float(np.mean(mcd_frames(reference_mgc, predicted_mgc)))


def ultpca_rmse(reference, predicted):
    r, p = _pair(reference, predicted)
    if r.size == 0:
        raise InvalidArgumentError("RMSE of empty arrays")
    d = r - p
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class UtteranceScore:
    utt_id: str
    n_frames: int
    mcd: float
    rmse: float


@dataclass
class EvalReport:
    split: str = "test"
    scores: list = field(default_factory=list)

    @property
    def n_frames(self):
        return sum(s.n_frames for s in self.scores)

    def _avg(self, key):
        n = self.n_frames
        if n == 0:
            return float("nan")
        return sum(getattr(s, key) * s.n_frames for s in self.scores) / n

    @property
    def mcd(self):
        return self._avg("mcd")

    @property
    def rmse(self):
        return self._avg("rmse")

    def to_dict(self):
        return {"split": self.split, "mcd": self.mcd, "rmse": self.rmse,
                "n_frames": self.n_frames,
                "utterances": [vars(s) for s in self.scores]}


def evaluate_system(predictor, utterances, target_norm, generation="mlpg",
                    split="test", ult_stream="ultpca", mgc_stream="mgc"):
    """Score a frame predictor on utterances synthesised with their reference timing.

    ``utterances`` yields ``(utt_id, inputs, reference)`` where ``inputs`` are the
    frame-level linguistic features built from reference durations and
    ``reference`` is the composed target FeatureMatrix. ``predictor(inputs)``
    must return a FeatureMatrix with the reference layout. MCD is computed on
    MGC statics; RMSE on ULT-PCA statics after mean-variance normalisation with
    ``target_norm`` (the training-set statistics of the full target).
    """
    report = EvalReport(split)
    variances = target_norm.b ** 2 if generation == "mlpg" else None
    for utt_id, inputs, reference in utterances:
        if reference is None or mgc_stream not in reference.layout \
                or ult_stream not in reference.layout:
            raise DataError(f"utterance {utt_id}: reference streams missing")
        pred = predictor(inputs)
        if pred.n_frames != reference.n_frames:
            raise DataError(f"utterance {utt_id}: predicted {pred.n_frames} frames, "
                            f"reference has {reference.n_frames}")
        var = None
        if variances is not None:
            var = np.where(variances > 1e-12, variances, 1e-12)
        gen = generate_static(pred, generation, var)
        m = mcd(reference.stream(mgc_stream, "static"), gen.stream(mgc_stream))

        cols = reference.layout.columns(ult_stream, "static")
        ult_norm = target_norm.subset(cols)
        ref_n = apply_norm(ult_norm, reference.frames[:, cols])
        pred_n = apply_norm(ult_norm, gen.stream(ult_stream))
        report.scores.append(UtteranceScore(utt_id, reference.n_frames, m,
                                            ultpca_rmse(ref_n, pred_n)))
    return report


def write_table(path, rows, systems=("fcdnn", "lstm")):
    """Tab-separated MCD and RMSE tables, one row per speaker plus an average.

    ``rows`` maps speaker -> {system: {"dev": EvalReport, "test": EvalReport}}.
    """
    lines = []
    notes = {"mcd": "MCD [dB] = 10/ln(10) * sqrt(2 * sum_(d>=1) diff^2), frame-weighted mean",
             "rmse": "ULTPCA/RMSE on mean-variance normalised statics, frame-weighted mean"}
    for metric in ("mcd", "rmse"):
        lines.append(f"# {notes[metric]}")
        header = ["speaker"]
        for s in systems:
            header += [f"{s}_dev", f"{s}_test"]
        lines.append("\t".join(header))
        acc = {(s, part): [] for s in systems for part in ("dev", "test")}
        for spk in sorted(rows):
            cells = [spk]
            for s in systems:
                for part in ("dev", "test"):
                    rep = rows[spk].get(s, {}).get(part)
                    if rep is None:
                        cells.append("-")
                    else:
                        v = getattr(rep, metric)
                        acc[(s, part)].append(v)
                        cells.append(f"{v:.3f}")
            lines.append("\t".join(cells))
        cells = ["average"]
        for s in systems:
            for part in ("dev", "test"):
                vals = acc[(s, part)]
                cells.append(f"{np.mean(vals):.3f}" if vals else "-")
        lines.append("\t".join(cells))
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))


def write_report_json(path, rows):
    out = {spk: {s: {part: rep.to_dict() for part, rep in parts.items()}
                 for s, parts in systems.items()}
           for spk, systems in rows.items()}
    with open(path, "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)


def mean_predictor(target_mean, layout):
    """Baseline that outputs the training-set mean target for every frame."""
    mean = np.asarray(target_mean, dtype=float)

    def predict(inputs):
        return FeatureMatrix(layout, np.tile(mean, (len(inputs), 1)))
    return predict

