"""Pipeline stages: prepare -> train -> synthesize -> evaluate.

Work directory layout, one sub-directory per speaker::

    work/<speaker>/split.json        train / dev / test utterance ids
    work/<speaker>/codec.upca        PCA codec fitted on training frames
    work/<speaker>/norm.json         input / output normalisers (training split)
    work/<speaker>/feats/<id>.cmp    target features (acoustic + articulatory)
    work/<speaker>/feats/<id>.lin    frame-level linguistic inputs
    work/<speaker>/feats/<id>.phn    phone-level linguistic inputs
    work/<speaker>/feats/<id>.dur    phone durations in frames
    work/<speaker>/models/           NNET files and training reports
    work/<speaker>/manifest.json     config snapshot, stage times, file hashes
"""

import datetime
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .codec import WedgeGeometry, decode, encode, fit_pca, load_codec, resize_bicubic, save_codec
from .corpus import (export_video_frames, list_speakers, list_utterances,
                     load_utterance, plot_coefficient_trajectories, write_raw_ultrasound)
from .errors import ConfigError, DataError
from .features import (FeatureMatrix, NormStats, Segment, StreamLayout, expand_layout,
                       fit_length, fit_norm, interpolate_lf0, read_fmtx, resample_stream,
                       restore_unvoiced, split_target, write_fmtx)
from .frontend import (linguistic_layout, load_inventory, load_lexicon, phone_level_vectors,
                       phone_seq_from_labels, read_durations, text_to_phones,
                       upsample_to_frames, write_durations)
from .generation import generate_static
from .metrics import SplitSpec, evaluate_system, mean_predictor, split_corpus
from .metrics import write_report_json, write_table
from .nn import (LstmConfig, MlpConfig, load_model, predict, save_model, train_lstm,
                 train_mlp)

log = logging.getLogger(__name__)

ACOUSTIC_NAMES = ("mgc", "bap", "lf0", "vuv")


@dataclass
class PipelineConfig:
    corpus: str = "corpus"
    workdir: str = "work"
    speakers: list = None
    lexicon: str = None
    inventory: str = None
    variance_target: float = 0.70
    max_components: int = 128
    codec_max_frames: int = None
    reduced_height: int = 64
    reduced_width: int = 128
    frame_rate: float = 200.0
    model: str = "fcdnn"
    targets: str = "joint"
    generation: str = "mlpg"
    split_train: float = 0.85
    split_dev: float = 0.10
    split_test: float = 0.05
    split_seed: int = 0
    field_of_view: float = 92.0
    zero_offset: float = 50.0
    wedge_height: int = 360
    wedge_width: int = 520
    video_stride: int = 3
    figures: bool = True
    mlp: MlpConfig = field(default_factory=MlpConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)

    def validate(self):
        if not 0 < self.variance_target <= 1:
            raise ConfigError(f"variance_target must be in (0, 1], got {self.variance_target}")
        if self.model not in ("fcdnn", "lstm"):
            raise ConfigError(f"model must be 'fcdnn' or 'lstm', got {self.model!r}")
        if self.targets not in ("joint", "separate"):
            raise ConfigError(f"targets must be 'joint' or 'separate', got {self.targets!r}")
        if self.generation not in ("slice", "mlpg"):
            raise ConfigError(f"generation must be 'slice' or 'mlpg', got {self.generation!r}")
        try:
            self.split_spec
            WedgeGeometry(self.field_of_view, self.zero_offset, self.wedge_height, self.wedge_width)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def split_spec(self):
        return SplitSpec(self.split_train, self.split_dev, self.split_test, self.split_seed)

    @property
    def geometry(self):
        return WedgeGeometry(self.field_of_view, self.zero_offset, self.wedge_height,
                             self.wedge_width)

    @property
    def frame_shift(self):
        return 1.0 / self.frame_rate

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("mlp"), dict):
            d["mlp"] = MlpConfig(**d["mlp"])
        if isinstance(d.get("lstm"), dict):
            d["lstm"] = LstmConfig(**d["lstm"])
        return cls(**d)


def load_config(path):
    with open(path) as f:
        return PipelineConfig.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# helpers

def _json_dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _json_load(path):
    with open(path) as f:
        return json.load(f)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def update_manifest(spk_dir, config, stage, started):
    """Record stage times and hashes of every file under ``spk_dir``."""
    path = os.path.join(spk_dir, "manifest.json")
    man = _json_load(path) if os.path.exists(path) else {"stages": {}}
    man["tool_version"] = __version__
    man["config"] = config.to_dict()
    man["stages"][stage] = {"started": started, "finished": _now()}
    files = {}
    for dirpath, _, names in os.walk(spk_dir):
        for n in sorted(names):
            p = os.path.join(dirpath, n)
            rel = os.path.relpath(p, spk_dir)
            if rel == "manifest.json":
                continue
            files[rel] = sha256_file(p)
    man["files"] = dict(sorted(files.items()))
    _json_dump(man, path)
    return man


def speakers_for(config):
    if config.speakers:
        return list(config.speakers)
    if not os.path.isdir(config.corpus):
        raise ConfigError(f"corpus directory not found: {config.corpus}")
    return list_speakers(config.corpus)


def _resource(config, name, explicit):
    if explicit:
        if not os.path.exists(explicit):
            raise ConfigError(f"{name} file not found: {explicit}")
        return explicit
    cand = os.path.join(config.corpus, f"{name}.txt")
    return cand if os.path.exists(cand) else None


def load_frontend(config):
    inv = load_inventory(_resource(config, "inventory", config.inventory))
    lex = load_lexicon(_resource(config, "lexicon", config.lexicon))
    return inv, lex


def reduce_frames(frames, config):
    return resize_bicubic(frames, config.reduced_height, config.reduced_width)


def phone_structure(rec, inventory, lexicon):
    """Word structure from the prompt text when it matches the labels, else from labels."""
    if rec.text:
        try:
            seq = text_to_phones(rec.text, lexicon, inventory)
            if seq.phones == tuple(rec.phones):
                return seq
        except ValueError:
            pass
    return phone_seq_from_labels(rec.phones, inventory)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(float)


def build_targets(rec, codec, config):
    """Composed acoustic + articulatory target matrix for one utterance."""
    T = rec.n_frames
    ac = rec.acoustic
    if ac.n_frames != T:
        raise DataError(f"utterance {rec.utt_id}: {ac.n_frames} acoustic frames but "
                        f"labels sum to {T}")
    reduced = reduce_frames(rec.ultrasound, config)
    coeffs = encode(codec, reduced)
    if len(coeffs) >= 2:
        coeffs = resample_stream(coeffs, rec.ult_fps, config.frame_rate)
    expected = T
    slack = math.ceil(config.frame_rate / rec.ult_fps) + 1
    if abs(len(coeffs) - expected) > slack:
        raise DataError(f"utterance {rec.utt_id}: ultrasound covers {len(coeffs)} frames at "
                        f"{config.frame_rate} Hz, labels {expected}")
    coeffs = fit_length(coeffs, T)

    lf0, vuv = interpolate_lf0(ac.stream("lf0"))
    static_ac = FeatureMatrix(
        StreamLayout((Segment("mgc", ac.layout.segment("mgc").width),
                      Segment("bap", ac.layout.segment("bap").width),
                      Segment("lf0", 1), Segment("vuv", 1))),
        _f32(np.column_stack([ac.stream("mgc"), ac.stream("bap"), lf0, vuv])),
        config.frame_shift)
    static_ult = FeatureMatrix(StreamLayout((Segment("ultpca", codec.n_components),)),
                               _f32(coeffs), config.frame_shift)
    acoustic = expand_layout(static_ac)
    articulatory = expand_layout(static_ult)
    return FeatureMatrix(acoustic.layout + articulatory.layout,
                         np.concatenate([acoustic.frames, articulatory.frames], axis=1),
                         config.frame_shift)


# ---------------------------------------------------------------------------
# prepare

def cmd_prepare(config):
    """Fit codec and normalisers on the training split and write all feature files."""
    config.validate()
    inventory, lexicon = load_frontend(config)
    out = {}
    for spk in speakers_for(config):
        started = _now()
        spk_dir = os.path.join(config.workdir, spk)
        feat_dir = os.path.join(spk_dir, "feats")
        os.makedirs(feat_dir, exist_ok=True)
        ids = list_utterances(config.corpus, spk)
        train, dev, test = split_corpus(ids, config.split_spec)
        _json_dump({"train": train, "dev": dev, "test": test}, os.path.join(spk_dir, "split.json"))

        chunks = []
        for utt in train:
            rec = load_utterance(config.corpus, spk, utt)
            chunks.append(reduce_frames(rec.ultrasound, config).astype(np.float32))
        frames = np.concatenate(chunks)
        del chunks
        if config.codec_max_frames and len(frames) > config.codec_max_frames:
            pick = np.linspace(0, len(frames) - 1, config.codec_max_frames).round().astype(int)
            frames = frames[pick]
        codec = fit_pca(frames.astype(float), config.variance_target, config.max_components)
        del frames
        save_codec(codec, os.path.join(spk_dir, "codec.upca"))
        log.info("%s: codec keeps %d components (%.1f%% variance)", spk, codec.n_components,
                 100 * codec.explained_share.sum())

        lin_train, phn_train, tgt_train, dur_train = [], [], [], []
        train_set = set(train)
        raw_shape = None
        for utt in ids:
            try:
                rec = load_utterance(config.corpus, spk, utt)
                seq = phone_structure(rec, inventory, lexicon)
                phn = phone_level_vectors(seq, inventory)
                lin = upsample_to_frames(phn, rec.durations, config.frame_shift)
                tgt = build_targets(rec, codec, config)
                raw_shape = raw_shape or list(rec.ultrasound.shape[1:])
            except (ValueError, DataError) as exc:
                raise DataError(f"prepare failed on utterance {spk}/{utt}: {exc}") from exc
            base = os.path.join(feat_dir, utt)
            write_fmtx(base + ".cmp", tgt)
            write_fmtx(base + ".lin", lin)
            write_fmtx(base + ".phn", FeatureMatrix(linguistic_layout(inventory), phn,
                                                   config.frame_shift))
            write_durations(base + ".dur", rec.phones, rec.durations)
            if utt in train_set:
                lin_train.append(_f32(lin.frames))
                phn_train.append(_f32(phn))
                tgt_train.append(_f32(tgt.frames))
                dur_train.append(np.log(np.asarray(rec.durations, float))[:, None])

        norms = {
            "input": fit_norm(np.concatenate(lin_train), "minmax").to_dict(),
            "output": fit_norm(np.concatenate(tgt_train), "meanvar").to_dict(),
            "duration_input": fit_norm(np.concatenate(phn_train), "minmax").to_dict(),
            "duration_output": fit_norm(np.concatenate(dur_train), "meanvar").to_dict(),
            "n_components": codec.n_components,
            "explained_share": float(codec.explained_share.sum()),
            "raw_shape": raw_shape,
        }
        _json_dump(norms, os.path.join(spk_dir, "norm.json"))
        update_manifest(spk_dir, config, "prepare", started)
        out[spk] = {"codec": codec, "split": (train, dev, test)}
    return out


# ---------------------------------------------------------------------------
# loading prepared data

@dataclass
class Prepared:
    speaker: str
    dir: str
    split: dict
    codec: object
    norms: dict

    def norm(self, key):
        return NormStats.from_dict(self.norms[key])

    def features(self, utt):
        base = os.path.join(self.dir, "feats", utt)
        return read_fmtx(base + ".lin"), read_fmtx(base + ".cmp")

    def phone_level(self, utt):
        base = os.path.join(self.dir, "feats", utt)
        phones, durs = read_durations(base + ".dur")
        return phones, read_fmtx(base + ".phn").frames, durs


def load_prepared(config, speaker):
    d = os.path.join(config.workdir, speaker)
    for name in ("split.json", "codec.upca", "norm.json"):
        if not os.path.exists(os.path.join(d, name)):
            raise ConfigError(f"{d}: missing {name}; run 'prepare' first")
    return Prepared(speaker, d, _json_load(os.path.join(d, "split.json")),
                    load_codec(os.path.join(d, "codec.upca")),
                    _json_load(os.path.join(d, "norm.json")))


def _model_path(prep, kind, role):
    return os.path.join(prep.dir, "models", f"{kind}.{role}.nnet")


# ---------------------------------------------------------------------------
# train

def _target_columns(layout, names):
    idx = np.arange(layout.total)
    return np.concatenate([idx[layout.columns(n)] for n in layout.names if n in names])


def _heads(config, layout):
    """(role, column indices, output layout) for each acoustic-model head."""
    if config.targets == "joint":
        return [("acoustic", np.arange(layout.total), layout)]
    ac_names = [n for n in layout.names if n in ACOUSTIC_NAMES]
    ul_names = [n for n in layout.names if n not in ACOUSTIC_NAMES]
    heads = []
    for role, names in (("acoustic_only", ac_names), ("articulatory_only", ul_names)):
        segs = tuple(s for s in layout.segments if s.name in names)
        heads.append((role, _target_columns(layout, names), StreamLayout(segs)))
    return heads


def cmd_train(config, model_kind=None):
    """Train the duration model and the acoustic(+articulatory) model per speaker."""
    config.validate()
    kind = model_kind or config.model
    results = {}
    for spk in speakers_for(config):
        started = _now()
        prep = load_prepared(config, spk)
        os.makedirs(os.path.join(prep.dir, "models"), exist_ok=True)

        def pairs(ids):
            out = []
            for u in ids:
                lin, tgt = prep.features(u)
                out.append((lin, tgt))
            return out

        def dur_pairs(ids):
            out = []
            for u in ids:
                _, phn, durs = prep.phone_level(u)
                out.append((phn, np.log(durs.astype(float))[:, None]))
            return out

        dur_model, dur_rep = train_mlp(dur_pairs(prep.split["train"]), dur_pairs(prep.split["dev"]),
                                       config.mlp, prep.norm("duration_input"),
                                       prep.norm("duration_output"))
        dur_model.meta.update({"role": "duration", "log_domain": True, "speaker": spk})
        save_model(dur_model, _model_path(prep, kind, "duration"))

        train, dev = pairs(prep.split["train"]), pairs(prep.split["dev"])
        layout = train[0][1].layout
        out_norm = prep.norm("output")
        reports = {"duration": dur_rep.to_dict()}
        for role, cols, out_layout in _heads(config, layout):
            tr = [(x.frames, y.frames[:, cols]) for x, y in train]
            dv = [(x.frames, y.frames[:, cols]) for x, y in dev]
            if kind == "fcdnn":
                model, rep = train_mlp(tr, dv, config.mlp, prep.norm("input"),
                                       out_norm.subset(cols), out_layout)
            else:
                model, rep = train_lstm(tr, dv, config.lstm, prep.norm("input"),
                                        out_norm.subset(cols), out_layout)
            model.meta.update({"role": role, "speaker": spk, "kind": kind})
            save_model(model, _model_path(prep, kind, role))
            reports[role] = rep.to_dict()
        _json_dump(reports, os.path.join(prep.dir, "models", f"{kind}.report.json"))
        update_manifest(prep.dir, config, f"train-{kind}", started)
        results[spk] = reports
    return results


# ---------------------------------------------------------------------------
# synthesis

def load_acoustic_predictor(prep, kind, config):
    """Callable mapping frame-level inputs to the full target layout."""
    if config.targets == "joint":
        path = _model_path(prep, kind, "acoustic")
        if not os.path.exists(path):
            raise ConfigError(f"model not found: {path}; run 'train' first")
        model = load_model(path)
        return lambda x: predict(model, x)
    models = []
    for role in ("acoustic_only", "articulatory_only"):
        path = _model_path(prep, kind, role)
        if not os.path.exists(path):
            raise ConfigError(f"model not found: {path}; run 'train --targets separate' first")
        models.append(load_model(path))

    def joint(x):
        parts = [predict(m, x) for m in models]
        return FeatureMatrix(parts[0].layout + parts[1].layout,
                             np.concatenate([p.frames for p in parts], axis=1), parts[0].frame_shift)
    return joint


def predict_durations(model, phone_vectors):
    out = predict(model, phone_vectors)
    out = out.frames if isinstance(out, FeatureMatrix) else out
    return np.maximum(1, np.rint(np.exp(out[:, 0]))).astype(int)


def cmd_synthesize(config, speaker, out_dir, text=None, reference=None, model_kind=None,
                   name=None, predictor=None):
    """Text (or a reference utterance's timing) to acoustic features and tongue video.

    Returns a dict with the generated streams, the reconstructed raw frames
    (before 8-bit quantisation) and the written file paths. ``predictor`` may
    replace the trained acoustic model (any callable inputs -> FeatureMatrix).
    """
    config.validate()
    if (text is None) == (reference is None):
        raise ConfigError("give exactly one of text or reference")
    kind = model_kind or config.model
    prep = load_prepared(config, speaker)
    inventory, lexicon = load_frontend(config)
    codec = prep.codec

    ref_target = None
    if reference is not None:
        phones, phn, durs = prep.phone_level(reference)
        _, ref_target = prep.features(reference)
        name = name or reference
    else:
        seq = text_to_phones(text, lexicon, inventory)
        phones = seq.phones
        phn = phone_level_vectors(seq, inventory)
        dur_path = _model_path(prep, kind, "duration")
        if not os.path.exists(dur_path):
            raise ConfigError(f"model not found: {dur_path}; run 'train' first")
        durs = predict_durations(load_model(dur_path), phn)
        name = name or "synth"
    lin = upsample_to_frames(phn, durs, config.frame_shift)
    if predictor is None:
        predictor = load_acoustic_predictor(prep, kind, config)
    pred = predictor(lin)
    variances = None
    if config.generation == "mlpg":
        std = prep.norm("output").b
        variances = np.maximum(std, 1e-6) ** 2
        if len(variances) != pred.layout.total:
            raise DataError("output normaliser does not match the model's output layout")
    static = generate_static(pred, config.generation, variances)
    acoustic, articulatory = split_target(static, ACOUSTIC_NAMES)
    if acoustic.n_frames != articulatory.n_frames:
        raise DataError("acoustic and articulatory streams lost synchrony")

    coeffs = articulatory.stream("ultpca")
    reduced = decode(codec, coeffs)
    raw = resize_bicubic(reduced, *prep.norms["raw_shape"])

    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, name)
    ac_out = acoustic.frames.copy()
    lf0_col = acoustic.layout.columns("lf0")
    ac_out[:, lf0_col] = restore_unvoiced(acoustic.stream("lf0"), acoustic.stream("vuv"))[:, None]
    write_fmtx(base + ".acoustic.fmtx", FeatureMatrix(acoustic.layout, ac_out, config.frame_shift))
    write_fmtx(base + ".ultpca.fmtx", articulatory)
    write_durations(base + ".dur", phones, durs)
    write_raw_ultrasound(base + ".ult", base + ".param", np.clip(np.rint(raw), 0, 255),
                         config.frame_rate)
    frames_dir = base + "_wedge"
    pgms = export_video_frames(raw, config.geometry, frames_dir, config.video_stride,
                               config.frame_shift)
    series = {}
    original = coeffs
    if ref_target is not None:
        original = ref_target.stream("ultpca", "static")
        series = {kind: coeffs}
    header, table = plot_coefficient_trajectories(
        original, series, base + ".coeffs.txt", frame_shift=config.frame_shift,
        original_name="original" if ref_target is not None else kind)
    files = [base + ".acoustic.fmtx", base + ".ultpca.fmtx", base + ".dur", base + ".ult",
             base + ".param", base + ".coeffs.txt"] + pgms
    if config.figures:
        from .plotting import plot_trajectory_table, plot_video_strip
        plot_trajectory_table(header, table, base + ".coeffs.png")
        plot_video_strip({kind: raw}, config.geometry, base + ".strip.png",
                         stride=config.video_stride)
        files += [base + ".coeffs.png", base + ".strip.png"]
    return {"acoustic": acoustic, "articulatory": articulatory, "frames": raw,
            "durations": durs, "phones": phones, "files": files}


# ---------------------------------------------------------------------------
# evaluation

def _eval_items(prep, ids):
    for u in ids:
        lin, tgt = prep.features(u)
        yield u, lin, tgt


def cmd_evaluate(config, model_kinds=None, out_dir=None):
    """Dev/test MCD and ULT-PCA RMSE per speaker, written as TSV + JSON tables."""
    config.validate()
    kinds = list(model_kinds or [config.model])
    rows, baseline = {}, {}
    for spk in speakers_for(config):
        prep = load_prepared(config, spk)
        out_norm = prep.norm("output")
        rows[spk] = {}
        for kind in kinds:
            pred = load_acoustic_predictor(prep, kind, config)
            rows[spk][kind] = {
                part: evaluate_system(pred, _eval_items(prep, prep.split[part]), out_norm,
                                      config.generation, part)
                for part in ("dev", "test")}
        _, tgt = prep.features(prep.split["test"][0])
        mean_pred = mean_predictor(out_norm.a, tgt.layout)
        baseline[spk] = {"mean": {
            part: evaluate_system(mean_pred, _eval_items(prep, prep.split[part]), out_norm,
                                  config.generation, part)
            for part in ("dev", "test")}}
    out_dir = out_dir or os.path.join(config.workdir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    write_table(os.path.join(out_dir, "results.tsv"), rows, kinds)
    write_report_json(os.path.join(out_dir, "results.json"), rows)
    write_table(os.path.join(out_dir, "baseline.tsv"), baseline, ("mean",))
    write_report_json(os.path.join(out_dir, "baseline.json"), baseline)
    return rows, baseline
