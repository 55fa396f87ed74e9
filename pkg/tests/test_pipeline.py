import json
import os
import shutil
from dataclasses import replace

import numpy as np
import pytest

from ultratts.codec import decode, encode, load_codec, resize_bicubic
from ultratts.corpus import SynthCorpusConfig, load_utterance, write_synthetic_corpus
from ultratts.errors import ConfigError, DataError
from ultratts.features import read_fmtx, resample_stream, fit_length
from ultratts.frontend import read_durations
from ultratts.metrics import mean_predictor
from ultratts.nn import LstmConfig, MlpConfig, load_model
from ultratts.pipeline import (PipelineConfig, cmd_evaluate, cmd_prepare, cmd_synthesize,
                               cmd_train, load_prepared, sha256_file)

SPEAKERS = ("spkA", "spkB")
TINY_MLP = MlpConfig(hidden_layers=1, hidden_width=16, batch_size=64, base_lr=0.01,
                     max_epochs=8, warmup_epochs=3)
TINY_LSTM = LstmConfig(ff_layers=1, ff_width=8, lstm_width=8, base_lr=0.005, max_epochs=3,
                       warmup_epochs=1)


def make_corpus(root, n=14):
    for i, spk in enumerate(SPEAKERS):
        write_synthetic_corpus(root, SynthCorpusConfig(
            seed=10 + i, n_utterances=n, speaker=spk, raw_shape=(16, 60),
            reduced_shape=(16, 32)))


def make_config(corpus, work, **kw):
    return PipelineConfig(corpus=str(corpus), workdir=str(work), reduced_height=16,
                          reduced_width=32, max_components=12, wedge_height=40,
                          wedge_width=60, figures=False, mlp=TINY_MLP, lstm=TINY_LSTM, **kw)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root)
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    cfg = make_config(corpus, tmp_path_factory.mktemp("work"))
    prep = cmd_prepare(cfg)
    rep_fc = cmd_train(cfg, "fcdnn")
    rep_lstm = cmd_train(cfg, "lstm")
    return cfg, prep, rep_fc, rep_lstm


# ---------------------------------------------------------------- prepare

def test_prepare_writes_complete_manifest(trained):
    cfg, prep, _, _ = trained
    assert set(prep) == set(SPEAKERS)
    for spk in SPEAKERS:
        d = os.path.join(cfg.workdir, spk)
        man = json.load(open(os.path.join(d, "manifest.json")))
        split = json.load(open(os.path.join(d, "split.json")))
        ids = split["train"] + split["dev"] + split["test"]
        assert len(ids) == 14 and len(set(ids)) == 14
        for u in ids:
            for ext in (".cmp", ".lin", ".phn", ".dur"):
                assert f"feats/{u}{ext}" in man["files"]
        assert "codec.upca" in man["files"]
        for rel, digest in man["files"].items():
            if not rel.startswith("models/"):
                assert sha256_file(os.path.join(d, rel)) == digest
        assert set(man["stages"]) >= {"prepare", "train-fcdnn", "train-lstm"}
        assert man["config"]["variance_target"] == 0.7


def test_prepare_rerun_is_identical(corpus, tmp_path):
    hashes = []
    for run in ("a", "b"):
        cfg = make_config(corpus, tmp_path / run, speakers=["spkA"])
        cmd_prepare(cfg)
        man = json.load(open(tmp_path / run / "spkA" / "manifest.json"))
        hashes.append(man["files"])
    assert hashes[0] == hashes[1]


def test_codec_ignores_dev_and_test_frames(corpus, tmp_path):
    cfg = make_config(corpus, tmp_path / "clean", speakers=["spkA"])
    cmd_prepare(cfg)
    split = json.load(open(tmp_path / "clean" / "spkA" / "split.json"))

    perturbed = tmp_path / "perturbed"
    shutil.copytree(corpus, perturbed)
    for u in split["dev"] + split["test"]:
        p = perturbed / "spkA" / f"{u}.ult"
        data = np.frombuffer(p.read_bytes(), np.uint8)
        p.write_bytes((255 - data).tobytes())
    cfg2 = make_config(perturbed, tmp_path / "probe", speakers=["spkA"])
    cmd_prepare(cfg2)
    a, b = tmp_path / "clean" / "spkA", tmp_path / "probe" / "spkA"
    assert (a / "codec.upca").read_bytes() == (b / "codec.upca").read_bytes()
    assert (a / "norm.json").read_bytes() == (b / "norm.json").read_bytes()
    # the perturbation did reach the held-out features
    u = split["test"][0]
    assert (a / "feats" / f"{u}.cmp").read_bytes() != (b / "feats" / f"{u}.cmp").read_bytes()


def test_prepare_feature_shapes(trained):
    cfg, prep, _, _ = trained
    p = load_prepared(cfg, "spkA")
    u = p.split["train"][0]
    lin, tgt = p.features(u)
    phones, _, durs = p.phone_level(u)
    assert lin.n_frames == tgt.n_frames == durs.sum()
    assert tgt.layout.total == 199 + 3 * p.codec.n_components
    assert p.codec.n_components == prep["spkA"]["codec"].n_components
    assert len(phones) == len(durs)


def test_prepare_missing_corpus(tmp_path):
    with pytest.raises(ConfigError):
        cmd_prepare(make_config(tmp_path / "nope", tmp_path / "w"))


def test_prepare_names_failing_utterance(corpus, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(corpus / "spkA", broken / "spkA")
    victim = sorted(p.stem for p in (broken / "spkA").glob("*.lab"))[-1]
    lab = broken / "spkA" / f"{victim}.lab"
    lines = lab.read_text().splitlines()
    lab.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataError, match=victim):
        cmd_prepare(make_config(broken, tmp_path / "w"))


# ---------------------------------------------------------------- train

def test_training_learns_per_speaker(trained):
    cfg, _, rep_fc, rep_lstm = trained
    for spk in SPEAKERS:
        r = rep_fc[spk]["acoustic"]
        assert r["best_dev_loss"] < r["initial_dev_loss"]
        assert rep_fc[spk]["duration"]["best_dev_loss"] < rep_fc[spk]["duration"]["initial_dev_loss"]
        for kind in ("fcdnn", "lstm"):
            for role in ("duration", "acoustic"):
                assert os.path.exists(os.path.join(cfg.workdir, spk, "models",
                                                   f"{kind}.{role}.nnet"))
    a = load_model(os.path.join(cfg.workdir, "spkA", "models", "fcdnn.acoustic.nnet"))
    b = load_model(os.path.join(cfg.workdir, "spkB", "models", "fcdnn.acoustic.nnet"))
    assert a.meta["speaker"] == "spkA" and b.meta["speaker"] == "spkB"
    assert not np.array_equal(a.net.params[0], b.net.params[0])


def test_lstm_report_well_formed(trained):
    _, _, _, rep_lstm = trained
    r = rep_lstm["spkA"]["acoustic"]
    assert 1 <= r["epochs_run"] <= TINY_LSTM.max_epochs
    assert len(r["dev_loss"]) == len(r["train_loss"]) == len(r["learning_rate"]) == r["epochs_run"]
    assert r["best_dev_loss"] == min(r["dev_loss"])


def test_separate_targets(corpus, tmp_path):
    cfg = make_config(corpus, tmp_path, speakers=["spkA"], targets="separate")
    cmd_prepare(cfg)
    reports = cmd_train(cfg)
    assert set(reports["spkA"]) == {"duration", "acoustic_only", "articulatory_only"}
    res = cmd_synthesize(cfg, "spkA", tmp_path / "out", text="a cat")
    assert res["acoustic"].n_frames == res["articulatory"].n_frames


def test_train_requires_prepare(corpus, tmp_path):
    with pytest.raises(ConfigError, match="prepare"):
        cmd_train(make_config(corpus, tmp_path))


# ---------------------------------------------------------------- synthesize

@pytest.mark.parametrize("kind", ["fcdnn", "lstm"])
def test_text_synthesis_is_frame_synchronous(trained, tmp_path, kind):
    cfg, _, _, _ = trained
    res = cmd_synthesize(cfg, "spkA", tmp_path, text="the quick tongue", model_kind=kind)
    T = res["acoustic"].n_frames
    assert T == res["articulatory"].n_frames == len(res["frames"]) == res["durations"].sum()
    assert res["acoustic"].layout.total == 60 + 5 + 1 + 1
    for f in res["files"]:
        assert os.path.exists(f)
    assert len([f for f in res["files"] if f.endswith(".pgm")]) == len(range(0, T, 3))
    ac = read_fmtx(tmp_path / "synth.acoustic.fmtx")
    assert ac.n_frames == T


def test_reference_timing_frame_count(trained, tmp_path):
    cfg, _, _, _ = trained
    p = load_prepared(cfg, "spkA")
    u = p.split["test"][0]
    _, durs = read_durations(os.path.join(p.dir, "feats", f"{u}.dur"))
    res = cmd_synthesize(cfg, "spkA", tmp_path, reference=u)
    assert res["acoustic"].n_frames == res["articulatory"].n_frames == durs.sum()
    assert np.array_equal(res["durations"], durs)


def test_oracle_synthesis_reproduces_pca_roundtrip(trained, corpus, tmp_path):
    cfg, _, _, _ = trained
    cfg = replace(cfg, generation="slice")
    p = load_prepared(cfg, "spkA")
    u = p.split["test"][0]
    _, ref = p.features(u)
    res = cmd_synthesize(cfg, "spkA", tmp_path, reference=u, predictor=lambda x: ref)

    # independent route from the raw recording to reconstructed frames
    rec = load_utterance(corpus, "spkA", u)
    codec = load_codec(os.path.join(p.dir, "codec.upca"))
    coeffs = encode(codec, resize_bicubic(rec.ultrasound, 16, 32))
    coeffs = fit_length(resample_stream(coeffs, rec.ult_fps, 200.0), rec.n_frames)
    coeffs = coeffs.astype(np.float32).astype(float)
    expect = resize_bicubic(decode(codec, coeffs), *rec.ultrasound.shape[1:])
    assert res["frames"].shape == expect.shape
    assert np.max(np.abs(res["frames"] - expect)) < 1e-6


def test_oracle_synthesis_with_mlpg(trained, tmp_path):
    cfg, _, _, _ = trained
    p = load_prepared(cfg, "spkA")
    u = p.split["test"][0]
    _, ref = p.features(u)
    res = cmd_synthesize(cfg, "spkA", tmp_path, reference=u, predictor=lambda x: ref)
    orig = ref.stream("ultpca", "static")
    # stored deltas are float32-rounded, so the trajectory is consistent to ~1e-6
    assert np.max(np.abs(res["articulatory"].stream("ultpca") - orig)) < 1e-4


def test_synthesis_needs_text_or_reference(trained, tmp_path):
    cfg, _, _, _ = trained
    with pytest.raises(ConfigError):
        cmd_synthesize(cfg, "spkA", tmp_path)
    with pytest.raises(ConfigError):
        cmd_synthesize(cfg, "spkA", tmp_path, text="a", reference="x")


def test_synthesis_missing_model(corpus, tmp_path):
    cfg = make_config(corpus, tmp_path, speakers=["spkA"])
    cmd_prepare(cfg)
    with pytest.raises(ConfigError, match="model not found"):
        cmd_synthesize(cfg, "spkA", tmp_path / "o", text="a")


def test_synthesis_figures(trained, tmp_path):
    cfg, _, _, _ = trained
    res = cmd_synthesize(replace(cfg, figures=True), "spkA", tmp_path, text="a tongue")
    for f in ("synth.coeffs.png", "synth.strip.png"):
        assert (tmp_path / f).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert str(tmp_path / f) in res["files"]


# ---------------------------------------------------------------- evaluate

def test_evaluate_both_columns(trained, tmp_path):
    cfg, _, _, _ = trained
    rows, baseline = cmd_evaluate(cfg, ["fcdnn", "lstm"], tmp_path)
    for spk in SPEAKERS:
        for kind in ("fcdnn", "lstm"):
            for part in ("dev", "test"):
                r = rows[spk][kind][part]
                assert np.isfinite(r.mcd) and np.isfinite(r.rmse) and r.n_frames > 0
    text = (tmp_path / "results.tsv").read_text()
    assert "-" not in [c for line in text.splitlines() if line.startswith("spk")
                       for c in line.split("\t")]
    assert (tmp_path / "baseline.json").exists()


def test_oracle_and_mean_reports(trained, tmp_path):
    from ultratts.metrics import evaluate_system
    cfg, _, _, _ = trained
    p = load_prepared(cfg, "spkA")
    norm = p.norm("output")
    items = [(u, *p.features(u)) for u in p.split["train"]]
    refs = {id(lin): tgt for _, lin, tgt in items}
    oracle = evaluate_system(lambda x: refs[id(x)], items, norm, "slice")
    assert oracle.mcd == 0.0 and oracle.rmse == 0.0
    mean = evaluate_system(mean_predictor(norm.a, items[0][2].layout), items, norm, "slice")
    assert mean.rmse == pytest.approx(1.0, abs=0.15)
