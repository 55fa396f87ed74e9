import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ultratts.errors import DataError, InsufficientDataError, InvalidArgumentError
from ultratts.features import (FeatureMatrix, acoustic_layout, articulatory_layout,
                               expand_layout, fit_norm)
from ultratts.metrics import (EvalReport, SplitSpec, UtteranceScore, evaluate_system, mcd,
                              mean_predictor, split_corpus, split_sizes, ultpca_rmse,
                              write_report_json, write_table)


# ---------------------------------------------------------------- split

def test_split_200():
    assert split_sizes(200) == (170, 20, 10)
    train, dev, test = split_corpus([f"u{i}" for i in range(200)])
    assert (len(train), len(dev), len(test)) == (170, 20, 10)


def test_split_minimum():
    assert split_sizes(3) == (1, 1, 1)
    with pytest.raises(InsufficientDataError):
        split_sizes(2)


def test_split_deterministic():
    ids = [f"u{i}" for i in range(57)]
    assert split_corpus(ids, SplitSpec(seed=3)) == split_corpus(ids, SplitSpec(seed=3))
    assert split_corpus(ids, SplitSpec(seed=3)) != split_corpus(ids, SplitSpec(seed=4))


@settings(max_examples=200)
@given(st.integers(3, 1000))
def test_split_is_partition(n):
    ids = list(range(n))
    train, dev, test = split_corpus(ids)
    assert sorted(train + dev + test) == ids
    assert min(len(train), len(dev), len(test)) >= 1
    r_train = math.floor(0.85 * n + 0.5)
    r_dev = math.floor(0.10 * n + 0.5)
    if r_dev >= 1 and r_train + r_dev <= n - 1:
        assert (len(train), len(dev)) == (r_train, r_dev)


def test_split_spec_validation():
    with pytest.raises(InvalidArgumentError):
        SplitSpec(0.8, 0.1, 0.05)
    with pytest.raises(InvalidArgumentError):
        SplitSpec(1.0, 0.0, 0.0)


# ---------------------------------------------------------------- MCD / RMSE

def test_mcd_identical():
    x = np.random.default_rng(0).normal(size=(10, 60))
    assert mcd(x, x) == 0.0


def test_mcd_single_c1_offset():
    a = np.zeros((1, 60))
    b = a.copy()
    b[0, 1] = 1.0
    assert abs(mcd(a, b) - 10 / math.log(10) * math.sqrt(2)) < 1e-9
    assert mcd(a, b) == pytest.approx(6.1419, abs=1e-4)


def test_mcd_ignores_c0():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 8, 60))
    b2 = b.copy()
    b2[:, 0] += 5.0
    assert mcd(a, b) == mcd(a, b2)
    a2 = a.copy()
    a2[:, 0] = b[:, 0]
    assert mcd(a2, b) == mcd(a, b)


def test_mcd_symmetric_and_triangle():
    rng = np.random.default_rng(2)
    a, b, c = rng.normal(size=(3, 1, 60))
    assert mcd(a, b) == pytest.approx(mcd(b, a), rel=1e-15)
    assert mcd(a, c) <= mcd(a, b) + mcd(b, c) + 1e-12


def test_rmse_cases():
    x = np.random.default_rng(3).normal(size=(12, 5))
    assert ultpca_rmse(x, x) == 0.0
    assert ultpca_rmse(x, x + 1) == pytest.approx(1.0, abs=1e-12)
    y = np.random.default_rng(4).normal(size=(12, 5))
    total = 0.0
    for i in range(12):
        for j in range(5):
            total += (x[i, j] - y[i, j]) ** 2
    assert abs(ultpca_rmse(x, y) - math.sqrt(total / 60)) < 1e-12
    assert ultpca_rmse(2.5 * x, 2.5 * y) == pytest.approx(2.5 * ultpca_rmse(x, y), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        mcd(np.zeros((3, 60)), np.zeros((4, 60)))
    with pytest.raises(InvalidArgumentError):
        ultpca_rmse(np.zeros((3, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------- evaluation

LAYOUT = acoustic_layout(6, 2, 1) + articulatory_layout(3)


def make_utterances(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        T = int(rng.integers(20, 40))
        frames = rng.normal(size=(T, LAYOUT.total)) * 2 + 1
        frames[:, LAYOUT.columns("vuv")] = rng.integers(0, 2, size=(T, 1))
        out.append((f"u{i}", np.zeros((T, 4)), FeatureMatrix(LAYOUT, frames)))
    return out


def test_oracle_scores_zero():
    utts = make_utterances(4)
    refs = {id(x): ref for _, x, ref in utts}
    norm = fit_norm(np.concatenate([r.frames for _, _, r in utts]))
    rep = evaluate_system(lambda x: refs[id(x)], utts, norm, generation="slice")
    assert rep.mcd == 0.0 and rep.rmse == 0.0


def test_oracle_scores_zero_with_mlpg_on_consistent_targets():
    rng = np.random.default_rng(9)
    static = LAYOUT.static_layout()
    utts = []
    for i in range(3):
        t = np.arange(30)[:, None]
        st_frames = np.sin(t / 5.0 + rng.uniform(0, 6, static.total))
        fm = expand_layout(FeatureMatrix(static, st_frames))
        utts.append((f"u{i}", np.zeros((30, 2)), fm))
    refs = {id(x): ref for _, x, ref in utts}
    norm = fit_norm(np.concatenate([r.frames for _, _, r in utts]))
    rep = evaluate_system(lambda x: refs[id(x)], utts, norm, generation="mlpg")
    assert rep.mcd < 1e-4 and rep.rmse < 1e-6


def test_mean_predictor_rmse_near_one():
    utts = make_utterances(30)
    all_frames = np.concatenate([r.frames for _, _, r in utts])
    norm = fit_norm(all_frames)
    rep = evaluate_system(mean_predictor(norm.a, LAYOUT), utts, norm, generation="slice")
    assert rep.rmse == pytest.approx(1.0, abs=0.05)
    # pooled over frames, the variance identity is exact
    cols = LAYOUT.columns("ultpca", "static")
    z = (all_frames[:, cols] - norm.a[cols]) / norm.b[cols]
    assert math.sqrt(np.mean(z ** 2)) == pytest.approx(1.0, abs=1e-12)


def test_report_frame_weighting():
    rep = EvalReport("dev", [UtteranceScore("a", 10, 2.0, 1.0), UtteranceScore("b", 30, 4.0, 3.0)])
    assert rep.mcd == pytest.approx((10 * 2 + 30 * 4) / 40, abs=1e-12)
    assert rep.rmse == pytest.approx((10 * 1 + 30 * 3) / 40, abs=1e-12)


def test_missing_reference_names_utterance():
    utts = make_utterances(1)
    bad = [("broken_7", utts[0][1], None)]
    with pytest.raises(DataError, match="broken_7"):
        evaluate_system(lambda x: None, bad, fit_norm(utts[0][2].frames))


def test_table_and_json(tmp_path):
    rep = EvalReport("test", [UtteranceScore("a", 5, 6.2281, 3.4431)])
    rows = {"spk01": {"fcdnn": {"dev": rep, "test": rep}}}
    write_table(tmp_path / "t.tsv", rows)
    text = (tmp_path / "t.tsv").read_text().splitlines()
    assert "speaker\tfcdnn_dev\tfcdnn_test\tlstm_dev\tlstm_test" in text
    assert "spk01\t6.228\t6.228\t-\t-" in text
    assert "spk01\t3.443\t3.443\t-\t-" in text
    write_report_json(tmp_path / "t.json", rows)
    data = json.loads((tmp_path / "t.json").read_text())
    assert data["spk01"]["fcdnn"]["test"]["mcd"] == pytest.approx(6.2281)
