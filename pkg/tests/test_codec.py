import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ultratts.codec import (PcaCodec, WedgeGeometry, bicubic_weights, cubic_kernel, decode,
                            encode, fit_pca, load_codec, pca_spectrum, read_pgm,
                            render_wedge, resize_bicubic, save_codec, select_n_components,
                            write_pgm)
from ultratts.errors import CorruptFileError, InsufficientDataError, InvalidArgumentError


def catmull_rom(x):
    # written out piecewise, independent of cubic_kernel
    x = abs(x)
    if x <= 1:
        return 1.5 * x ** 3 - 2.5 * x ** 2 + 1
    if x < 2:
        return -0.5 * x ** 3 + 2.5 * x ** 2 - 4 * x + 2
    return 0.0


def direct_resize(grid, th, tw):
    h, w = grid.shape
    out = np.zeros((th, tw))
    for i in range(th):
        pr = (i + 0.5) * h / th - 0.5
        for j in range(tw):
            pc = (j + 0.5) * w / tw - 0.5
            acc = 0.0
            for r in range(math.floor(pr) - 1, math.floor(pr) + 3):
                for c in range(math.floor(pc) - 1, math.floor(pc) + 3):
                    v = grid[min(max(r, 0), h - 1), min(max(c, 0), w - 1)]
                    acc += v * catmull_rom(pr - r) * catmull_rom(pc - c)
            out[i, j] = acc
    return np.clip(out, grid.min(), grid.max())


# ---------------------------------------------------------------- resize

def test_resize_constant_grid():
    out = resize_bicubic(np.full((64, 842), 100.0), 64, 128)
    assert out.shape == (64, 128)
    assert np.all(out == 100.0)


def test_resize_same_size_is_identity():
    g = np.random.default_rng(0).normal(size=(7, 9))
    assert np.array_equal(resize_bicubic(g, 7, 9), g)


def test_resize_ramp_matches_direct_kernel_evaluation():
    ramp = np.tile(np.arange(4.0), (4, 1))
    out = resize_bicubic(ramp, 4, 2)
    np.testing.assert_allclose(out, direct_resize(ramp, 4, 2), atol=1e-12)
    # hand value at source column 0.5: 0.5625*1 - 0.0625*2
    assert out[0, 0] == pytest.approx(0.4375)


def test_resize_random_matches_direct_kernel_evaluation():
    g = np.random.default_rng(1).uniform(0, 255, size=(6, 11))
    np.testing.assert_allclose(resize_bicubic(g, 4, 5), direct_resize(g, 4, 5), atol=1e-9)
    np.testing.assert_allclose(resize_bicubic(g, 9, 17), direct_resize(g, 9, 17), atol=1e-9)


def test_resize_stack_equals_per_frame():
    s = np.random.default_rng(2).uniform(0, 255, size=(3, 8, 20))
    stacked = resize_bicubic(s, 8, 6)
    for k in range(3):
        np.testing.assert_array_equal(stacked[k], resize_bicubic(s[k], 8, 6))


def test_resize_rejects_tiny_dims():
    with pytest.raises(InvalidArgumentError):
        resize_bicubic(np.zeros((1, 5)), 4, 4)
    with pytest.raises(InvalidArgumentError):
        resize_bicubic(np.zeros((5, 5)), 4, 1)


@given(st.floats(0, 1, allow_nan=False))
def test_kernel_partition_of_unity(phase):
    w = cubic_kernel(np.array([phase + 1, phase, phase - 1, phase - 2]))
    assert abs(w.sum() - 1.0) < 1e-12


@given(st.integers(2, 40), st.integers(2, 40))
def test_weight_rows_sum_to_one(n_in, n_out):
    np.testing.assert_allclose(bicubic_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- PCA

def dense_oracle(X):
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (X.shape[0] - 1)
    lam, V = np.linalg.eigh(C)
    return lam[::-1], V[:, ::-1].T


def test_pca_matches_dense_eigendecomposition():
    X = np.random.default_rng(0).normal(size=(200, 50)) * np.linspace(3, 0.1, 50)
    codec = fit_pca(X, variance_target=1.0)
    lam, V = dense_oracle(X)
    assert codec.n_components == 50
    np.testing.assert_allclose(codec.explained_variance, lam, rtol=1e-6, atol=1e-10)
    for i in range(50):
        s = np.sign(codec.components[i] @ V[i])
        np.testing.assert_allclose(codec.components[i], s * V[i], atol=1e-6)


def test_pca_gram_route_matches_covariance_route():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 60))
    _, lam, V, total = pca_spectrum(X)
    lam_o, V_o = dense_oracle(X)
    assert len(lam) == 19
    np.testing.assert_allclose(lam, lam_o[:19], rtol=1e-8)
    np.testing.assert_allclose(np.abs(np.sum(V * V_o[:19], axis=1)), 1.0, atol=1e-8)
    assert total == pytest.approx(lam_o.sum(), rel=1e-10)


def test_pca_rank_one_data():
    rng = np.random.default_rng(4)
    mean, v = rng.normal(size=30), rng.normal(size=30)
    X = mean + rng.normal(size=(40, 1)) * v
    codec = fit_pca(X, 0.7)
    assert codec.n_components == 1
    assert codec.explained_share[0] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("target", [0.5, 0.7, 0.9])
def test_component_count_is_minimal(target):
    X = np.random.default_rng(5).normal(size=(200, 50)) * np.linspace(3, 0.1, 50)
    codec = fit_pca(X, target)
    lam, _ = dense_oracle(X)
    share = np.cumsum(lam) / lam.sum()
    k = codec.n_components
    assert share[k - 1] >= target - 1e-12
    assert k == 1 or share[k - 2] < target


def test_max_components_caps_selection():
    X = np.random.default_rng(6).normal(size=(100, 20))
    assert fit_pca(X, 1.0, max_components=5).n_components == 5


def test_select_rejects_bad_target():
    with pytest.raises(InvalidArgumentError):
        select_n_components([2.0, 1.0], 3.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        select_n_components([2.0, 1.0], 3.0, 1.2)


def test_fit_errors():
    with pytest.raises(InsufficientDataError):
        fit_pca(np.zeros((1, 4)))
    with pytest.raises(InvalidArgumentError):
        fit_pca([np.zeros((2, 3)), np.zeros((3, 2))])


@pytest.fixture(scope="module")
def codec_and_data():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(150, 8, 5)) * rng.uniform(0.1, 4, size=(1, 8, 5))
    return fit_pca(X, 0.7), X


def test_components_orthonormal(codec_and_data):
    codec, _ = codec_and_data
    G = codec.components @ codec.components.T
    assert np.max(np.abs(G - np.eye(codec.n_components))) < 1e-8
    assert np.all(np.diff(codec.explained_variance) <= 0)


def test_encode_mean_and_axis(codec_and_data):
    codec, _ = codec_and_data
    mean_grid = codec.mean.reshape(codec.shape)
    np.testing.assert_allclose(encode(codec, mean_grid), 0.0, atol=1e-12)
    c = encode(codec, mean_grid + 3 * codec.components[0].reshape(codec.shape))
    expect = np.zeros(codec.n_components)
    expect[0] = 3
    np.testing.assert_allclose(c, expect, atol=1e-12)


def test_encode_matches_inner_products(codec_and_data):
    codec, _ = codec_and_data
    f = np.random.default_rng(8).normal(size=codec.shape)
    flat = f.ravel() - codec.mean
    oracle = [sum(flat[j] * comp[j] for j in range(codec.dim)) for comp in codec.components]
    np.testing.assert_allclose(encode(codec, f), oracle, atol=1e-9)


def test_decode_zero_is_mean(codec_and_data):
    codec, _ = codec_and_data
    np.testing.assert_array_equal(decode(codec, np.zeros(codec.n_components)),
                                  codec.mean.reshape(codec.shape))


def test_roundtrip_residual_equals_discarded_variance(codec_and_data):
    codec, X = codec_and_data
    rec = decode(codec, encode(codec, X))
    resid = ((X - rec) ** 2).sum() / (X.shape[0] - 1)
    assert resid == pytest.approx(codec.discarded_variance, rel=1e-6)


def test_variance_accounting(codec_and_data):
    _, X = codec_and_data
    full = fit_pca(X, 1.0)
    Xf = X.reshape(len(X), -1)
    total = ((Xf - Xf.mean(0)) ** 2).sum() / (len(X) - 1)
    assert full.explained_variance.sum() == pytest.approx(total, rel=1e-6)
    assert full.explained_share.sum() == pytest.approx(1.0, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_encode_decode_coefficients(seed, scale):
    codec = fit_pca(np.random.default_rng(9).normal(size=(30, 12)), 0.8)
    c = scale * np.random.default_rng(seed).normal(size=codec.n_components)
    np.testing.assert_allclose(encode(codec, decode(codec, c, as_grid=False)), c, atol=1e-9)


def test_projection_idempotent(codec_and_data):
    codec, X = codec_and_data
    once = decode(codec, encode(codec, X[:5]))
    twice = decode(codec, encode(codec, once))
    np.testing.assert_allclose(twice, once, atol=1e-9)


def test_dimension_errors(codec_and_data):
    codec, _ = codec_and_data
    with pytest.raises(InvalidArgumentError):
        encode(codec, np.zeros(codec.dim + 1))
    with pytest.raises(InvalidArgumentError):
        decode(codec, np.zeros(codec.n_components + 1))


def test_codec_file_roundtrip(tmp_path, codec_and_data):
    codec, _ = codec_and_data
    p = tmp_path / "c.upca"
    save_codec(codec, p)
    back = load_codec(p)
    assert back.shape == codec.shape
    assert back.total_variance == codec.total_variance
    for a in ("mean", "components", "explained_variance"):
        assert np.array_equal(getattr(back, a), getattr(codec, a))
    blob = p.read_bytes()
    assert blob[:4] == b"UPCA"
    p.write_bytes(blob[:-3])
    with pytest.raises(CorruptFileError):
        load_codec(p)


# ---------------------------------------------------------------- wedge

GEOM = WedgeGeometry(field_of_view=80.0, zero_offset=20.0, height=120, width=180)


def sector_mask(geom, n_samples):
    # cross-product point-in-sector test
    ax, ay, scale = geom.layout(n_samples)
    half = math.radians(geom.field_of_view) / 2
    left = (-math.sin(half), math.cos(half))
    right = (math.sin(half), math.cos(half))
    r_lo, r_hi = geom.zero_offset, geom.zero_offset + n_samples - 1
    mask = np.zeros((geom.height, geom.width), bool)
    for y in range(geom.height):
        for x in range(geom.width):
            px, py = (x - ax) / scale, (y - ay) / scale
            r = math.hypot(px, py)
            c_left = left[0] * py - left[1] * px
            c_right = px * right[1] - py * right[0]
            mask[y, x] = r_lo <= r <= r_hi and c_left <= 1e-12 and c_right <= 1e-12
    return mask


def test_wedge_zero_frame():
    assert not render_wedge(np.zeros((16, 40)), GEOM).any()


def test_wedge_constant_frame_fills_sector_exactly():
    img = render_wedge(np.full((16, 40), 255.0), GEOM)
    oracle = sector_mask(GEOM, 40)
    assert set(np.unique(img)) == {0.0, 255.0}
    inside = img == 255.0
    assert inside.sum() == oracle.sum()
    assert np.array_equal(inside, oracle)


def test_wedge_first_scanline_is_left_edge():
    frame = np.zeros((16, 40))
    frame[0] = 255.0
    img = render_wedge(frame, GEOM)
    ax, ay, _ = GEOM.layout(40)
    ys, xs = np.nonzero(img > 0)
    assert len(xs) > 0
    theta = np.degrees(np.arctan2(xs - ax, ys - ay))
    spacing = GEOM.field_of_view / 15
    assert np.all(theta <= -GEOM.field_of_view / 2 + spacing + 1e-9)
    assert np.all(xs < ax)


def test_wedge_geometry_validation():
    for fov in (0, 180, -5, 200):
        with pytest.raises(InvalidArgumentError):
            WedgeGeometry(field_of_view=fov)


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(13, 17))
    img[0, :4] = [9, 10, 13, 32]  # whitespace byte values right after the header
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_codec_is_immutable(codec_and_data):
    codec, _ = codec_and_data
    assert isinstance(codec, PcaCodec)
    with pytest.raises(Exception):
        codec.mean = None
