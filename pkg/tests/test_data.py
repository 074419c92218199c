import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudcam import data as D
from cloudcam.errors import BadMagicError, ConfigError, DomainError, FormatError, ShapeError, TruncatedFileError
from cloudcam.ipa import ipa_retrieve_profile
from cloudcam.losses import mae


def test_generate_invariants():
    p = D.generate_profile(3, 64, 80)
    assert p.cot.shape == p.cer.shape == (64, 80)
    cloudy = p.cot > 0
    assert np.all(p.cot >= 0)
    assert np.array_equal(p.cer == 0, ~cloudy)
    assert np.all((p.cer[cloudy] >= 5) & (p.cer[cloudy] <= 30))


def test_generate_deterministic():
    a, b = D.generate_profile(11), D.generate_profile(11)
    assert np.array_equal(a.cot, b.cot) and np.array_equal(a.cer, b.cer)
    assert not np.array_equal(a.cot, D.generate_profile(12).cot)


def test_zero_sigma_gives_constant_cot():
    p = D.generate_profile(0, 64, 64, D.GenParams(sigma=0.0))
    assert np.all(p.cot[p.cot > 0] == np.exp(1.0))


def test_cloud_fraction_over_seeds():
    frac = np.mean([np.mean(D.generate_profile(s, 64, 64).cot > 0) for s in range(100)])
    assert abs(frac - 0.6) <= 0.05


def test_generate_rejects_small_dims():
    with pytest.raises(ConfigError):
        D.generate_profile(0, 32, 64)


def test_grf_spectrum_slope():
    # radially averaged power of a slope-3 field falls roughly as k^-3
    rng = np.random.default_rng(0)
    n = 256
    pw = np.zeros(n // 2)
    for _ in range(8):
        g = D.gaussian_random_field(rng, n, n, 3.0)
        f = np.abs(np.fft.fft2(g)) ** 2
        k = np.hypot(*np.meshgrid(np.fft.fftfreq(n), np.fft.fftfreq(n), indexing="ij")) * n
        for b in range(1, n // 2):
            pw[b] += f[(k >= b) & (k < b + 1)].mean()
    bins = np.arange(4, 64)
    slope = np.polyfit(np.log(bins), np.log(pw[bins]), 1)[0]
    assert -3.4 < slope < -2.6


def test_forward_reference_values():
    p = D.ForwardModelParams(effect3d_eta=0.0)
    rad = D.forward_radiance(np.array([[10.0]]), np.array([[10.0]]), p)
    r066 = 0.05 + 0.95 * 10.0 / 17.0
    assert rad[0, 0, 0] == pytest.approx(r066, rel=1e-14)
    assert rad[1, 0, 0] == pytest.approx(r066 * np.exp(-0.6), rel=1e-14)
    assert round(rad[0, 0, 0], 4) == 0.6088 and round(rad[1, 0, 0], 4) == 0.3341


def test_forward_clear_and_half_saturation():
    rad = D.forward_radiance(np.zeros((2, 2)), np.zeros((2, 2)), D.ForwardModelParams(effect3d_eta=0.0))
    assert np.all(rad == 0.05)
    rad = D.forward_radiance(np.full((1, 1), 7.0), np.full((1, 1), 10.0),
                             D.ForwardModelParams(albedo=0.0, effect3d_eta=0.0))
    assert rad[0, 0, 0] == 0.5


def test_forward_monotone():
    p = D.ForwardModelParams(effect3d_eta=0.0)
    tau = np.geomspace(0.01, 200, 300)[None, :]
    r = D.forward_radiance(tau, np.full_like(tau, 12.0), p)
    assert np.all(np.diff(r[0, 0]) > 0)
    re = np.linspace(5, 30, 300)[None, :]
    r = D.forward_radiance(np.full_like(re, 8.0), re, p)
    assert np.all(np.diff(r[1, 0] / r[0, 0]) < 0)


def test_forward_errors():
    with pytest.raises(DomainError):
        D.forward_radiance(-np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        D.forward_radiance(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ConfigError):
        D.forward_radiance(np.ones((2, 2)), np.ones((2, 2)), D.ForwardModelParams(gamma=0.0))


def test_3d_effect_formula():
    rad = 0.2 + np.arange(12.0).reshape(1, 1, 12) / 24.0
    out = D.apply_3d_effect(rad, 0.3, 2)
    for j in range(12):
        jj = min(j + 2, 11)
        assert out[0, 0, j] == pytest.approx(rad[0, 0, j] + 0.3 * (rad[0, 0, j] - rad[0, 0, jj]))
    assert np.all(D.apply_3d_effect(np.array([[[0.0, 1.4]]]), 0.9, 1) == [[[0.0, 1.4]]])
    assert D.apply_3d_effect(np.array([[[1.4, 0.0]]]), 0.9, 1)[0, 0, 0] == 1.5


def test_transforms():
    assert D.transform_cot(0.0) == 0.0
    assert D.transform_cot(np.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert D.scale_cer(30.0) == 1.0 and D.scale_cer(60.0) == 2.0
    rng = np.random.default_rng(0)
    x = rng.lognormal(1, 1.5, 1000)
    np.testing.assert_allclose(D.inverse_transform_cot(D.transform_cot(x)), x, rtol=1e-12)
    np.testing.assert_allclose(D.unscale_cer(D.scale_cer(x)), x, rtol=1e-15)
    with pytest.raises(DomainError):
        D.transform_cot(-1.0)
    with pytest.raises(DomainError):
        D.inverse_transform_cot(-0.1)
    with pytest.raises(DomainError):
        D.scale_cer(-1.0)
    np.testing.assert_allclose(D.predicted_cot(np.array([-0.2, 0.0, 1.0])), [0.0, 0.0, np.e - 1], rtol=1e-15)


@pytest.mark.parametrize("h,w,window,stride,rows,cols", [
    (144, 144, 64, 40, [0, 40, 80], [0, 40, 80]),
    (64, 64, 64, 40, [0], [0]),
    (100, 100, 64, 64, [0, 36], [0, 36]),
    (100, 64, 64, 40, [0, 36], [0]),
])
def test_tile_offsets(h, w, window, stride, rows, cols):
    idx = D.build_tile_index(h, w, window, stride)
    assert list(idx) == [(r, c) for r in rows for c in cols]
    assert np.all(idx.coverage() >= 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(16, 90), st.integers(16, 90), st.integers(8, 16), st.integers(1, 16))
def test_tile_index_covers(h, w, window, stride):
    stride = min(stride, window)
    idx = D.build_tile_index(h, w, window, stride)
    assert np.all(idx.coverage() >= 1)
    assert all(r + window <= h and c + window <= w for r, c in idx)
    assert len(set(idx)) == len(idx)


def test_tile_index_errors():
    with pytest.raises(ConfigError):
        D.build_tile_index(60, 144, 64, 40)
    with pytest.raises(ConfigError):
        D.build_tile_index(144, 144, 64, 65)
    with pytest.raises(ConfigError):
        D.build_tile_index(144, 144, 64, 0)


def test_extract_pixels_match(rng):
    field = rng.normal(size=(2, 100, 90))
    idx = D.build_tile_index(100, 90, 32, 20)
    patches = D.extract_patches(field, idx)
    assert len(patches) == len(idx)
    for k, (r, c) in enumerate(idx):
        for _ in range(5):
            i, j = rng.integers(0, 32, 2)
            assert patches[k][1, i, j] == field[1, r + i, c + j]


def test_extract_single_tile_is_whole_field(rng):
    field = rng.normal(size=(2, 64, 64))
    (p,) = D.extract_patches(field, D.build_tile_index(64, 64))
    assert np.array_equal(p, field)


def test_extract_dim_mismatch():
    with pytest.raises(ShapeError):
        D.extract_patches(np.zeros((2, 100, 100)), D.build_tile_index(144, 144))


def test_identity_round_trip_144(rng):
    field = rng.normal(size=(144, 144))
    idx = D.build_tile_index(144, 144, 64, 40)
    assert len(idx) == 9
    out = D.aggregate_patches(D.extract_patches(field, idx), idx)
    assert np.max(np.abs(out - field)) <= 1e-12
    once = idx.coverage() == 1
    assert np.array_equal(out[once], field[once])


def test_aggregate_mean_of_overlaps():
    idx = D.TileIndex(((0, 0), (0, 0)), 4, 4, 4)
    out = D.aggregate_patches([np.ones((4, 4)), 3 * np.ones((1, 4, 4))], idx)
    assert np.all(out == 2.0)


def test_aggregate_brute_force(rng):
    idx = D.build_tile_index(50, 70, 16, 7)
    preds = [rng.normal(size=(16, 16)) for _ in idx]
    out = D.aggregate_patches(preds, idx)
    for i in range(0, 50, 7):
        for j in range(0, 70, 5):
            vals = [p[i - r, j - c] for p, (r, c) in zip(preds, idx) if r <= i < r + 16 and c <= j < c + 16]
            assert out[i, j] == pytest.approx(sum(vals) / len(vals), rel=1e-12)


def test_aggregate_errors():
    idx = D.build_tile_index(64, 64)
    with pytest.raises(ShapeError):
        D.aggregate_patches([], idx)
    with pytest.raises(ShapeError):
        D.aggregate_patches([np.zeros((32, 32))], idx)


def test_split():
    items = list(range(10))
    tr, va, te = D.split_dataset(items, (0.6, 0.2, 0.2), seed=1)
    assert (len(tr), len(va), len(te)) == (6, 2, 2)
    assert sorted(tr + va + te) == items
    assert (tr, va, te) == D.split_dataset(items, (0.6, 0.2, 0.2), seed=1)
    with pytest.raises(ConfigError):
        D.split_dataset(items[:2])
    with pytest.raises(ConfigError):
        D.split_dataset(items, (0.5, 0.5, 0.1))


def test_cpf_round_trip(tmp_path):
    prof = D.synth_profile(4, 64, 64)
    path = tmp_path / "a.cpf"
    D.write_profile(path, prof)
    first = path.read_bytes()
    assert first[:4] == b"CPF1" and len(first) == 16 + 4 * 64 * 64 * 4
    planes = D.read_profile(path)
    assert list(planes) == ["cot", "cer", "r066", "r213"]
    np.testing.assert_array_equal(planes["r066"], prof.radiance[0].astype(np.float32))
    D.write_profile(tmp_path / "b.cpf", planes)
    assert (tmp_path / "b.cpf").read_bytes() == first


def test_cpf_partial_planes():
    buf = D.profile_bytes({"cot": np.ones((3, 2)), "cer": np.zeros((3, 2))})
    assert buf[16] == 0b0011 and len(buf) == 17 + 2 * 6 * 4
    out = D.profile_from_bytes(buf)
    assert sorted(out) == ["cer", "cot"] and out["cot"].shape == (3, 2)
    assert D.profile_bytes(out) == buf


def test_cpf_row_major_layout():
    a = np.arange(6.0).reshape(2, 3)
    buf = D.profile_bytes({"cot": a})
    assert np.array_equal(np.frombuffer(buf[17:], dtype="<f4"), [0, 1, 2, 3, 4, 5])


def test_cpf_errors():
    good = D.profile_bytes({"cot": np.ones((2, 2))})
    with pytest.raises(TruncatedFileError):
        D.profile_from_bytes(b"")
    with pytest.raises(TruncatedFileError):
        D.profile_from_bytes(good[:-1])
    with pytest.raises(BadMagicError):
        D.profile_from_bytes(b"NOPE" + good[4:])
    with pytest.raises(FormatError):
        D.profile_from_bytes(good + b"\x00")


def test_3d_effect_increases_ipa_error():
    fwd0 = D.ForwardModelParams(effect3d_eta=0.0)
    fwd3 = D.ForwardModelParams(effect3d_eta=0.3)
    for seed in range(5):
        prof = D.generate_profile(seed, 64, 64)
        t = D.transform_cot(prof.cot)
        c0, r0, _ = ipa_retrieve_profile(D.forward_radiance(prof.cot, prof.cer, fwd0), fwd0)
        c3, r3, _ = ipa_retrieve_profile(D.forward_radiance(prof.cot, prof.cer, fwd3), fwd0)
        assert mae(t, c3) > mae(t, c0)
        assert mae(prof.cer, r3) > mae(prof.cer, r0)
