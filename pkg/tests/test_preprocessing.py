import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepds.datacube import StaticFieldSet
from deepds.preprocessing import (
    PairingConfig,
    ScalerState,
    bicubic_baseline,
    bicubic_resize,
    coarsen,
    fit_scaler,
    inverse_transform,
    make_pairs,
    mask_from_nans,
    split_samples,
    transform,
)

from conftest import make_cube


def brute_block_mean(field, s):
    """Loop oracle: NaN-aware mean of each s x s block of a 2-D field."""
    ny, nx = field.shape
    out = np.empty((ny // s, nx // s))
    for i in range(ny // s):
        for j in range(nx // s):
            vals = [field[i * s + a, j * s + b] for a in range(s) for b in range(s)]
            vals = [v for v in vals if not np.isnan(v)]
            out[i, j] = sum(vals) / len(vals) if vals else np.nan
    return out


# --- scalers --------------------------------------------------------------


def test_fit_standard_ignores_nan():
    st_ = fit_scaler("standard", np.array([1.0, np.nan, 3.0]))
    assert st_.mean == 2.0
    assert st_.std == pytest.approx(np.sqrt(((1 - 2) ** 2 + (3 - 2) ** 2) / 2), abs=1e-15)


def test_fit_minmax():
    s = fit_scaler("minmax", [2.0, 4.0, 6.0])
    assert (s.min, s.max) == (2.0, 6.0)
    np.testing.assert_array_equal(transform(s, np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])
    assert inverse_transform(s, np.array(1.0)) == 6.0


def test_fit_all_nan():
    with pytest.raises(ValueError, match="no valid data"):
        fit_scaler("standard", np.full(4, np.nan))


def test_standardized_training_cube(rng):
    values = rng.normal(5, 3, (10, 4, 4))
    values[0, 0, 0] = np.nan
    cube = make_cube(values)
    s = fit_scaler("standard", cube)
    out = transform(s, cube).values
    assert np.isnan(out[0, 0, 0])
    assert np.nanmean(out) == pytest.approx(0.0, abs=1e-12)
    assert np.nanstd(out) == pytest.approx(1.0, abs=1e-12)


def test_inverse_at_origin():
    s = ScalerState("standard", mean=10.0, std=2.0, fitted=True)
    assert s.inverse_transform(0.0) == 10.0


def test_unfitted_scaler():
    s = ScalerState("standard")
    with pytest.raises(RuntimeError, match="scaler not fitted"):
        s.transform(np.zeros(2))
    with pytest.raises(RuntimeError, match="scaler not fitted"):
        inverse_transform(s, np.zeros(2))


def test_scaler_is_immutable():
    s = fit_scaler("standard", [1.0, 2.0])
    with pytest.raises(Exception):
        s.mean = 3.0


@pytest.mark.parametrize("kind", ["standard", "minmax"])
def test_scaler_text_roundtrip(tmp_path, kind):
    s = fit_scaler(kind, np.array([0.1, 0.7, 3.3]))
    back = ScalerState.load(s.save(tmp_path / "scaler.txt"))
    assert back == s


@given(
    data=st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=50),
    kind=st.sampled_from(["standard", "minmax"]),
)
@settings(max_examples=80, deadline=None)
def test_scaler_inverse_identity(data, kind):
    arr = np.array(data)
    if arr.max() - arr.min() < 1e-3:
        return
    s = fit_scaler(kind, arr)
    back = s.inverse_transform(s.transform(arr))
    np.testing.assert_allclose(back, arr, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(arr).max()))


# --- coarsen --------------------------------------------------------------


def test_coarsen_2x2():
    np.testing.assert_array_equal(coarsen(np.array([[1.0, 2.0], [3.0, 4.0]]), 2), [[2.5]])


def test_coarsen_constant():
    out = coarsen(np.full((3, 8, 6), 4.5), 2)
    assert out.shape == (3, 4, 3)
    np.testing.assert_array_equal(out, 4.5)


def test_coarsen_incompatible():
    with pytest.raises(ValueError, match="incompatible scale"):
        coarsen(np.zeros((5, 5)), 2)


@given(s=st.sampled_from([2, 3, 4]), by=st.integers(1, 4), bx=st.integers(1, 4), seed=st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_coarsen_matches_brute_force(s, by, bx, seed):
    r = np.random.default_rng(seed)
    field = r.standard_normal((by * s, bx * s))
    field[r.random(field.shape) < 0.2] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        np.testing.assert_allclose(coarsen(field, s), brute_block_mean(field, s), rtol=0, atol=1e-13, equal_nan=True)


def test_coarsen_all_nan_block():
    f = np.ones((4, 4))
    f[:2, :2] = np.nan
    out = coarsen(f, 2)
    assert np.isnan(out[0, 0]) and np.isfinite(out).sum() == 3


# --- masks ----------------------------------------------------------------


def test_mask_from_nans():
    m, drop = mask_from_nans(np.ones((3, 3, 1)))
    assert m.all() and not drop
    v = np.ones((3, 3, 1))
    v[1, 2, 0] = np.nan
    m, drop = mask_from_nans(v)
    assert (~m).sum() == 1 and not m[1, 2, 0] and not drop
    m, drop = mask_from_nans(np.full((2, 2, 1), np.nan))
    assert not m.any() and drop


# --- pairing --------------------------------------------------------------


def _hr(t=12, ny=60, nx=80, seed=0):
    return make_cube(np.random.default_rng(seed).standard_normal((t, ny, nx)), lat=np.arange(ny) * 0.1, lon=np.arange(nx) * 0.1)


def test_pairs_spc_shapes():
    pairs = make_pairs(_hr(), None, [], None, PairingConfig(regime="PerfectProg", upsampling="SPC", scale=4))
    assert len(pairs) == 12
    assert pairs[0].lr_input.shape == (15, 20, 1)
    assert pairs[0].hr_target.shape == (60, 80, 1)


def test_pairs_pin_is_bicubic_of_coarsened():
    hr = _hr(t=3)
    pairs = make_pairs(hr, None, [], None, PairingConfig(upsampling="PIN", scale=4))
    assert pairs[0].lr_input.shape == (60, 80, 1)
    expected = bicubic_resize(coarsen(hr.values[1], 4), (60, 80))
    np.testing.assert_array_equal(pairs[1].lr_input[..., 0], expected)
    np.testing.assert_array_equal(bicubic_baseline(pairs[1], PairingConfig(upsampling="PIN")), expected)


def test_pairs_perfectprog_consistency():
    hr = _hr(t=20, ny=16, nx=24)
    for p in make_pairs(hr, None, [], None, PairingConfig(scale=4)):
        assert np.array_equal(coarsen(p.hr_target[..., 0], 4), p.lr_input[..., 0])


def test_pairs_spatiotemporal_windows():
    hr = _hr(t=100, ny=8, nx=8)
    cfg = PairingConfig(scale=2, sample_kind="spatiotemporal", window_length=8)
    pairs = make_pairs(hr, None, [], None, cfg)
    assert len(pairs) == 100 - 8 + 1 == 93
    assert pairs[0].lr_input.shape == (8, 4, 4, 1)
    assert pairs[0].time_index == 7
    np.testing.assert_array_equal(pairs[0].hr_target[..., 0], hr.values[7])
    # consecutive windows share w-1 frames
    for a, b in zip(pairs[:-1], pairs[1:]):
        np.testing.assert_array_equal(a.lr_input[1:], b.lr_input[:-1])


def test_pairs_mos_and_errors():
    hr = _hr(t=5, ny=8, nx=8)
    lr = make_cube(np.zeros((5, 2, 2)))
    pairs = make_pairs(hr, lr, [], None, PairingConfig(regime="MOS", scale=4))
    np.testing.assert_array_equal(pairs[0].lr_input[..., 0], 0.0)
    with pytest.raises(ValueError, match="conflicting inputs"):
        make_pairs(hr, lr, [], None, PairingConfig(regime="PerfectProg", scale=4))
    with pytest.raises(ValueError, match="MOS regime requires"):
        make_pairs(hr, None, [], None, PairingConfig(regime="MOS", scale=4))
    shifted = make_cube(np.zeros((5, 2, 2)), time=np.arange(5.0) + 1)
    with pytest.raises(ValueError, match="unaligned cubes"):
        make_pairs(hr, shifted, [], None, PairingConfig(regime="MOS", scale=4))
    with pytest.raises(ValueError, match="incompatible scale"):
        make_pairs(hr, None, [], None, PairingConfig(scale=3))


def test_pairs_predictors_and_statics():
    hr = make_cube(np.ones((4, 8, 8)), lat=np.arange(8.0), lon=np.arange(8.0))
    # coarse predictor grid spans the hull so the LR cell centres (0.5, 2.5, ...) are in range
    pred = make_cube(np.broadcast_to(np.linspace(0, 7, 4), (4, 4, 4)).copy(), lat=np.linspace(0, 7, 4), lon=np.linspace(0, 7, 4))
    statics = StaticFieldSet(np.arange(64.0).reshape(8, 8, 1), ["elev"])
    pairs = make_pairs(hr, None, [pred], statics, PairingConfig(scale=2))
    x = pairs[0].lr_input
    assert x.shape == (4, 4, 3)
    # affine predictor regridded to LR cell centres
    np.testing.assert_allclose(x[0, :, 1], [0.5, 2.5, 4.5, 6.5], atol=1e-12)
    np.testing.assert_array_equal(x[..., 2], coarsen(statics.fields[..., 0], 2))
    assert pairs[0].statics.shape == (8, 8, 1)


def test_pairs_nan_target_masked_and_dropped():
    v = np.ones((3, 4, 4))
    v[0] = np.nan
    v[1, 0, 0] = np.nan
    with pytest.warns(UserWarning, match="sample dropped"):
        pairs = make_pairs(make_cube(v), None, [], None, PairingConfig(scale=2))
    assert [p.time_index for p in pairs] == [1, 2]
    assert not pairs[0].mask[0, 0, 0] and pairs[0].mask.sum() == 15
    assert np.isfinite(pairs[0].hr_target).all()
    assert np.isfinite(pairs[0].lr_input).all()


def test_split_samples_trailing():
    pairs = make_pairs(_hr(t=10, ny=8, nx=8), None, [], None, PairingConfig(scale=2))
    train, val = split_samples(pairs, 0.2)
    assert [p.time_index for p in val] == [8, 9]
    assert val.split == "validation" and len(train) == 8
