import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.grid import (
    GridSpec,
    NormStats,
    StateField,
    VariableRegistry,
    compute_norm_stats,
    denormalize,
    latitude_weights,
    normalize,
    standard_registry,
    tp_inverse,
    tp_transform,
    transform_state,
    untransform_state,
)

TS = dt.datetime(2021, 1, 1)


def small_registry():
    return VariableRegistry(
        surface_vars=("MSLP", "TP"),
        pressure_vars=("U", "T"),
        levels=(500, 850),
    )


class TestGridSpec:
    def test_regular_shape(self):
        g = GridSpec.regular(32, 64)
        assert g.n_lat == 32 and g.n_lon == 64
        assert g.latitudes[0] == 90.0 and g.latitudes[-1] == -90.0
        assert g.lon_spacing == pytest.approx(5.625)

    def test_rejects_nonuniform_longitudes(self):
        lons = np.array([0.0, 1.0, 2.5, 3.0])
        with pytest.raises(ValueError, match="uniform"):
            GridSpec(np.array([10.0, 0.0]), lons)

    def test_rejects_tiny_grids(self):
        with pytest.raises(ValueError):
            GridSpec(np.array([0.0]), np.arange(4) * 90.0)
        with pytest.raises(ValueError):
            GridSpec(np.array([10.0, 0.0]), np.arange(3) * 120.0)

    def test_rejects_nonmonotone_latitudes(self):
        with pytest.raises(ValueError, match="monotone"):
            GridSpec(np.array([0.0, 10.0, 5.0]), np.arange(4) * 90.0)


class TestRegistry:
    def test_channel_layout(self):
        reg = small_registry()
        assert reg.n_channels == 2 + 2 * 2
        assert reg.channel_names == ("MSLP", "TP", "U500", "U850", "T500", "T850")
        assert reg.channel_index("T500") == 4
        assert reg.pressure_channel_index("U", 850) == 3

    def test_levels_monotone(self):
        with pytest.raises(ValueError, match="increasing"):
            VariableRegistry((), ("U",), (850, 500))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            VariableRegistry(("U",), ("U",), (500,))

    def test_standard_registry_has_71_channels(self):
        assert standard_registry().n_channels == 71

    def test_channel_levels(self):
        levels = small_registry().channel_levels()
        assert np.isnan(levels[:2]).all()
        assert levels[2:].tolist() == [500, 850, 500, 850]


class TestLatitudeWeights:
    def test_single_row_is_one(self):
        assert latitude_weights(np.array([0.0])) == pytest.approx([1.0])

    def test_unit_mean_exact(self):
        for n in (2, 3, 32, 181):
            w = latitude_weights(GridSpec.regular(n, 8))
            assert abs(w.mean() - 1.0) < 1e-12

    def test_unit_mean_over_full_grid(self):
        g = GridSpec.regular(17, 36)
        w2d = np.repeat(latitude_weights(g)[:, None], g.n_lon, axis=1)
        assert abs(w2d.mean() - 1.0) < 1e-12

    def test_cos_area_ratio(self):
        # rows at 60/0/-60 with midpoint edges: w(0)/w(60) == cos(0)/cos(60) == 2
        w = latitude_weights(np.array([60.0, 0.0, -60.0]))
        assert w[1] / w[0] == pytest.approx(2.0, abs=1e-12)

    def test_pole_rows_get_half_cells(self):
        g = GridSpec.regular(181, 360)
        w = latitude_weights(g)
        assert w[0] == w[-1]
        assert w[0] < w[90]  # pole half-cell is smaller than an equator cell


class TestNormStats:
    def test_two_state_hand_case(self):
        reg = small_registry()
        a = StateField(np.zeros((6, 2, 4), dtype=np.float32), TS)
        b = StateField(np.full((6, 2, 4), 2.0, dtype=np.float32), TS)
        stats = compute_norm_stats([a, b], reg)
        assert stats.mean == pytest.approx([1.0] * 6)
        assert stats.std == pytest.approx([1.0] * 6)  # population std of {0, 2}

    def test_zero_variance_names_channel(self):
        reg = small_registry()
        vals = np.random.default_rng(0).normal(size=(6, 2, 4))
        vals[3] = 7.0
        states = [StateField(vals, TS), StateField(vals + 0.0, TS)]
        states[1].values[0] += 1.0
        with pytest.raises(ValueError, match="U850"):
            compute_norm_stats(states, reg)

    def test_normalized_dataset_has_unit_stats(self):
        rng = np.random.default_rng(1)
        states = [StateField(rng.normal(2.0, 3.0, size=(4, 3, 8)), TS) for _ in range(5)]
        stats = compute_norm_stats(states)
        normed = [normalize(s, stats) for s in states]
        check = compute_norm_stats(normed)
        assert check.mean == pytest.approx([0.0] * 4, abs=1e-12)
        assert check.std == pytest.approx([1.0] * 4, abs=1e-12)

    def test_positive_std_enforced(self):
        with pytest.raises(ValueError, match="positive"):
            NormStats(np.zeros(2), np.array([1.0, 0.0]))


class TestNormalize:
    def test_mean_maps_to_zero_and_sigma_to_one(self):
        stats = NormStats(np.array([5.0]), np.array([2.0]))
        s = StateField(np.full((1, 2, 4), 5.0), TS)
        assert np.all(normalize(s, stats).values == 0.0)
        s2 = StateField(np.full((1, 2, 4), 7.0), TS)
        assert np.all(normalize(s2, stats).values == 1.0)

    def test_flag_mismatch_raises(self):
        stats = NormStats(np.zeros(1), np.ones(1))
        s = StateField(np.ones((1, 2, 4)), TS, normalized=True)
        with pytest.raises(ValueError, match="already"):
            normalize(s, stats)
        with pytest.raises(ValueError, match="not normalized"):
            denormalize(StateField(np.ones((1, 2, 4)), TS), stats)

    @given(
        mean=st.floats(-100, 100),
        std=st.floats(0.01, 100),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_property(self, mean, std, seed):
        stats = NormStats(np.array([mean]), np.array([std]))
        vals = np.random.default_rng(seed).normal(mean, std, size=(1, 2, 4))
        s = StateField(vals, TS)
        back = denormalize(normalize(s, stats), stats)
        assert np.allclose(back.values, vals, rtol=1e-10, atol=1e-10 * std)


class TestTpTransform:
    def test_zero_maps_to_zero(self):
        assert tp_transform(0.0) == 0.0
        assert tp_inverse(0.0) == 0.0

    def test_unit_value_closed_form(self):
        # 10*log10(201), evaluated with 30-digit arithmetic
        assert tp_transform(1.0) == pytest.approx(23.0319605742048887, rel=1e-14)

    def test_roundtrip_at_half_centimeter(self):
        assert tp_inverse(tp_transform(0.005)) == pytest.approx(0.005, rel=1e-10)

    def test_monotone(self):
        x = np.linspace(0, 10, 200)
        assert np.all(np.diff(tp_transform(x)) > 0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            tp_transform(-1e-9)
        with pytest.raises(ValueError):
            tp_inverse(-1e-9)

    @given(st.floats(0, 10))
    @settings(max_examples=100, deadline=None)
    def test_roundtrip_property(self, x):
        back = float(tp_inverse(tp_transform(x)))
        assert back == pytest.approx(x, rel=1e-8, abs=1e-12)

    def test_state_transform_targets_tp_only(self):
        reg = small_registry()
        vals = np.abs(np.random.default_rng(0).normal(size=(6, 2, 4)))
        s = StateField(vals, TS)
        out = transform_state(s, reg)
        assert np.array_equal(out.values[0], vals[0])  # MSLP untouched
        assert np.allclose(out.values[1], tp_transform(vals[1]))
        back = untransform_state(out, reg)
        assert np.allclose(back.values, vals, rtol=1e-7)


class TestStateField:
    def test_rejects_nonfinite(self):
        bad = np.ones((1, 2, 4))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            StateField(bad, TS)

    def test_validate_shape(self):
        reg = small_registry()
        g = GridSpec.regular(4, 8)
        s = StateField(np.zeros((6, 4, 8)), TS)
        s.validate(g, reg)
        with pytest.raises(ValueError, match="shape"):
            StateField(np.zeros((5, 4, 8)), TS).validate(g, reg)
