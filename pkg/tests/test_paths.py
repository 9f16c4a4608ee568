import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.paths import (
    PathParams,
    dynamic_path_sample,
    ot_path_sample,
    path_table,
    path_tables_agree,
)


def rand_pair(seed, n=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=n), rng.normal(size=n)


class TestPathParams:
    def test_zero_sigma_only_for_dynamic(self):
        PathParams("DynamicTransport", 0.0)
        with pytest.raises(ValueError):
            PathParams("OptimalTransport", 0.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PathParams("Diffusion", 0.1)


class TestOtPath:
    def test_boundary_conditions(self):
        x0, x1 = rand_pair(0)
        assert np.array_equal(ot_path_sample(x0, x1, 0.0, 0.0).x_t, x0)
        assert np.array_equal(ot_path_sample(x0, x1, 1.0, 0.0).x_t, x1)

    def test_target_at_zero_sigma(self):
        x0, x1 = rand_pair(1)
        for t in (0.0, 0.3, 0.9):
            s = ot_path_sample(x0, x1, t, 0.0)
            assert np.allclose(s.u_target, x1 - x0, atol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            ot_path_sample(np.zeros(3), np.zeros(4), 0.5, 0.1)

    def test_sigma_one_t_zero_is_pure_noise(self):
        x0, x1 = rand_pair(2)
        tab = path_table("OptimalTransport", x0, x1, 0.0, 1.0)
        assert np.array_equal(tab["psi"], x0)
        assert tab["sigma"] == 1.0


class TestDynamicPath:
    def test_endpoints(self):
        x0, x1 = rand_pair(3)
        assert np.array_equal(dynamic_path_sample(x0, x1, 0.0).x_t, x0)
        assert np.array_equal(dynamic_path_sample(x0, x1, 1.0).x_t, x1)

    def test_equal_states_zero_velocity(self):
        x0, _ = rand_pair(4)
        for t in (0.0, 0.5, 1.0):
            assert np.all(dynamic_path_sample(x0, x0.copy(), t).u_target == 0.0)

    def test_target_independent_of_t(self):
        x0, x1 = rand_pair(5)
        a = dynamic_path_sample(x0, x1, 0.1)
        b = dynamic_path_sample(x0, x1, 0.9)
        assert np.array_equal(a.u_target, b.u_target)
        assert np.array_equal(a.u_target, x1 - x0)  # bitwise for exact inputs

    def test_noise_contract(self):
        x0, x1 = rand_pair(6)
        with pytest.raises(ValueError, match="noise"):
            dynamic_path_sample(x0, x1, 0.5, sigma_min=0.1)
        s = dynamic_path_sample(x0, x1, 0.5, sigma_min=0.1, noise=np.ones(8))
        assert np.allclose(s.x_t, 0.5 * (x0 + x1) + 0.1)

    def test_sigma_is_constant(self):
        x0, x1 = rand_pair(7)
        for t in (0.0, 0.4, 1.0):
            assert path_table("DynamicTransport", x0, x1, t, 0.07)["sigma"] == 0.07


class TestTableOracle:
    def test_tables_agree(self):
        assert path_tables_agree(n_trials=100, n=8, seed=0, tol=1e-12)

    @given(t=st.floats(0, 1), seed=st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_flow_derivative_matches_velocity(self, t, seed):
        # d/dt psi_t(x0) by central differences equals the table's u_t(psi_t)
        x0, x1 = rand_pair(seed)
        h = 1e-4
        tl, tr = max(0.0, t - h), min(1.0, t + h)
        for kind, sig in (("OptimalTransport", 0.35), ("DynamicTransport", 0.0),
                          ("DynamicTransport", 0.2)):
            pl = path_table(kind, x0, x1, tl, sig)["psi"]
            pr = path_table(kind, x0, x1, tr, sig)["psi"]
            fd = (pr - pl) / (tr - tl)
            u = path_table(kind, x0, x1, t, sig)["u_at_psi"]
            assert np.allclose(fd, u, rtol=1e-6, atol=1e-9)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_x_t_affine_in_t(self, seed):
        # second central difference in t vanishes
        x0, x1 = rand_pair(seed)
        h = 0.25
        for kind, sig in (("OptimalTransport", 0.1), ("DynamicTransport", 0.0)):
            f = [path_table(kind, x0, x1, t, sig)["psi"] for t in (0.25, 0.5, 0.75)]
            second = f[0] - 2 * f[1] + f[2]
            assert np.max(np.abs(second)) < 1e-12
