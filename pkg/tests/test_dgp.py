import numpy as np
import numpy.testing as npt
import pytest
from scipy.stats import norm

from tailq.core import Dataset, Policy
from tailq.dgp import (DgpSpec, TINY_P_A1, history_scores, lag_weights, oracle_capo, oracle_cate, oracle_propensity,
                       oracle_q, propensity_matrix, simulate, simulate_expanded, simulate_forced, simulate_limited,
                       simulate_tiny, tiny_exhaustive_capo, tiny_full_histories, tiny_ice_capo)


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(tau=1), dict(variant="bogus"), dict(noise_sd_a=-0.1), dict(omega=(1, 2))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DgpSpec(**kw)

    def test_defaults(self):
        s = DgpSpec()
        assert (s.tau, s.lag, s.d_L) == (15, 8, 11)
        assert s.omega == (0.37, 0.42, 0.29)
        assert DgpSpec("expanded").d_L == 16

    def test_dict_roundtrip(self):
        s = DgpSpec("expanded", tau=7, seed=9)
        assert DgpSpec.from_dict(s.to_dict()) == s


def test_lag_weights():
    npt.assert_allclose(lag_weights(4), [-1.0, 0.5, -1.0 / 3.0, 0.25])


class TestSimulate:
    def test_shapes_full_scale(self):
        ds = simulate(DgpSpec(seed=1), 1000)
        assert ds.L.shape == (1000, 15, 11)

    @pytest.mark.parametrize("variant", ["limited", "expanded", "tiny"])
    def test_seed_determinism(self, variant):
        spec = DgpSpec.tiny(4) if variant == "tiny" else DgpSpec(variant, tau=6, seed=4)
        a, b = simulate(spec, 50), simulate(spec, 50)
        assert a.L.tobytes() == b.L.tobytes() and a.A.tobytes() == b.A.tobytes() and a.Y.tobytes() == b.Y.tobytes()
        c = simulate(spec.with_seed(5), 50)
        assert not c.equals(a)

    def test_prefix_stability(self):
        spec = DgpSpec("limited", tau=4, seed=2)
        npt.assert_array_equal(simulate(spec, 2000).L[:100], simulate(spec, 100).L)

    def test_zero_covariates_closed_form(self):
        spec = DgpSpec("limited", tau=15, noise_sd_a=0.0, noise_sd_y=0.0)
        n = 20
        ds = simulate_limited(spec, n, X_exo=np.zeros((n, 15, 10)))
        w = np.array([(-1.0) ** i / i for i in range(1, 9)])
        expected = 5.0 * np.tanh(1.0) * w.sum()
        npt.assert_allclose(expected, -2.4162481257406108, rtol=1e-14)
        npt.assert_allclose(ds.Y, expected, rtol=1e-12)

    def test_y_packed_in_next_step(self, small_ds):
        npt.assert_array_equal(small_ds.L[:, 0, -1], 0.0)

    def test_expanded_omega2_zero_decouples_z(self):
        spec = DgpSpec("expanded", tau=6, omega=(0.37, 0.0, 0.29), seed=8)
        z1 = simulate_forced(spec, 40, [1] * 6).L[:, :, 10:15]
        z0 = simulate_forced(spec, 40, [0, 1, 0, 1, 0, 0]).L[:, :, 10:15]
        npt.assert_array_equal(z1, z0)
        spec2 = DgpSpec("expanded", tau=6, seed=8)
        z1 = simulate_forced(spec2, 40, [1] * 6).L[:, :, 10:15]
        z0 = simulate_forced(spec2, 40, [0] * 6).L[:, :, 10:15]
        assert not np.allclose(z1, z0)

    def test_expanded_shape(self):
        assert simulate_expanded(DgpSpec("expanded", tau=5), 10).L.shape == (10, 5, 16)


class TestPropensity:
    def test_zero_score_half(self):
        assert norm.cdf(0.0) == 0.5

    def test_matches_empirical_frequency(self):
        spec = DgpSpec("limited", tau=5, seed=13)
        ds = simulate(spec, 100_000)
        p = propensity_matrix(spec, ds)
        t = 3
        bins = np.quantile(p[:, t], np.linspace(0, 1, 9))
        idx = np.clip(np.digitize(p[:, t], bins[1:-1]), 0, 7)
        for b in range(8):
            m = idx == b
            freq = ds.A[m, t].mean()
            pbar = p[m, t].mean()
            band = 3.0 * np.sqrt(max(pbar * (1 - pbar), 1e-4) / m.sum())
            assert abs(freq - pbar) < band + 0.01

    def test_history_view_masks_future(self, small_spec, small_ds):
        P = propensity_matrix(small_spec, small_ds)
        for i, t in [(0, 1), (5, 3), (9, 5)]:
            npt.assert_allclose(oracle_propensity(small_spec, small_ds.history(i, t)), P[i, t - 1], rtol=1e-12)

    def test_tiny_table_readback(self, tiny_spec):
        ds = tiny_full_histories()
        P = propensity_matrix(tiny_spec, ds)
        npt.assert_array_equal(P[:, 0], np.asarray(TINY_P_A1)[ds.L[:, 0, 0].astype(int)])

    def test_scores_positive_probability(self, small_spec, small_ds):
        P = propensity_matrix(small_spec, small_ds)
        npt.assert_allclose(P, norm.cdf(history_scores(small_spec, small_ds) / 0.5))


class TestTiny:
    def test_sixteen_histories(self):
        assert tiny_full_histories().n == 16

    @pytest.mark.parametrize("pol", [Policy.fixed([1, 1]), Policy.fixed([0, 1]), Policy.threshold([0.5, 0.5])])
    def test_exhaustive_vs_monte_carlo(self, tiny_spec, pol):
        exact = oracle_capo(tiny_spec, pol)
        mc = oracle_capo(tiny_spec, pol, n_mc=100_000, method="monte_carlo")
        assert exact.method == "exhaustive" and exact.mc_std_error == 0.0
        assert abs(mc.value - exact.value) < 3 * mc.mc_std_error

    @pytest.mark.parametrize("pol", [Policy.fixed([1, 0]), Policy.threshold([0.4, 0.6])])
    def test_ice_equals_enumeration(self, pol):
        npt.assert_allclose(tiny_ice_capo(pol), tiny_exhaustive_capo(pol), atol=1e-15)

    def test_tiny_simulation_binary(self, tiny_spec):
        ds = simulate_tiny(tiny_spec, 500)
        assert set(np.unique(ds.L)) <= {0.0, 1.0}
        assert set(np.unique(ds.Y)) <= {0.0, 1.0}


class TestOracles:
    def test_identical_policies_zero_cate(self, small_spec):
        p = Policy.constant_threshold(0.5, 5)
        q = Policy.constant_threshold(0.5, 5, "copy")
        assert oracle_cate(small_spec, p, q, n_mc=2000).value == 0.0
        assert oracle_capo(small_spec, p, 2000, seed=1) == oracle_capo(small_spec, q, 2000, seed=1)

    def test_antisymmetry(self, small_spec):
        p, q = Policy.fixed([1] * 5), Policy.fixed([0] * 5)
        assert oracle_cate(small_spec, p, q, 4000).value == -oracle_cate(small_spec, q, p, 4000).value

    def test_se_scaling(self, small_spec):
        p = Policy.constant_threshold(0.5, 5)
        r = [oracle_capo(small_spec, p, 4000, seed=s).mc_std_error / oracle_capo(small_spec, p, 16000, seed=s).mc_std_error
             for s in range(3)]
        npt.assert_allclose(np.mean(r), 2.0, rtol=0.2)

    def test_behavior_consistency(self):
        spec = DgpSpec("limited", tau=5, seed=21)
        ds = simulate(spec, 50_000)
        o = oracle_capo(spec, Policy.behavior(), 50_000, seed=99)
        se = np.hypot(o.mc_std_error, ds.Y.std() / np.sqrt(ds.n))
        assert abs(o.value - ds.Y.mean()) < 4 * se

    def test_oracle_q_terminal_is_conditional_mean(self, small_spec, small_ds):
        q = oracle_q(small_spec, small_ds.subset(range(5)), 5, Policy.fixed([1] * 5), n_mc=4000)
        assert q.shape == (5,)
        assert np.all(np.isfinite(q))

    def test_oracle_q_tiny_exact(self, tiny_spec):
        pol = Policy.fixed([1, 1])
        ds = tiny_full_histories()
        q1 = oracle_q(tiny_spec, ds, 1, pol, actions=np.ones(16))
        npt.assert_allclose(np.mean(q1[ds.L[:, 0, 0] == 1]) * 0.4 + np.mean(q1[ds.L[:, 0, 0] == 0]) * 0.6,
                            tiny_exhaustive_capo(pol), atol=1e-14)
