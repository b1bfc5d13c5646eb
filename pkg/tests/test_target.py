import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar
from scipy.special import expit

from tailq.core import Dataset, Policy
from tailq.dgp import DgpSpec, oracle_capo, simulate
from tailq.embed import make_embedding
from tailq.target import (DegenerateBoundsError, DegenerateSupportError, HorizonTooLongError, OutcomeScaler,
                          clever_weights, estimate_all, estimate_from_nuisances, ltmle, ltmle_from_nuisances,
                          oracle_nuisances, remainder_diagnostic, solve_epsilon)
from tailq.train import Nuisances, TrainConfig, train_peq


def _fluct_problem(seed, n=400):
    r = np.random.default_rng(seed)
    lo = r.normal(0, 1.0, n)
    y = r.uniform(0, 1, n)
    w = r.exponential(1.0, n) * (r.uniform(size=n) < 0.7)
    return lo, y, w


class TestSolveEpsilon:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_minimizer(self, seed):
        lo, y, w = _fluct_problem(seed)
        y = np.clip(y + 0.2, 0, 1)
        for lam in (0.0, 0.01):
            obj = lambda e: np.mean(w * (np.logaddexp(0, lo + e) - y * (lo + e))) + lam * abs(e)
            ref = minimize_scalar(obj, bounds=(-5, 5), method="bounded", options={"xatol": 1e-12}).x
            npt.assert_allclose(solve_epsilon(lo, y, w, lam), ref, atol=1e-6)

    def test_score_equation_at_zero_penalty(self):
        lo, y, w = _fluct_problem(7)
        e = solve_epsilon(lo, y, w, 0.0)
        assert abs(np.mean(w * (y - expit(lo + e)))) < 1e-12

    def test_exact_zero_for_large_penalty(self):
        lo, y, w = _fluct_problem(3)
        assert solve_epsilon(lo, y, w, 10.0) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_shrinks_in_lambda(self, seed):
        lo, y, w = _fluct_problem(seed, 200)
        eps = [abs(solve_epsilon(lo, y, w, lam)) for lam in (0.0, 0.01, 0.1, 1.0)]
        assert all(a >= b - 1e-9 for a, b in zip(eps, eps[1:]))

    def test_negative_lambda(self):
        lo, y, w = _fluct_problem(0)
        with pytest.raises(ValueError):
            solve_epsilon(lo, y, w, -1.0)


class TestScaler:
    def test_roundtrip(self):
        s = OutcomeScaler(-3.0, 2.0)
        v = np.linspace(-3, 2, 11)
        npt.assert_allclose(s.unscale(s.scale(v)), v, atol=1e-14)
        npt.assert_allclose(s.scale([-3.0, 2.0]), [s.delta, 1 - s.delta])

    def test_degenerate(self):
        with pytest.raises(DegenerateBoundsError):
            OutcomeScaler(1.0, 1.0)


def test_clever_weights_by_hand():
    A = np.array([[1, 1, 0], [0, 1, 1]])
    a_dot = np.array([[1, 1, 0], [1, 1, 1]])
    g = np.array([[0.5, 0.8, 0.25], [0.4, 0.5, 0.5]])
    w = clever_weights(A, a_dot, g, (0.01, 0.99))
    npt.assert_allclose(w[0], [2.0, 2.5, 2.5 / 0.75])
    npt.assert_array_equal(w[1], 0.0)
    with pytest.raises(ValueError):
        clever_weights(A, a_dot, g, (0.5, 0.2))


@pytest.fixture(scope="module")
def setup():
    spec = DgpSpec.tiny(seed=8)
    return spec, simulate(spec, 4000)


@pytest.fixture(scope="module")
def fitted():
    spec = DgpSpec("limited", tau=4, seed=2)
    ds = simulate(spec, 300)
    pols = [Policy.constant_threshold(0.5, 4, "base"), Policy.constant_threshold(0.5, 4, "dup"),
            Policy.constant_threshold(0.6, 4, "hi")]
    est = train_peq(ds, pols, make_embedding(ds, pols, dgp_spec=spec), TrainConfig(epochs=10), spec)
    return spec, ds, pols, est


class TestTinyLTMLE:
    def test_oracle_nuisances_unbiased(self, setup):
        spec, ds = setup
        pol = Policy.fixed([1, 1])
        est = ltmle_from_nuisances(ds, oracle_nuisances(spec, ds, pol), lam=0.0)
        truth = oracle_capo(spec, pol).value
        assert abs(est.psi - truth) < 3 * est.se

    def test_corrects_biased_q(self, setup):
        spec, ds = setup
        pol = Policy.threshold([0.5, 0.5])
        truth = oracle_capo(spec, pol).value
        est = ltmle_from_nuisances(ds, oracle_nuisances(spec, ds, pol, q_offset=0.2), lam=0.0)
        assert abs(est.psi_plugin - truth) > 0.15
        assert abs(est.psi - truth) < 3 * est.se
        npt.assert_allclose(est.score_residuals, 0.0, atol=1e-10)
        assert abs(est.ic.mean()) < 1e-10

    def test_contrasts(self, setup):
        spec, ds = setup
        pols = [Policy.fixed([1, 1]), Policy.fixed([0, 0])]
        rep = estimate_from_nuisances(ds, [oracle_nuisances(spec, ds, p) for p in pols], ["a", "b"], lam=0.0)
        c, d = rep.contrast(0, 1), rep.contrast(1, 0)
        npt.assert_allclose(c.cate, -d.cate)
        npt.assert_allclose(c.cate, rep.estimates[0].psi - rep.estimates[1].psi)
        assert c.ci[0] < c.cate < c.ci[1]

    def test_no_support(self):
        ds = Dataset(np.zeros((4, 2, 1)), np.ones((4, 2)), np.array([0.0, 1.0, 0.0, 1.0]))
        nu = Nuisances(np.full((4, 2), 0.5), np.full((4, 2), 0.5), np.full((4, 2), 0.5), np.zeros((4, 2), int))
        with pytest.raises(DegenerateSupportError):
            ltmle_from_nuisances(ds, nu)


class TestTrained:
    def test_duplicate_contrast_zero(self, fitted):
        _, ds, pols, est = fitted
        rep = estimate_all(ds, est)
        assert rep.contrast(1, 0).cate == 0.0
        assert rep.by_label("hi").psi == ltmle(ds, est, pols[2]).psi

    def test_report_csv(self, fitted, tmp_path):
        _, ds, _, est = fitted
        estimate_all(ds, est).write_csv(tmp_path / "e.csv")
        rows = (tmp_path / "e.csv").read_text().splitlines()
        assert rows[0].startswith("policy_or_pair,psi_hat,se,ci_lo,ci_hi,epsilon_1")
        assert len(rows) == 1 + 3 + 3

    def test_remainder_duplicate_zero(self, fitted):
        spec, ds, pols, est = fitted
        sub = ds.subset(range(60))
        dg = remainder_diagnostic(spec, est, pols[1], pols[0], sub, n_mc_for_qstar=20)
        assert dg.terms.shape == (3, 3)
        npt.assert_array_equal(dg.terms, 0.0)
        assert dg.traj_mmd == 0.0 and dg.ratio == 0.0

    def test_remainder_horizon_guard(self, fitted):
        spec, ds, pols, est = fitted
        with pytest.raises(HorizonTooLongError):
            remainder_diagnostic(spec, est, pols[1], pols[0], ds, max_tau=3)


def test_epsilon_zero_when_score_already_solved():
    lo, _, w = _fluct_problem(1)
    assert solve_epsilon(lo, expit(lo), w, 0.0) == 0.0


def test_constant_outcome_zero_ic():
    ds = Dataset(np.zeros((50, 3, 1)), np.ones((50, 3)), np.full(50, 2.0))
    q = np.full((50, 3), 2.0)
    nu = Nuisances(q, q, np.full((50, 3), 0.7), np.ones((50, 3), int))
    est = ltmle_from_nuisances(ds, nu, lam=0.0, scaler=OutcomeScaler(0.0, 4.0))
    npt.assert_allclose(est.ic, 0.0, atol=1e-15)
    npt.assert_allclose(est.psi, 2.0)


def test_outcome_shift_moves_psi_by_shift(setup):
    spec, ds = setup
    pol = Policy.fixed([1, 0])
    nu = oracle_nuisances(spec, ds, pol, q_offset=0.1)
    c = 3.25
    shifted = Nuisances(nu.q_obs + c, nu.q_pol + c, nu.g, nu.a_dot)
    a = ltmle_from_nuisances(ds, nu, lam=0.0)
    b = ltmle_from_nuisances(ds.with_outcome(ds.Y + c), shifted, lam=0.0)
    npt.assert_allclose(b.psi - a.psi, c, atol=1e-10)


def test_ic_se_matches_bootstrap(setup):
    spec, ds = setup
    pol = Policy.threshold([0.5, 0.5])
    ds = ds.subset(range(2000))
    nu = oracle_nuisances(spec, ds, pol, q_offset=0.1)
    se = ltmle_from_nuisances(ds, nu, lam=0.0).se
    r = np.random.default_rng(0)
    reps = []
    for _ in range(200):
        idx = r.integers(0, ds.n, ds.n)
        sub = Nuisances(nu.q_obs[idx], nu.q_pol[idx], nu.g[idx], nu.a_dot[idx])
        reps.append(ltmle_from_nuisances(ds.subset(idx), sub, lam=0.0,
                                         scaler=OutcomeScaler.from_dataset(ds)).psi)
    npt.assert_allclose(se, np.std(reps, ddof=1), rtol=0.3)


def test_weight_validity(fitted):
    _, ds, _, est = fitted
    for e in estimate_all(ds, est).estimates:
        w = e.weights
        assert np.all(w >= 0) and np.all(w <= (1 / 0.01) ** np.arange(1, ds.tau + 1))
        off = w == 0
        assert np.all(off[:, :-1] <= off[:, 1:])
