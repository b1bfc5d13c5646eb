"""LTMLE targeting, influence-function inference and remainder diagnostics.

Outcomes and Q predictions are mapped affinely into ``[delta, 1 - delta]`` so
that the logistic fluctuation ``logit Q_eps = logit Q + eps`` is well
defined. Estimates are mapped back to the original scale.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .core import Dataset, Policy, action_matrix
from .dgp import DgpSpec, oracle_q, propensity_matrix
from .embed import KernelConfig, trajectory_mmd
from .train import Nuisances, TrainedEstimator

DELTA = 0.005
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class DegenerateBoundsError(ValueError):
    pass


class DegenerateSupportError(ValueError):
    """No evaluation unit follows the policy up to step ``t``."""

    def __init__(self, t: int, label: str = ""):
        self.t = t
        super().__init__(f"no trajectory follows policy {label!r} through step t={t}")


class HorizonTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeScaler:
    y_min: float
    y_max: float
    delta: float = DELTA

    def __post_init__(self):
        if not self.y_max > self.y_min:
            raise DegenerateBoundsError(f"outcome bounds ({self.y_min}, {self.y_max}) are degenerate")
        if not 0.0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 0.5)")

    @classmethod
    def from_dataset(cls, ds: Dataset, delta: float = DELTA) -> "OutcomeScaler":
        if ds.outcome_bounds is None:
            raise DegenerateBoundsError("empty dataset has no outcome bounds")
        return cls(*ds.outcome_bounds, delta=delta)

    @property
    def factor(self) -> float:
        """Original-scale units per scaled unit."""
        return (self.y_max - self.y_min) / (1.0 - 2.0 * self.delta)

    def scale(self, y):
        return self.delta + (np.asarray(y, dtype=float) - self.y_min) / self.factor

    def unscale(self, v):
        return self.y_min + (np.asarray(v, dtype=float) - self.delta) * self.factor


@dataclass
class PolicyEstimate:
    label: str
    psi: float
    se: float
    ci: tuple
    epsilon: np.ndarray
    ic: np.ndarray
    weights: np.ndarray
    score_residuals: np.ndarray
    q_targeted_obs: np.ndarray
    q_targeted_pol: np.ndarray
    psi_plugin: float


@dataclass
class Contrast:
    label_i: str
    label_j: str
    cate: float
    se: float
    ci: tuple
    ic: np.ndarray


@dataclass
class EstimateReport:
    estimates: list
    contrasts: dict
    scaler: OutcomeScaler
    lam: float
    clip: tuple

    def by_label(self, label: str) -> PolicyEstimate:
        for e in self.estimates:
            if e.label == label:
                return e
        raise KeyError(label)

    def contrast(self, i: int, j: int) -> Contrast:
        return self.contrasts[(i, j)]

    def write_csv(self, path) -> None:
        tau = len(self.estimates[0].epsilon) if self.estimates else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy_or_pair", "psi_hat", "se", "ci_lo", "ci_hi"] + [f"epsilon_{t + 1}" for t in range(tau)])
            for e in self.estimates:
                w.writerow([e.label, repr(e.psi), repr(e.se), repr(e.ci[0]), repr(e.ci[1])] + [repr(float(x)) for x in e.epsilon])
            for (i, j), c in sorted(self.contrasts.items()):
                if i < j:
                    w.writerow([f"{c.label_i} - {c.label_j}", repr(c.cate), repr(c.se), repr(c.ci[0]), repr(c.ci[1])] + [""] * tau)


# ---------------------------------------------------------------------------
# fluctuation


def _objective(eps: float, lo: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float) -> float:
    x = lo + eps
    return float(np.mean(w * (np.logaddexp(0.0, x) - y * x)) + lam * abs(eps))


def _smooth_grad(eps: float, lo, y, w) -> float:
    return float(np.mean(w * (expit(lo + eps) - y)))


def solve_epsilon(lo: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float, bound: float = 5.0, tol: float = 1e-8):
    """Minimize ``mean(w * BCE(expit(lo + eps), y)) + lam * |eps|`` over ``[-bound, bound]``.

    Returns exactly 0 when the subgradient condition holds at 0. Otherwise a
    21-point grid brackets the minimum, golden-section search narrows it to
    ``tol`` and Newton steps on the smooth side polish the stationarity
    condition.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    g0 = _smooth_grad(0.0, lo, y, w)
    if abs(g0) <= lam:
        return 0.0
    grid = np.linspace(-bound, bound, 21)
    vals = [_objective(e, lo, y, w, lam) for e in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, 20)]
    f = lambda e: _objective(e, lo, y, w, lam)
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    eps = 0.5 * (a + b)
    # stationarity on the side of zero the minimum lies on: g(eps) + lam * sign(eps) = 0
    side = -np.sign(g0)
    shift = lam * side
    for _ in range(50):
        x = lo + eps
        p = expit(x)
        r = float(np.mean(w * (p - y))) + shift
        h = float(np.mean(w * p * (1.0 - p)))
        if h <= 0 or abs(r) < 1e-14:
            break
        step = r / h
        new = float(np.clip(eps - step, -bound, bound))
        if np.sign(new) != side and new != 0.0:
            break
        if new == eps:
            break
        eps = new
    return float(eps)


def clever_weights(A: np.ndarray, a_dot: np.ndarray, g: np.ndarray, clip: tuple) -> np.ndarray:
    """``w_t = prod_{s<=t} 1(A_s = a_dot_s) / eta_hat_s`` with ``eta_hat`` clipped to ``clip``."""
    lo, hi = clip
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"clip bounds must satisfy 0 < lo < hi < 1, got {clip}")
    eta = np.where(a_dot == 1, g, 1.0 - g)
    eta = np.clip(eta, lo, hi)
    follow = (A == a_dot).astype(float)
    return np.cumprod(follow / eta, axis=1)


def influence_values(w: np.ndarray, q_obs_eps: np.ndarray, q_pol_eps: np.ndarray, y_scaled: np.ndarray,
                     psi_scaled: float) -> np.ndarray:
    """Per-unit efficient influence values on the scaled outcome.

    ``IC = sum_t w_t (Q_{t+1,eps}(a_dot_{t+1}) - Q_{t,eps}(A_t)) + Q_{1,eps}(a_dot_1) - psi``
    with ``Q_{tau+1} = Y``.
    """
    nxt = np.empty_like(q_pol_eps)
    nxt[:, :-1] = q_pol_eps[:, 1:]
    nxt[:, -1] = y_scaled
    return (w * (nxt - q_obs_eps)).sum(axis=1) + q_pol_eps[:, 0] - psi_scaled


def ltmle_from_nuisances(ds: Dataset, nu: Nuisances, lam: float = 0.01, clip: tuple = (0.01, 0.99),
                         scaler: OutcomeScaler = None, label: str = "") -> PolicyEstimate:
    """Backward targeting ``t = tau..1`` followed by influence-function inference."""
    scaler = OutcomeScaler.from_dataset(ds) if scaler is None else scaler
    d = scaler.delta
    qs_obs = np.clip(scaler.scale(nu.q_obs), d, 1.0 - d)
    qs_pol = np.clip(scaler.scale(nu.q_pol), d, 1.0 - d)
    ys = np.clip(scaler.scale(ds.Y), 0.0, 1.0)
    A = ds.A.astype(int)
    a_dot = np.asarray(nu.a_dot).astype(int)
    w = clever_weights(A, a_dot, nu.g, clip)
    tau = ds.tau
    eps = np.zeros(tau)
    upd_obs = np.empty_like(qs_obs)
    upd_pol = np.empty_like(qs_pol)
    resid = np.zeros(tau)
    target = ys
    for t in range(tau - 1, -1, -1):
        wt = w[:, t]
        if not np.any(wt > 0):
            raise DegenerateSupportError(t + 1, label)
        lo = logit(qs_obs[:, t])
        eps[t] = solve_epsilon(lo, target, wt, lam)
        upd_obs[:, t] = expit(lo + eps[t])
        upd_pol[:, t] = expit(logit(qs_pol[:, t]) + eps[t])
        resid[t] = float(np.mean(wt * (target - upd_obs[:, t])))
        target = upd_pol[:, t]
    psi_s = float(upd_pol[:, 0].mean())
    ic = influence_values(w, upd_obs, upd_pol, ys, psi_s)
    n = ds.n
    se = float(ic.std(ddof=1) / np.sqrt(n) * scaler.factor) if n > 1 else float("nan")
    psi = float(scaler.unscale(psi_s))
    return PolicyEstimate(
        label=label, psi=psi, se=se, ci=(psi - 1.96 * se, psi + 1.96 * se), epsilon=eps, ic=ic, weights=w,
        score_residuals=resid, q_targeted_obs=scaler.unscale(upd_obs), q_targeted_pol=scaler.unscale(upd_pol),
        psi_plugin=float(nu.q_pol[:, 0].mean()),
    )


def _contrast(ei: PolicyEstimate, ej: PolicyEstimate, scaler: OutcomeScaler) -> Contrast:
    ic = ei.ic - ej.ic
    n = ic.size
    se = float(ic.std(ddof=1) / np.sqrt(n) * scaler.factor) if n > 1 else float("nan")
    cate = ei.psi - ej.psi
    return Contrast(ei.label, ej.label, cate, se, (cate - 1.96 * se, cate + 1.96 * se), ic)


def estimate_from_nuisances(ds: Dataset, nuisances: Sequence[Nuisances], labels: Sequence[str], lam: float = 0.01,
                            clip: tuple = (0.01, 0.99), scaler: OutcomeScaler = None) -> EstimateReport:
    scaler = OutcomeScaler.from_dataset(ds) if scaler is None else scaler
    ests = [ltmle_from_nuisances(ds, nu, lam, clip, scaler, lab) for nu, lab in zip(nuisances, labels)]
    contrasts = {}
    for i in range(len(ests)):
        for j in range(len(ests)):
            if i != j:
                contrasts[(i, j)] = _contrast(ests[i], ests[j], scaler)
    return EstimateReport(ests, contrasts, scaler, lam, tuple(clip))


def ltmle(eval_ds: Dataset, estimator: TrainedEstimator, policy: Policy, lam: float = 0.01,
          clip: tuple = (0.01, 0.99), scaler: OutcomeScaler = None) -> PolicyEstimate:
    """Targeted CAPO for one of the estimator's policies."""
    labels = [p.label for p in estimator.policies]
    if policy.label not in labels:
        raise KeyError(f"estimator was not trained for policy {policy.label!r}")
    k = labels.index(policy.label)
    nu = estimator.predict(eval_ds)[k]
    return ltmle_from_nuisances(eval_ds, nu, lam, clip, scaler, policy.label)


def estimate_all(eval_ds: Dataset, estimator: TrainedEstimator, lam: float = 0.01, clip: tuple = (0.01, 0.99),
                 scaler: OutcomeScaler = None) -> EstimateReport:
    """Targeted CAPOs for every policy of ``estimator`` and all pairwise CATEs."""
    nus = estimator.predict(eval_ds)
    return estimate_from_nuisances(eval_ds, nus, [p.label for p in estimator.policies], lam, clip, scaler)


# ---------------------------------------------------------------------------
# oracle nuisances and remainder diagnostics


def oracle_nuisances(spec: DgpSpec, ds: Dataset, policy: Policy, n_mc: int = 200, q_offset: float = 0.0,
                     seed: int = None) -> Nuisances:
    """True ``Q*`` (exact for the tiny variant, nested Monte-Carlo otherwise) and true propensities."""
    a_dot = action_matrix([policy], ds, spec)[0]
    q_obs = np.empty((ds.n, ds.tau))
    q_pol = np.empty((ds.n, ds.tau))
    for t in range(1, ds.tau + 1):
        q_obs[:, t - 1] = oracle_q(spec, ds, t, policy, n_mc, seed)
        q_pol[:, t - 1] = oracle_q(spec, ds, t, policy, n_mc, seed, actions=a_dot[:, t - 1])
    return Nuisances(q_obs + q_offset, q_pol + q_offset, propensity_matrix(spec, ds), a_dot)


@dataclass
class RemainderDiagnostic:
    label_i: str
    label_j: str
    terms: np.ndarray
    rem: float
    traj_mmd: float
    n_mc: int

    @property
    def ratio(self) -> float:
        """``|Rem| / trajectory MMD``; 0 for a zero remainder, infinite for a positive one at zero distance."""
        if self.traj_mmd > 0:
            return abs(self.rem) / self.traj_mmd
        return 0.0 if self.rem == 0 else float("inf")


def _observed_eta(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.where(A == 1, g, 1.0 - g)


def remainder_diagnostic(spec: DgpSpec, estimator: TrainedEstimator, p_i: Policy, p_j: Policy, eval_ds: Dataset,
                         n_mc_for_qstar: int = 200, lam: float = 0.01, clip: tuple = (0.01, 0.99),
                         kernel: KernelConfig = KernelConfig(), max_tau: int = 4, seed: int = None,
                         report: EstimateReport = None) -> RemainderDiagnostic:
    """Plug-in Terms I-III of the CATE remainder between ``p_i`` and ``p_j``.

    For each step ``s < tau`` and policy ``k``:
    ``W_s = (1/eta*_s) prod_{r<=s} 1(A_r = a_dot_r)/eta_hat_r``,
    ``xi_G = eta_hat_s - eta*_s`` and ``xi_Q = Q_hat_s - Q*_s`` at the
    observed ``(A_s, H_s)``, with ``Q_hat`` the targeted fit. Then

    * Term I   = ``(W^i - W^j) xi_G^i xi_Q^i``
    * Term II  = ``W^j xi_Q^i (xi_G^i - xi_G^j)``
    * Term III = ``W^j xi_G^j (xi_Q^i - xi_Q^j)``

    averaged over ``eval_ds``; ``rem = -sum_s (I + II + III)``.
    """
    if eval_ds.tau > max_tau:
        raise HorizonTooLongError(f"tau={eval_ds.tau} exceeds the Q* oracle budget (max_tau={max_tau})")
    labels = [p.label for p in estimator.policies]
    ki, kj = labels.index(p_i.label), labels.index(p_j.label)
    if report is None:
        report = estimate_all(eval_ds, estimator, lam, clip)
    nus = estimator.predict(eval_ds)
    A = eval_ds.A.astype(int)
    tau = eval_ds.tau
    eta_star = _observed_eta(A, propensity_matrix(spec, eval_ds))
    lo, hi = clip

    parts = {}
    for key, k, p in (("i", ki, p_i), ("j", kj, p_j)):
        nu = nus[k]
        eta_hat = np.clip(_observed_eta(A, nu.g), lo, hi)
        follow = (A == nu.a_dot).astype(float)
        W = np.cumprod(follow / eta_hat, axis=1) / eta_star
        parts[key] = dict(W=W, xi_g=eta_hat - eta_star, q_hat=report.estimates[k].q_targeted_obs, follow=follow)

    terms = np.zeros((tau - 1, 3))
    for s in range(1, tau):
        Wi, Wj = parts["i"]["W"][:, s - 1], parts["j"]["W"][:, s - 1]
        active = (Wi != 0) | (Wj != 0)
        if not np.any(active):
            continue
        sub = eval_ds.subset(np.flatnonzero(active))
        xq = {}
        for key, p in (("i", p_i), ("j", p_j)):
            qstar = oracle_q(spec, sub, s, p, n_mc_for_qstar, seed)
            xq[key] = parts[key]["q_hat"][active, s - 1] - qstar
        gi = parts["i"]["xi_g"][active, s - 1]
        gj = parts["j"]["xi_g"][active, s - 1]
        Wi, Wj = Wi[active], Wj[active]
        n = eval_ds.n
        terms[s - 1, 0] = np.sum((Wi - Wj) * gi * xq["i"]) / n
        terms[s - 1, 1] = np.sum(Wj * xq["i"] * (gi - gj)) / n
        terms[s - 1, 2] = np.sum(Wj * gj * (xq["i"] - xq["j"])) / n
    rem = -float(terms.sum())
    mmd = trajectory_mmd(eval_ds, p_i, p_j, kernel, spec)
    return RemainderDiagnostic(p_i.label, p_j.label, terms, rem, mmd, n_mc_for_qstar)


def write_diagnostics_csv(diags: Sequence[RemainderDiagnostic], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "t", "term1", "term2", "term3", "traj_mmd"])
        for dg in diags:
            for s, row in enumerate(dg.terms, start=1):
                w.writerow([f"{dg.label_i} - {dg.label_j}", s] + [repr(float(x)) for x in row] + [repr(dg.traj_mmd)])
