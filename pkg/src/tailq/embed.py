"""Kernel mean embeddings of policies.

Each policy ``k`` induces, at step ``t``, the point set
``Z_t^(k) = {(H_t^(l), a_dot_t^(k,l))}_l`` over the observed histories.
Pairwise MMD between these sets gives a distance matrix per step, which
SMACOF metric MDS turns into low-dimensional per-step policy embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .core import Dataset, Policy, action_matrix, history_features


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel ``k(z, z') = exp(-gamma_t ||z - z'||^2)`` settings.

    Parameters
    ----------
    gamma_t : sequence of float, optional
        Fixed per-step scales. ``None`` selects them by the median heuristic.
    heuristic_sample : int
        Number of pooled points sampled for the median heuristic.
    gamma_multiplier : float
        Factor applied to heuristic scales.
    seed : int
        Seed for the heuristic subsample.
    """

    gamma_t: Optional[tuple] = None
    heuristic_sample: int = 500
    gamma_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma_t is not None:
            g = tuple(float(x) for x in self.gamma_t)
            if any(not x > 0 for x in g):
                raise ValueError("kernel scales must be positive")
            object.__setattr__(self, "gamma_t", g)
        if self.gamma_multiplier <= 0:
            raise ValueError("gamma_multiplier must be positive")
        if self.heuristic_sample < 2:
            raise ValueError("heuristic_sample must be at least 2")


@dataclass
class DistanceMatrices:
    D: list
    normalized: bool
    gammas: tuple
    raw_max: tuple = ()


@dataclass
class PolicyEmbedding:
    """Per-step embeddings ``rho[t]`` of shape ``(K, d)`` and their SMACOF stress."""

    rho: list
    d: int
    stress: tuple
    labels: tuple = ()

    @property
    def K(self) -> int:
        return self.rho[0].shape[0] if self.rho else 0

    @property
    def tau(self) -> int:
        return len(self.rho)

    def array(self) -> np.ndarray:
        """Embeddings as an array of shape ``(tau, K, d)``."""
        return np.stack(self.rho)

    def select(self, index) -> "PolicyEmbedding":
        index = list(index)
        return PolicyEmbedding([r[index] for r in self.rho], self.d, self.stress, tuple(self.labels[i] for i in index) if self.labels else ())


# ---------------------------------------------------------------------------
# kernels and MMD


def sq_dists(X: np.ndarray, Y: np.ndarray = None) -> np.ndarray:
    """Squared Euclidean distances, clamped at zero; exact zeros on the diagonal when ``Y`` is ``None``."""
    sym = Y is None
    Y = X if sym else Y
    xx = np.einsum("ij,ij->i", X, X)
    yy = xx if sym else np.einsum("ij,ij->i", Y, Y)
    D = xx[:, None] + yy[None, :] - 2.0 * X @ Y.T
    np.maximum(D, 0.0, out=D)
    if sym:
        np.fill_diagonal(D, 0.0)
        D = 0.5 * (D + D.T)
    return D


def median_heuristic(points: np.ndarray, cfg: KernelConfig = KernelConfig(), rng=None) -> float:
    """``gamma = multiplier / (2 * median pairwise distance)``, with fallback 1.0 for a zero median."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("median heuristic needs a non-empty point set")
    if points.shape[0] < 2:
        return 1.0
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if points.shape[0] > cfg.heuristic_sample:
        points = points[rng.choice(points.shape[0], cfg.heuristic_sample, replace=False)]
    med = float(np.median(pdist(points)))
    if med == 0.0:
        return 1.0
    return cfg.gamma_multiplier / (2.0 * med)


def step_points(ds: Dataset, actions: np.ndarray, t: int) -> np.ndarray:
    """Kernel inputs ``(H_t features, a_t)`` for one action column ``actions`` (shape ``(n,)``)."""
    return np.column_stack([history_features(ds, t), np.asarray(actions, dtype=float)])


def median_bandwidth(ds: Dataset, action_rows: np.ndarray, cfg: KernelConfig, t: int) -> float:
    """Median-heuristic scale for step ``t`` from points pooled over ``action_rows`` (shape ``(K, n)``)."""
    if ds.n == 0:
        raise ValueError("empty dataset")
    action_rows = np.atleast_2d(action_rows)
    pooled = np.vstack([step_points(ds, a, t) for a in action_rows])
    rng = np.random.default_rng([cfg.seed, t])
    return median_heuristic(pooled, cfg, rng)


def _gram_mean(K: np.ndarray) -> float:
    return float(K.mean())


def mmd(Z_i: np.ndarray, Z_j: np.ndarray, gamma: float) -> float:
    """Biased (V-statistic) MMD between two point sets under a Gaussian kernel."""
    Z_i = np.atleast_2d(np.asarray(Z_i, dtype=float))
    Z_j = np.atleast_2d(np.asarray(Z_j, dtype=float))
    if Z_i.shape[0] == 0 or Z_j.shape[0] == 0:
        raise ValueError("MMD needs non-empty point sets")
    if Z_i.shape[1] != Z_j.shape[1]:
        raise ValueError(f"point dimensions differ: {Z_i.shape[1]} vs {Z_j.shape[1]}")
    if Z_i.shape == Z_j.shape and np.array_equal(Z_i, Z_j):
        return 0.0
    # fixed argument order makes the result exactly symmetric
    if Z_j.tobytes() < Z_i.tobytes():
        Z_i, Z_j = Z_j, Z_i
    kii = _gram_mean(np.exp(-gamma * _direct_sq_dists(Z_i, Z_i)))
    kjj = _gram_mean(np.exp(-gamma * _direct_sq_dists(Z_j, Z_j)))
    kij = _gram_mean(np.exp(-gamma * _direct_sq_dists(Z_i, Z_j)))
    return float(np.sqrt(max(kii + kjj - 2.0 * kij, 0.0)))


def _direct_sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Squared distances from explicit differences (no cancellation)."""
    diff = X[:, None, :] - Y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _resolve_gammas(ds: Dataset, acts: np.ndarray, cfg: KernelConfig) -> tuple:
    if cfg.gamma_t is not None:
        if len(cfg.gamma_t) != ds.tau:
            raise ValueError(f"gamma_t has {len(cfg.gamma_t)} entries for tau={ds.tau}")
        return tuple(g * cfg.gamma_multiplier for g in cfg.gamma_t)
    return tuple(median_bandwidth(ds, acts[:, :, t - 1], cfg, t) for t in range(1, ds.tau + 1))


def _step_mmd_matrix(Dh: np.ndarray, acts_t: np.ndarray, gamma: float) -> np.ndarray:
    """Pairwise MMD at one step given history squared distances and action columns ``(K, n)``.

    Points of every policy share the history block, so only the action
    coordinate differs across policies: ``||z - z'||^2 = Dh + (a - a')^2``.
    """
    Kh = np.exp(-gamma * Dh)
    K = acts_t.shape[0]
    a = acts_t.astype(float)

    def cross(i, j):
        diff = a[i][:, None] - a[j][None, :]
        return float((Kh * np.exp(-gamma * diff * diff)).mean())

    self_terms = [cross(i, i) for i in range(K)]
    out = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            v = self_terms[i] + self_terms[j] - 2.0 * cross(i, j)
            out[i, j] = out[j, i] = np.sqrt(max(v, 0.0))
    return out


def distance_matrices(ds: Dataset, policies: Sequence[Policy], cfg: KernelConfig = KernelConfig(),
                      dgp_spec=None, normalize: bool = True) -> DistanceMatrices:
    """Per-step MMD matrices between policies, each divided by its own max entry."""
    if len(policies) < 1:
        raise ValueError("need at least one policy")
    acts = action_matrix(policies, ds, dgp_spec)
    gammas = _resolve_gammas(ds, acts, cfg)
    Ds, raw_max = [], []
    for t in range(1, ds.tau + 1):
        Dh = sq_dists(history_features(ds, t))
        D = _step_mmd_matrix(Dh, acts[:, :, t - 1], gammas[t - 1])
        m = float(D.max())
        raw_max.append(m)
        if normalize and m > 0:
            D = D / m
        Ds.append(D)
    return DistanceMatrices(Ds, normalize, gammas, tuple(raw_max))


# ---------------------------------------------------------------------------
# SMACOF


def _stress(D: np.ndarray, X: np.ndarray) -> float:
    iu = np.triu_indices(D.shape[0], 1)
    d = np.sqrt(sq_dists(X)[iu])
    return float(((D[iu] - d) ** 2).sum())


def classical_scaling(D: np.ndarray, d: int) -> np.ndarray:
    """Torgerson scaling of a distance matrix; missing dimensions are zero columns."""
    K = D.shape[0]
    J = np.eye(K) - 1.0 / K
    B = -0.5 * J @ (D ** 2) @ J
    vals, vecs = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(vals)[::-1][:d]
    vals, vecs = vals[order], vecs[:, order]
    X = np.zeros((K, d))
    pos = vals > 1e-12
    X[:, : pos.sum()] = vecs[:, pos] * np.sqrt(vals[pos])
    return X


def smacof_mds(D: np.ndarray, d: int = 2, max_iter: int = 300, tol: float = 1e-9, seed: int = 0,
               init: np.ndarray = None, return_history: bool = False):
    """Metric MDS by stress majorization.

    Minimizes ``sum_{i<j} (D_ij - ||x_i - x_j||)^2`` with Guttman transforms
    from a classical-scaling start (a seeded Gaussian start when classical
    scaling yields nothing). Stops when the relative stress drop falls below
    ``tol``. Returns ``(X, stress)`` or ``(X, stress, history)``.
    """
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("D must be square")
    if not np.allclose(D, D.T, atol=1e-12, rtol=0):
        raise ValueError("D must be symmetric")
    if np.any(np.diag(D) != 0) or np.any(D < 0):
        raise ValueError("D must be non-negative with a zero diagonal")
    K = D.shape[0]
    if init is not None:
        X = np.array(init, dtype=float)
    else:
        X = classical_scaling(D, d)
        if not np.any(X) and np.any(D):
            X = np.random.default_rng(seed).standard_normal((K, d))
    history = [_stress(D, X)]
    if K < 2 or history[0] == 0.0:
        return (X, history[0], history) if return_history else (X, history[0])
    for _ in range(max_iter):
        dist = np.sqrt(sq_dists(X))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, D / dist, 0.0)
        B = -ratio
        np.fill_diagonal(B, 0.0)
        np.fill_diagonal(B, -B.sum(axis=1))
        X_new = B @ X / K
        s_new = _stress(D, X_new)
        if s_new > history[-1]:
            break
        drop = history[-1] - s_new
        X = X_new
        history.append(s_new)
        if s_new == 0.0 or drop <= tol * history[-2]:
            break
    return (X, history[-1], history) if return_history else (X, history[-1])


def collapse_identical(D: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Give every group of zero-distance policies the row of its first member."""
    X = X.copy()
    K = D.shape[0]
    for i in range(K):
        for j in range(i):
            if D[i, j] == 0.0:
                X[i] = X[j]
                break
    return X


def embed_policies(ds: Dataset, policies: Sequence[Policy], cfg: KernelConfig = KernelConfig(), d: int = 2,
                   dgp_spec=None, max_iter: int = 300, tol: float = 1e-9) -> PolicyEmbedding:
    """Per-step policy embeddings from normalized MMD matrices via SMACOF."""
    labels = tuple(p.label for p in policies)
    if len(policies) == 1:
        return PolicyEmbedding([np.zeros((1, d)) for _ in range(ds.tau)], d, tuple([0.0] * ds.tau), labels)
    dm = distance_matrices(ds, policies, cfg, dgp_spec)
    rho, stress = [], []
    for t, D in enumerate(dm.D):
        X, s = smacof_mds(D, d, max_iter, tol, seed=cfg.seed + t)
        rho.append(collapse_identical(D, X))
        stress.append(s)
    return PolicyEmbedding(rho, d, tuple(stress), labels)


def deterministic_embedding(policies: Sequence[Policy], tau: int) -> PolicyEmbedding:
    """Bypass for fixed sequences: ``rho_t^(k)`` is the one-dimensional row ``(a_t^(k),)``."""
    rows = []
    for p in policies:
        if p.kind != "fixed_sequence":
            raise ValueError(f"policy {p.label!r} is not a fixed sequence")
        p.check_horizon(tau)
        rows.append(p.sequence)
    arr = np.asarray(rows, dtype=float)
    return PolicyEmbedding([arr[:, [t]] for t in range(tau)], 1, tuple([0.0] * tau), tuple(p.label for p in policies))


def make_embedding(ds: Dataset, policies: Sequence[Policy], cfg: KernelConfig = KernelConfig(), d: int = 2,
                   dgp_spec=None) -> PolicyEmbedding:
    """Deterministic bypass when every policy is a fixed sequence, MMD + MDS otherwise."""
    if all(p.kind == "fixed_sequence" for p in policies):
        return deterministic_embedding(policies, ds.tau)
    return embed_policies(ds, policies, cfg, d, dgp_spec)


# ---------------------------------------------------------------------------
# trajectory level


def trajectory_gram(ds: Dataset, acts_i: np.ndarray, acts_j: np.ndarray, gammas: Sequence[float]) -> np.ndarray:
    """Product-kernel Gram ``prod_t k_t(z_t, z_t')`` between the trajectory sets of two action matrices ``(n, tau)``."""
    log_k = np.zeros((ds.n, ds.n))
    for t in range(1, ds.tau + 1):
        Dh = sq_dists(history_features(ds, t))
        diff = acts_i[:, t - 1].astype(float)[:, None] - acts_j[:, t - 1].astype(float)[None, :]
        log_k -= gammas[t - 1] * (Dh + diff * diff)
    return np.exp(log_k)


def trajectory_mmd(ds: Dataset, p_i: Policy, p_j: Policy, cfg: KernelConfig = KernelConfig(), dgp_spec=None,
                   gammas: Sequence[float] = None) -> float:
    """Trajectory-level MMD under the product kernel over ``t = 1..tau``."""
    acts = action_matrix([p_i, p_j], ds, dgp_spec)
    if gammas is None:
        gammas = _resolve_gammas(ds, acts, cfg)
    kii = trajectory_gram(ds, acts[0], acts[0], gammas).mean()
    kjj = trajectory_gram(ds, acts[1], acts[1], gammas).mean()
    kij = trajectory_gram(ds, acts[0], acts[1], gammas).mean()
    return float(np.sqrt(max(kii + kjj - 2.0 * kij, 0.0)))


def step_mmd_values(ds: Dataset, p_i: Policy, p_j: Policy, cfg: KernelConfig = KernelConfig(), dgp_spec=None,
                    gammas: Sequence[float] = None) -> np.ndarray:
    """Unnormalized per-step MMD between two policies, shape ``(tau,)``."""
    acts = action_matrix([p_i, p_j], ds, dgp_spec)
    if gammas is None:
        gammas = _resolve_gammas(ds, acts, cfg)
    out = np.empty(ds.tau)
    for t in range(1, ds.tau + 1):
        Dh = sq_dists(history_features(ds, t))
        out[t - 1] = _step_mmd_matrix(Dh, acts[:, :, t - 1], gammas[t - 1])[0, 1]
    return out
