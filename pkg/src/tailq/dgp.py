"""Semi-synthetic longitudinal generators and their ground-truth oracles.

Three variants are provided:

``limited``
    Exogenous covariates ``X_t`` (a stand-in AR(1) process), a lagged
    intermediate outcome, a history-dependent behavior policy and a treatment
    intensity state ``ell_t``.
``expanded``
    As ``limited`` with five latent covariates ``Z_t`` that react to treatment,
    so ``X_t`` is replaced by ``X_t^dagger = (X_t, Z_t)``.
``tiny``
    Two steps, binary scalar covariates and tabular probabilities, small enough
    for exact enumeration of every conditional expectation.

All randomness is drawn in fixed-size row chunks, each from its own
``SeedSequence([seed, chunk])``; the first ``n`` rows of a larger draw equal a
draw of size ``n``.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .core import Dataset, HistoryView, Policy, ShapeError, _sigmoid

VARIANTS = ("limited", "expanded", "tiny")
CHUNK = 1024

TINY_P_L1 = 0.4
TINY_P_A1 = np.array([0.3, 0.7])
TINY_P_L2 = np.array([[0.2, 0.5], [0.45, 0.8]])
TINY_P_A2 = np.array([[[0.25, 0.6], [0.4, 0.7]], [[0.35, 0.65], [0.55, 0.8]]])
TINY_P_Y = np.array(
    [
        [[[0.20, 0.35], [0.30, 0.50]], [[0.25, 0.45], [0.40, 0.60]]],
        [[[0.15, 0.30], [0.35, 0.55]], [[0.30, 0.50], [0.45, 0.70]]],
    ]
)


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of a generator.

    Parameters
    ----------
    variant : {"limited", "expanded", "tiny"}
    tau : int
        Horizon; must be 2 for ``tiny``.
    d_x : int
        Dimension of the exogenous covariates.
    d_z : int
        Dimension of the treatment-responsive covariates (``expanded`` only).
    lag : int
        Number of lagged terms ``h`` in the treatment score and outcome.
    noise_sd_a, noise_sd_y, noise_sd_z : float
        Standard deviations of the treatment, outcome and ``Z`` noise. Zero is
        accepted and yields a noise-free generator.
    omega : tuple of float
        ``(omega_1, omega_2, omega_3)`` of the ``Z`` recursion.
    seed : int
    """

    variant: str = "limited"
    tau: int = 15
    d_x: int = 10
    d_z: int = 5
    lag: int = 8
    noise_sd_a: float = 0.5
    noise_sd_y: float = 0.5
    noise_sd_z: float = 0.3
    omega: tuple = (0.37, 0.42, 0.29)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.tau < 2:
            raise ValueError("tau must be at least 2")
        if self.variant == "tiny" and self.tau != 2:
            raise ValueError("the tiny variant has tau = 2")
        if self.lag < 1 or self.d_x < 2 or self.d_z < 1:
            raise ValueError("lag, d_x and d_z must be positive (d_x >= 2)")
        for name in ("noise_sd_a", "noise_sd_y", "noise_sd_z"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        omega = tuple(float(w) for w in self.omega)
        if len(omega) != 3:
            raise ValueError("omega must have three entries")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def tiny(cls, seed: int = 0) -> "DgpSpec":
        return cls(variant="tiny", tau=2, seed=seed)

    @property
    def d_cov(self) -> int:
        """Width of the covariate block that the score and outcome read."""
        if self.variant == "tiny":
            return 1
        return self.d_x + (self.d_z if self.variant == "expanded" else 0)

    @property
    def d_L(self) -> int:
        return 1 if self.variant == "tiny" else self.d_cov + 1

    def with_seed(self, seed: int) -> "DgpSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["omega"] = list(self.omega)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        d = dict(d)
        if "omega" in d:
            d["omega"] = tuple(d["omega"])
        if d.get("variant") == "tiny":
            d.setdefault("tau", 2)
        return cls(**d)


@dataclass(frozen=True)
class OracleResult:
    value: float
    mc_std_error: float
    n_mc: int
    method: str


def lag_weights(h: int) -> np.ndarray:
    """Alternating, decaying lag coefficients ``w_i = (-1)^i / i`` for ``i = 1..h``."""
    i = np.arange(1, h + 1, dtype=float)
    return (-1.0) ** i / i


# ---------------------------------------------------------------------------
# noise


def _chunk_noise(spec: DgpSpec, seed: int, c: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, c]))
    tau = spec.tau
    return {
        "x1": rng.standard_normal((CHUNK, spec.d_x)),
        "eta": rng.standard_normal((CHUNK, tau, spec.d_x)),
        "z1": rng.standard_normal((CHUNK, spec.d_z)),
        "eps_z": rng.standard_normal((CHUNK, tau, spec.d_z)),
        "eps_a": rng.standard_normal((CHUNK, tau)),
        "eps_y": rng.standard_normal((CHUNK, tau)),
        "u": rng.random((CHUNK, 5)),
    }


def draw_noise(spec: DgpSpec, seed: int, n: int, start: int = 0) -> dict:
    """Noise for rows ``start .. start + n - 1`` of the stream selected by ``seed``."""
    stop = start + n
    parts = []
    for c in range(start // CHUNK, (stop - 1) // CHUNK + 1 if n else start // CHUNK):
        lo = max(start, c * CHUNK) - c * CHUNK
        hi = min(stop, (c + 1) * CHUNK) - c * CHUNK
        parts.append({k: v[lo:hi] for k, v in _chunk_noise(spec, seed, c).items()})
    if not parts:
        empty = _chunk_noise(spec, seed, 0)
        return {k: v[:0] for k, v in empty.items()}
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------------------
# limited / expanded engine


def _score(j: int, xbar: np.ndarray, ys: np.ndarray, ell: np.ndarray, w: np.ndarray, tau: int) -> np.ndarray:
    """Noise-free treatment score at 0-based step ``j`` from lagged means, outcomes and ``ell_{t-1}``."""
    s = -np.tanh(ell - tau / 2.0)
    for i in range(1, min(len(w), j) + 1):
        s = s + w[i - 1] * (xbar[:, j - i] + np.tanh(ys[:, j - i] / 2.0))
    return s


def _outcome_mean(j: int, m1: np.ndarray, m2: np.ndarray, A: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Noise-free intermediate outcome produced at 0-based step ``j``."""
    out = np.zeros(m1.shape[0])
    for i in range(1, len(w) + 1):
        k = j - 1 - i
        if k < 0:
            break
        a = A[:, k]
        out = out + w[i - 1] * np.tanh(np.sin(m1[:, k] * a) + np.cos(m2[:, k] * a))
    return 5.0 * out


ActionFn = Callable[[int, np.ndarray], np.ndarray]


def _rollout(
    spec: DgpSpec,
    noise: dict,
    action_fn: Optional[ActionFn] = None,
    prefix_L: Optional[np.ndarray] = None,
    prefix_A: Optional[np.ndarray] = None,
    X_exo: Optional[np.ndarray] = None,
):
    """Vectorized simulation of ``limited``/``expanded`` trajectories.

    Rows in ``prefix_L``/``prefix_A`` (shape ``(n, s, d_L)``/``(n, s)``) are
    replayed verbatim for steps ``1..s``; ``Y_s`` onward is simulated.
    Returns ``(L, A, Y_int)`` with ``Y_int[:, j]`` the outcome produced at
    step ``j + 1``.
    """
    n = noise["eps_a"].shape[0]
    tau, d_x, d_cov = spec.tau, spec.d_x, spec.d_cov
    expanded = spec.variant == "expanded"
    w = lag_weights(spec.lag)
    om1, om2, om3 = spec.omega
    s_pref = 0 if prefix_A is None else prefix_A.shape[1]

    X = np.zeros((n, tau, d_cov))
    A = np.zeros((n, tau))
    ys = np.zeros((n, tau))
    ell = np.full(n, tau / 2.0 - 3.0)
    half = d_cov // 2

    for j in range(tau):
        if j < s_pref:
            X[:, j] = prefix_L[:, j, :d_cov]
        else:
            if X_exo is not None:
                X[:, j, :d_x] = X_exo[:, j]
            elif j == 0:
                X[:, j, :d_x] = noise["x1"]
            else:
                X[:, j, :d_x] = 0.8 * X[:, j - 1, :d_x] + 0.6 * noise["eta"][:, j]
            if expanded:
                if j == 0:
                    X[:, j, d_x:] = noise["z1"]
                else:
                    z = X[:, j - 1, d_x:]
                    xbar_orig = X[:, j - 1, :d_x].mean(axis=1)
                    X[:, j, d_x:] = (
                        om1 * z
                        + om2 * A[:, j - 1, None] * _sigmoid(z ** 2)
                        + om3 * xbar_orig[:, None]
                        + spec.noise_sd_z * noise["eps_z"][:, j]
                    )
        if 1 <= j < s_pref:
            ys[:, j - 1] = prefix_L[:, j, -1]
        xbar = X[:, : j + 1].mean(axis=2)
        score = _score(j, xbar, ys, ell, w, tau)
        if j < s_pref:
            A[:, j] = prefix_A[:, j]
        elif action_fn is not None:
            A[:, j] = action_fn(j, score)
        else:
            A[:, j] = (score + spec.noise_sd_a * noise["eps_a"][:, j] > 0).astype(float)
        m1 = X[:, : j + 1, :half].mean(axis=2)
        m2 = X[:, : j + 1, half:].mean(axis=2)
        ys[:, j] = _outcome_mean(j, m1, m2, A, w) + spec.noise_sd_y * noise["eps_y"][:, j]
        ell = ell + 2.0 * (A[:, j] - 1.0) * xbar[:, j] * np.tanh(ys[:, j])

    L = np.empty((n, tau, d_cov + 1))
    L[:, :, :d_cov] = X
    L[:, 0, -1] = 0.0
    L[:, 1:, -1] = ys[:, :-1]
    return L, A, ys


def history_scores(spec: DgpSpec, ds: Dataset) -> np.ndarray:
    """Noise-free treatment score ``s(H_t)`` for every row and step, shape ``(n, tau)``.

    For the tiny variant the score is the logit of the tabular propensity.
    """
    if ds.tau != spec.tau or ds.d_L != spec.d_L:
        raise ShapeError(f"dataset (tau={ds.tau}, d_L={ds.d_L}) does not match spec (tau={spec.tau}, d_L={spec.d_L})")
    if spec.variant == "tiny":
        return logit(_tiny_propensity(ds.L[:, :, 0].astype(int), ds.A.astype(int)))
    n, tau = ds.n, ds.tau
    w = lag_weights(spec.lag)
    xbar = ds.L[:, :, : spec.d_cov].mean(axis=2)
    ys = np.zeros((n, tau))
    ys[:, :-1] = ds.L[:, 1:, -1]
    ell = np.full(n, tau / 2.0 - 3.0)
    out = np.empty((n, tau))
    for j in range(tau):
        out[:, j] = _score(j, xbar, ys, ell, w, tau)
        ell = ell + 2.0 * (ds.A[:, j] - 1.0) * xbar[:, j] * np.tanh(ys[:, j])
    return out


def _policy_action_fn(spec: DgpSpec, p: Policy) -> Optional[ActionFn]:
    p.check_horizon(spec.tau)
    if p.kind == "behavior_stochastic":
        return None
    if p.kind == "fixed_sequence":
        seq = np.asarray(p.sequence, dtype=float)
        return lambda j, score: np.full(score.shape[0], seq[j])
    gammas = np.asarray(p.gammas)
    return lambda j, score: (_sigmoid(score) > gammas[j]).astype(float)


def _simulate(spec: DgpSpec, n: int, X_exo=None) -> Dataset:
    if n < 0:
        raise ValueError("n must be non-negative")
    if X_exo is not None:
        X_exo = np.asarray(X_exo, dtype=float)
        if X_exo.shape != (n, spec.tau, spec.d_x):
            raise ShapeError(f"X_exo must have shape {(n, spec.tau, spec.d_x)}")
    L, A, ys = _rollout(spec, draw_noise(spec, spec.seed, n), X_exo=X_exo)
    return Dataset(L, A, ys[:, -1])


def simulate_limited(spec: DgpSpec, n: int, X_exo=None) -> Dataset:
    """Simulate ``n`` trajectories from the limited-feedback generator.

    ``X_exo`` optionally replaces the stand-in covariate process with a
    caller-supplied array of shape ``(n, tau, d_x)``.
    """
    if spec.variant != "limited":
        raise ValueError(f"simulate_limited needs variant 'limited', got {spec.variant!r}")
    return _simulate(spec, n, X_exo)


def simulate_expanded(spec: DgpSpec, n: int, X_exo=None) -> Dataset:
    if spec.variant != "expanded":
        raise ValueError(f"simulate_expanded needs variant 'expanded', got {spec.variant!r}")
    return _simulate(spec, n, X_exo)


def simulate_forced(spec: DgpSpec, n: int, actions, seed: int = None) -> Dataset:
    """Simulate with every action forced to the rows of ``actions`` (shape ``(n, tau)`` or ``(tau,)``)."""
    actions = np.broadcast_to(np.asarray(actions, dtype=float), (n, spec.tau))
    noise = draw_noise(spec, spec.seed if seed is None else seed, n)
    if spec.variant == "tiny":
        L, A, Y = _rollout_tiny(noise, lambda j, l, a: actions[:, j])
        return Dataset(L, A, Y)
    L, A, ys = _rollout(spec, noise, action_fn=lambda j, s: actions[:, j])
    return Dataset(L, A, ys[:, -1])


def simulate(spec: DgpSpec, n: int) -> Dataset:
    """Dispatch on ``spec.variant``."""
    if spec.variant == "tiny":
        return simulate_tiny(spec, n)
    return _simulate(spec, n)


# ---------------------------------------------------------------------------
# tiny variant


def _tiny_propensity(l: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``P(A_t = 1 | H_t)`` from the tables; ``l``, ``a`` have shape ``(n, 2)``."""
    p1 = TINY_P_A1[l[:, 0]]
    p2 = TINY_P_A2[l[:, 0], a[:, 0], l[:, 1]]
    return np.stack([p1, p2], axis=1)


def _rollout_tiny(noise: dict, action_fn=None, prefix_L=None, prefix_A=None):
    u = noise["u"]
    n = u.shape[0]
    s_pref = 0 if prefix_A is None else prefix_A.shape[1]
    l = np.zeros((n, 2), dtype=int)
    a = np.zeros((n, 2), dtype=int)

    def act(j, p):
        if j < s_pref:
            return prefix_A[:, j].astype(int)
        if action_fn is not None:
            return np.asarray(action_fn(j, l, a), dtype=int)
        return (u[:, 2 * j + 1] < p).astype(int)

    l[:, 0] = prefix_L[:, 0, 0].astype(int) if s_pref >= 1 else (u[:, 0] < TINY_P_L1).astype(int)
    a[:, 0] = act(0, TINY_P_A1[l[:, 0]])
    l[:, 1] = prefix_L[:, 1, 0].astype(int) if s_pref >= 2 else (u[:, 2] < TINY_P_L2[l[:, 0], a[:, 0]]).astype(int)
    a[:, 1] = act(1, TINY_P_A2[l[:, 0], a[:, 0], l[:, 1]])
    y = (u[:, 4] < TINY_P_Y[l[:, 0], a[:, 0], l[:, 1], a[:, 1]]).astype(float)
    return l[:, :, None].astype(float), a.astype(float), y


def simulate_tiny(spec: DgpSpec, n: int) -> Dataset:
    """Two-step tabular generator with binary ``L_t``, ``A_t`` and ``Y``."""
    if spec.variant != "tiny":
        raise ValueError(f"simulate_tiny needs variant 'tiny', got {spec.variant!r}")
    L, A, Y = _rollout_tiny(draw_noise(spec, spec.seed, n))
    return Dataset(L, A, Y)


def _tiny_rule(p: Policy):
    """Decision rule ``(t, l, a) -> action`` on scalar tiny histories (0-based ``t``)."""
    p.check_horizon(2)
    if p.kind == "fixed_sequence":
        return lambda t, l, a: p.sequence[t]
    if p.kind == "threshold":
        def rule(t, l, a):
            prob = TINY_P_A1[l[0]] if t == 0 else TINY_P_A2[l[0], a[0], l[1]]
            # same sigmoid(logit(.)) path as apply_policy so ties resolve identically
            return int(_sigmoid(logit(prob)) > p.gammas[t])
        return rule
    raise ValueError("exhaustive oracles need a deterministic policy")


def _tiny_vector_action_fn(p: Policy):
    rule = _tiny_rule(p)

    def fn(j, l, a):
        out = np.empty(l.shape[0], dtype=int)
        if j == 0:
            for l0 in (0, 1):
                out[l[:, 0] == l0] = rule(0, (l0, 0), (0, 0))
            return out
        for l0, a0, l1 in itertools.product((0, 1), repeat=3):
            mask = (l[:, 0] == l0) & (a[:, 0] == a0) & (l[:, 1] == l1)
            out[mask] = rule(1, (l0, l1), (a0, 0))
        return out

    return fn


def tiny_exhaustive_capo(p: Policy) -> float:
    """Forward enumeration of the 16 full histories under ``p``."""
    rule = _tiny_rule(p)
    total = 0.0
    for l1, l2 in itertools.product((0, 1), repeat=2):
        a1 = rule(0, (l1, 0), (0, 0))
        a2 = rule(1, (l1, l2), (a1, 0))
        pl1 = TINY_P_L1 if l1 else 1.0 - TINY_P_L1
        pl2 = TINY_P_L2[l1, a1] if l2 else 1.0 - TINY_P_L2[l1, a1]
        total += pl1 * pl2 * TINY_P_Y[l1, a1, l2, a2]
    return float(total)


def tiny_ice_tables(p: Policy):
    """Backward ICE recursion on the tables.

    Returns ``(Q1, Q2)`` with ``Q2[l1, a1, l2, a2] = E[Y | H_2, A_2]`` and
    ``Q1[l1, a1] = E[Q2(pi_2(H_2), H_2) | L_1, A_1]``.
    """
    rule = _tiny_rule(p)
    Q2 = TINY_P_Y.copy()
    Q1 = np.zeros((2, 2))
    for l1, a1 in itertools.product((0, 1), repeat=2):
        for l2 in (0, 1):
            pl2 = TINY_P_L2[l1, a1] if l2 else 1.0 - TINY_P_L2[l1, a1]
            Q1[l1, a1] += pl2 * Q2[l1, a1, l2, rule(1, (l1, l2), (a1, 0))]
    return Q1, Q2


def tiny_ice_capo(p: Policy) -> float:
    rule = _tiny_rule(p)
    Q1, _ = tiny_ice_tables(p)
    return float(sum((TINY_P_L1 if l1 else 1.0 - TINY_P_L1) * Q1[l1, rule(0, (l1, 0), (0, 0))] for l1 in (0, 1)))


def tiny_reparam_capo(policies: Sequence[Policy], rho2: np.ndarray) -> np.ndarray:
    """CAPOs from one tail-conditioned regression ``Q_1(a_1, l_1; rho_2)``.

    The regression is a single table indexed by the step-2 tail embedding
    ``rho2[k]``; each distinct embedding row is decoded to the step-2 rule of
    the first policy carrying it. Agreement with :func:`tiny_ice_capo` requires
    the embedding to separate distinct step-2 rules.
    """
    rho2 = np.asarray(rho2, dtype=float).reshape(len(policies), -1)
    decoder = {}
    for p, row in zip(policies, rho2):
        decoder.setdefault(row.tobytes(), _tiny_rule(p))

    def q1(a1, l1, row):
        rule2 = decoder[row.tobytes()]
        val = 0.0
        for l2 in (0, 1):
            pl2 = TINY_P_L2[l1, a1] if l2 else 1.0 - TINY_P_L2[l1, a1]
            val += pl2 * TINY_P_Y[l1, a1, l2, rule2(1, (l1, l2), (a1, 0))]
        return val

    out = np.empty(len(policies))
    for k, (p, row) in enumerate(zip(policies, rho2)):
        rule1 = _tiny_rule(p)
        out[k] = sum((TINY_P_L1 if l1 else 1.0 - TINY_P_L1) * q1(rule1(0, (l1, 0), (0, 0)), l1, row) for l1 in (0, 1))
    return out


def tiny_full_histories() -> Dataset:
    """All 16 ``(l1, a1, l2, a2)`` combinations as a dataset with ``Y = 0``."""
    rows = list(itertools.product((0, 1), repeat=4))
    L = np.array([[[r[0]], [r[2]]] for r in rows], dtype=float)
    A = np.array([[r[1], r[3]] for r in rows], dtype=float)
    return Dataset(L, A, np.zeros(len(rows)))


# ---------------------------------------------------------------------------
# oracles


def _default_oracle_seed(spec: DgpSpec) -> int:
    return int(np.random.SeedSequence([spec.seed, 0x0AC1E]).generate_state(1)[0])


def propensity_matrix(spec: DgpSpec, ds: Dataset) -> np.ndarray:
    """``P(A_t = 1 | H_t)`` for every row and step, shape ``(n, tau)``."""
    if spec.variant == "tiny":
        return _tiny_propensity(ds.L[:, :, 0].astype(int), ds.A.astype(int))
    s = history_scores(spec, ds)
    if spec.noise_sd_a == 0:
        return np.where(s > 0, 1.0, np.where(s < 0, 0.0, 0.5))
    return norm.cdf(s / spec.noise_sd_a)


def oracle_propensity(spec: DgpSpec, h: HistoryView) -> float:
    """Exact behavior propensity ``P(A_t = 1 | H_t)`` at a single history.

    Treatment is ``1{sigmoid(s + eps) > 0.5}`` with ``eps ~ N(0, sd^2)``, i.e.
    ``1{s + eps > 0}``, so the propensity is ``Phi(s / sd)``.
    """
    traj = h.traj
    t = h.t
    # only H_t is visible: mask everything from A_t on
    L = np.zeros_like(traj.L)
    A = np.zeros_like(traj.A)
    L[:t] = traj.L[:t]
    A[: t - 1] = traj.A[: t - 1]
    ds = Dataset(L[None], A[None], np.zeros(1))
    return float(propensity_matrix(spec, ds)[0, t - 1])


def _rollout_final(spec: DgpSpec, noise: dict, p: Policy, prefix_L=None, prefix_A=None) -> np.ndarray:
    if spec.variant == "tiny":
        fn = None if p.kind == "behavior_stochastic" else _tiny_vector_action_fn(p)
        return _rollout_tiny(noise, fn, prefix_L, prefix_A)[2]
    return _rollout(spec, noise, _policy_action_fn(spec, p), prefix_L, prefix_A)[2][:, -1]


def _mc_rows(spec: DgpSpec, seed: int, n_mc: int, fn, block: int = 16384) -> np.ndarray:
    out = []
    for start in range(0, n_mc, block):
        m = min(block, n_mc - start)
        out.append(fn(draw_noise(spec, seed, m, start)))
    return np.concatenate(out) if out else np.zeros(0)


def oracle_capo(spec: DgpSpec, p: Policy, n_mc: int = 100_000, seed: int = None, method: str = None) -> OracleResult:
    """Ground-truth mean final outcome under ``p``.

    Counterfactual rollouts force ``A_t`` to the policy's action at every
    step. The tiny variant is enumerated exactly unless ``method`` is
    ``"monte_carlo"``.
    """
    method = method or ("exhaustive" if spec.variant == "tiny" else "monte_carlo")
    if method == "exhaustive":
        if spec.variant != "tiny":
            raise ValueError("exhaustive oracles exist only for the tiny variant")
        return OracleResult(tiny_exhaustive_capo(p), 0.0, 0, "exhaustive")
    seed = _default_oracle_seed(spec) if seed is None else seed
    y = _mc_rows(spec, seed, n_mc, lambda nz: _rollout_final(spec, nz, p))
    se = float(y.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return OracleResult(float(y.mean()), se, int(n_mc), "monte_carlo")


def oracle_cate(spec: DgpSpec, p_i: Policy, p_j: Policy, n_mc: int = 100_000, seed: int = None,
                method: str = None) -> OracleResult:
    """``psi(p_i) - psi(p_j)`` with common random numbers across the two rollouts."""
    method = method or ("exhaustive" if spec.variant == "tiny" else "monte_carlo")
    if method == "exhaustive":
        if spec.variant != "tiny":
            raise ValueError("exhaustive oracles exist only for the tiny variant")
        return OracleResult(tiny_exhaustive_capo(p_i) - tiny_exhaustive_capo(p_j), 0.0, 0, "exhaustive")
    seed = _default_oracle_seed(spec) if seed is None else seed
    d = _mc_rows(spec, seed, n_mc, lambda nz: _rollout_final(spec, nz, p_i) - _rollout_final(spec, nz, p_j))
    se = float(d.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return OracleResult(float(d.mean()), se, int(n_mc), "monte_carlo")


def oracle_q(spec: DgpSpec, ds: Dataset, t: int, p: Policy, n_mc: int = 200, seed: int = None,
             actions: np.ndarray = None) -> np.ndarray:
    """True ``Q*_t(a_t, H_t)`` under the tail of ``p`` for every row of ``ds``.

    ``E[Y | H_t, A_t = a_t]`` when steps ``t+1..tau`` follow ``p``; ``a_t`` is
    the observed action unless ``actions`` (shape ``(n,)``) is given. Exact
    for the tiny variant, nested Monte-Carlo otherwise.
    """
    if not 1 <= t <= ds.tau:
        raise IndexError(f"t={t} outside 1..{ds.tau}")
    a_t = ds.A[:, t - 1] if actions is None else np.asarray(actions)
    prefix_L = ds.L[:, :t]
    prefix_A = np.array(ds.A[:, :t], dtype=float)
    prefix_A[:, t - 1] = a_t
    if spec.variant == "tiny":
        return _tiny_oracle_q(p, prefix_L[:, :, 0].astype(int), prefix_A.astype(int), t)
    seed = _default_oracle_seed(spec) + t if seed is None else seed
    n = ds.n
    out = np.empty(n)
    rows_per_block = max(1, 16384 // max(n_mc, 1))
    fn = _policy_action_fn(spec, p)
    for start in range(0, n, rows_per_block):
        stop = min(n, start + rows_per_block)
        m = stop - start
        noise = draw_noise(spec, seed, m * n_mc, start * n_mc)
        pl = np.repeat(prefix_L[start:stop], n_mc, axis=0)
        pa = np.repeat(prefix_A[start:stop], n_mc, axis=0)
        y = _rollout(spec, noise, fn, pl, pa)[2][:, -1]
        out[start:stop] = y.reshape(m, n_mc).mean(axis=1)
    return out


def _tiny_oracle_q(p: Policy, l: np.ndarray, a: np.ndarray, t: int) -> np.ndarray:
    rule = _tiny_rule(p)
    n = l.shape[0]
    out = np.empty(n)
    for r in range(n):
        l1, a1 = l[r, 0], a[r, 0]
        if t == 2:
            out[r] = TINY_P_Y[l1, a1, l[r, 1], a[r, 1]]
        else:
            val = 0.0
            for l2 in (0, 1):
                pl2 = TINY_P_L2[l1, a1] if l2 else 1.0 - TINY_P_L2[l1, a1]
                val += pl2 * TINY_P_Y[l1, a1, l2, rule(1, (l1, l2), (a1, 0))]
            out[r] = val
    return out
