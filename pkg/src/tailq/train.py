"""Joint multi-policy ICE training, the per-policy baseline, and model selection.

Joint training fits one network for all policies: at every step ``t`` and
policy ``k`` the live network regresses ``Q_t^(k)(A_t, H_t)`` on the lagged
target network's ``Q_{t+1}^(k)(a_dot_{t+1}^(k), H_{t+1})`` (``Y`` at the last
step), and the G-head is fit to the observed actions. Outcomes are
standardized internally; predictions are reported on the original scale.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, Policy, action_matrix
from .dgp import DgpSpec
from .embed import KernelConfig, PolicyEmbedding, deterministic_embedding, make_embedding
from .net import (ModelParams, NetConfig, backward, forward_batch, init_params, params_from_dict, params_to_dict,
                  polyak_update)

MODES = ("joint_peq", "separate_per_policy")

GRID = {
    "batch_size": (128, 256),
    "learning_rate": (5e-4, 1e-3, 5e-3),
    "hidden": (8, 16, 32),
    "dropout": (0.0, 0.1),
    "layers": (1, 2, 3),
    "tail_hidden": (8, 16),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 1e-3
    hidden: int = 16
    dropout: float = 0.0
    layers: int = 1
    tail_hidden: int = 8
    beta: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in GRID}


@dataclass
class Nuisances:
    """Initial nuisance predictions for one policy on one dataset (original outcome scale).

    ``q_obs[:, t]`` is ``Q_t(A_t, H_t)``, ``q_pol[:, t]`` is ``Q_t(a_dot_t, H_t)``
    and ``g[:, t]`` is the estimated ``P(A_t = 1 | H_t)``.
    """

    q_obs: np.ndarray
    q_pol: np.ndarray
    g: np.ndarray
    a_dot: np.ndarray


@dataclass
class TrainedEstimator:
    """Fitted networks and what they were fit for.

    Joint mode holds one network; separate mode holds one per policy, each with
    its own (single-policy) embedding.
    """

    params: list
    policies: tuple
    embeddings: list
    mode: str
    logs: list
    y_center: float
    y_scale: float
    config: TrainConfig
    dgp_spec: object = None
    diverged: bool = False

    @property
    def K(self) -> int:
        return len(self.policies)

    @property
    def embedding(self) -> PolicyEmbedding:
        return self.embeddings[0]

    @property
    def theta(self) -> ModelParams:
        return self.params[0]

    @classmethod
    def stack(cls, parts: Sequence["TrainedEstimator"]) -> "TrainedEstimator":
        """Combine single-policy runs into one separate-mode estimator."""
        if not parts:
            raise ValueError("nothing to stack")
        first = parts[0]
        for p in parts:
            if p.K != 1 or p.mode != "separate_per_policy":
                raise ValueError("stack expects single-policy separate runs")
            if (p.y_center, p.y_scale) != (first.y_center, first.y_scale):
                raise ValueError("runs were fit on different outcome scalings")
        return cls(
            params=[p.params[0] for p in parts],
            policies=tuple(p.policies[0] for p in parts),
            embeddings=[p.embeddings[0] for p in parts],
            mode="separate_per_policy",
            logs=[p.logs[0] for p in parts],
            y_center=first.y_center,
            y_scale=first.y_scale,
            config=first.config,
            dgp_spec=first.dgp_spec,
            diverged=any(p.diverged for p in parts),
        )

    def _groups(self):
        """``(params, embedding rows (tau, K_g, d), policy indices)`` per network."""
        if self.mode == "joint_peq":
            return [(self.params[0], self.embeddings[0].array(), list(range(self.K)))]
        return [(th, emb.array(), [k]) for k, (th, emb) in enumerate(zip(self.params, self.embeddings))]

    def predict(self, ds: Dataset, a_dot: np.ndarray = None) -> list:
        """Per-policy :class:`Nuisances` on ``ds``."""
        if a_dot is None:
            a_dot = action_matrix(self.policies, ds, self.dgp_spec)
        out = [None] * self.K
        obs = ds.A.T.astype(float)
        for theta, rho, idx in self._groups():
            Kg = len(idx)
            q_obs, g_logit, _ = forward_batch(theta, ds.L, ds.A, rho, np.broadcast_to(obs[:, None, :], (ds.tau, Kg, ds.n)))
            q_pol, _, _ = forward_batch(theta, ds.L, ds.A, rho, a_dot[idx].transpose(2, 0, 1))
            g = 1.0 / (1.0 + np.exp(-g_logit.T))
            for j, k in enumerate(idx):
                out[k] = Nuisances(
                    q_obs=q_obs[:, j, :].T * self.y_scale + self.y_center,
                    q_pol=q_pol[:, j, :].T * self.y_scale + self.y_center,
                    g=g,
                    a_dot=a_dot[k],
                )
        return out

    def capo_plugin(self, ds: Dataset) -> np.ndarray:
        """Untargeted G-computation estimates ``mean Q_1(a_dot_1, H_1)`` per policy."""
        return np.array([nu.q_pol[:, 0].mean() for nu in self.predict(ds)])

    def write_log(self, path) -> None:
        """CSV rows ``(epoch, t, policy_label, loss_kind, value)``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "t", "policy_label", "loss_kind", "value"])
            for log, (_, _, idx) in zip(self.logs, self._groups()):
                for e in range(log.shape[0]):
                    for t in range(log.shape[1]):
                        w.writerow([e + 1, t + 1, "", "G", repr(float(log[e, t, 0]))])
                        for j, k in enumerate(idx):
                            w.writerow([e + 1, t + 1, self.policies[k].label, "Q", repr(float(log[e, t, j + 1]))])


class EmbeddingMismatchError(ValueError):
    pass


def _outcome_standardization(Y: np.ndarray):
    c = float(Y.mean()) if Y.size else 0.0
    s = float(Y.std()) if Y.size else 1.0
    return c, (s if s > 0 else 1.0)


def _fit(ds: Dataset, a_dot: np.ndarray, rho: np.ndarray, cfg: TrainConfig, seed, y_center: float, y_scale: float):
    """The training loop shared by joint and separate modes.

    Returns ``(theta, log, diverged)`` where ``log[e, t]`` holds the epoch
    mean of ``[L_t^G, L_t^{Q,(1)}, ..., L_t^{Q,(K)}]``.
    """
    K, n, tau = a_dot.shape
    net_cfg = NetConfig(d_L=ds.d_L, d_rho=rho.shape[-1], hidden=cfg.hidden, tail_hidden=cfg.tail_hidden,
                        layers=cfg.layers, dropout=cfg.dropout)
    ss = np.random.SeedSequence([int(s) for s in np.atleast_1d(seed)])
    init_seed, loop_seed = ss.spawn(2)
    theta = init_params(net_cfg, np.random.default_rng(init_seed))
    target = theta.copy()
    rng = np.random.default_rng(loop_seed)
    Yz = (ds.Y - y_center) / y_scale
    L, A = ds.L, ds.A.astype(float)
    adot_t = a_dot.transpose(2, 0, 1).astype(float)
    log = np.zeros((cfg.epochs, tau, K + 1))
    lr = cfg.learning_rate
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            B = idx.size
            Lb, Ab, Yb = L[idx], A[idx], Yz[idx]
            q_tgt, _, _ = forward_batch(target, Lb, Ab, rho, adot_t[:, :, idx])
            tgt = np.empty_like(q_tgt)
            tgt[:-1] = q_tgt[1:]
            tgt[-1] = Yb
            obs = np.broadcast_to(Ab.T[:, None, :], (tau, K, B))
            q, g_logit, cache = forward_batch(theta, Lb, Ab, rho, obs, train=True, rng=rng)
            resid = q - tgt
            a_obs = Ab.T
            bce = np.logaddexp(0.0, g_logit) - a_obs * g_logit
            log[epoch, :, 0] += bce.sum(axis=1) / n
            log[epoch, :, 1:] += (resid ** 2).sum(axis=2) / n
            dq = 2.0 * resid / B
            dg = (1.0 / (1.0 + np.exp(-g_logit)) - a_obs) / B
            grads = backward(theta, cache, dq, dg)
            for k, v in theta.tensors.items():
                v -= lr * grads[k]
            polyak_update(target, theta, cfg.beta)
        if not np.all(np.isfinite(log[epoch])) or not theta.all_finite():
            return theta, log[: epoch + 1], True
    return theta, log, False


def _rho_array(embedding: PolicyEmbedding, K: int, tau: int) -> np.ndarray:
    if embedding.tau != tau or embedding.K != K:
        raise EmbeddingMismatchError(
            f"embedding covers {embedding.K} policies x {embedding.tau} steps, need {K} x {tau}")
    return embedding.array()


def train_peq(ds: Dataset, policies: Sequence[Policy], embedding: PolicyEmbedding, cfg: TrainConfig = TrainConfig(),
              dgp_spec=None, a_dot: np.ndarray = None) -> TrainedEstimator:
    """Fit one shared network for all ``policies`` conditioned on their tail embeddings."""
    policies = tuple(policies)
    if embedding.labels and tuple(embedding.labels) != tuple(p.label for p in policies):
        raise EmbeddingMismatchError("embedding labels do not match the policy list")
    rho = _rho_array(embedding, len(policies), ds.tau)
    if a_dot is None:
        a_dot = action_matrix(policies, ds, dgp_spec)
    c, s = _outcome_standardization(ds.Y)
    theta, log, diverged = _fit(ds, a_dot, rho, cfg, [cfg.seed, 0], c, s)
    return TrainedEstimator([theta], policies, [embedding], "joint_peq", [log], c, s, cfg, dgp_spec, diverged)


def single_policy_embedding(p: Policy, tau: int, d: int = 2) -> PolicyEmbedding:
    """Embedding used by a one-policy run: the action bypass for fixed sequences, zeros otherwise."""
    if p.kind == "fixed_sequence":
        return deterministic_embedding([p], tau)
    return PolicyEmbedding([np.zeros((1, d)) for _ in range(tau)], d, tuple([0.0] * tau), (p.label,))


def train_separate(ds: Dataset, policy: Policy, cfg: TrainConfig = TrainConfig(), dgp_spec=None,
                   run_seed: int = None, d: int = 2) -> TrainedEstimator:
    """Fit a network for a single policy with its own random initialization.

    ``run_seed`` distinguishes independent runs that share ``cfg.seed``.
    """
    emb = single_policy_embedding(policy, ds.tau, d)
    a_dot = action_matrix([policy], ds, dgp_spec)
    c, s = _outcome_standardization(ds.Y)
    seed = [cfg.seed, 1, 0 if run_seed is None else int(run_seed) + 1]
    theta, log, diverged = _fit(ds, a_dot, emb.array(), cfg, seed, c, s)
    return TrainedEstimator([theta], (policy,), [emb], "separate_per_policy", [log], c, s, cfg, dgp_spec, diverged)


def train_all_separate(ds: Dataset, policies: Sequence[Policy], cfg: TrainConfig = TrainConfig(), dgp_spec=None,
                       d: int = 2) -> TrainedEstimator:
    return TrainedEstimator.stack([train_separate(ds, p, cfg, dgp_spec, run_seed=k, d=d) for k, p in enumerate(policies)])


def factual_loss(est: TrainedEstimator, ds: Dataset, model: int = 0) -> float:
    """MSE of the last-step Q at the observed action (empty tail) against ``Y`` plus the summed G cross-entropy.

    The MSE is measured on the standardized outcome scale the network was fit on.
    """
    if est.diverged:
        return float("inf")
    theta = est.params[model]
    tau = ds.tau
    rho = np.zeros((tau, 1, theta.config.d_rho))
    q, g_logit, _ = forward_batch(theta, ds.L, ds.A, rho, ds.A.T[:, None, :].astype(float))
    yz = (ds.Y - est.y_center) / est.y_scale
    mse = float(np.mean((q[-1, 0] - yz) ** 2))
    bce = float((np.logaddexp(0.0, g_logit) - ds.A.T * g_logit).mean(axis=1).sum())
    val = mse + bce
    return val if np.isfinite(val) else float("inf")


def sample_grid(grid: dict, n_draws: int, rng: np.random.Generator) -> list:
    """``n_draws`` distinct grid points (all of them when the grid is smaller)."""
    keys = list(grid)
    points = [dict(zip(keys, vals)) for vals in np.ndindex(*[len(grid[k]) for k in keys])]
    points = [{k: grid[k][i] for k, i in p.items()} for p in points]
    if n_draws >= len(points):
        order = rng.permutation(len(points))
    else:
        order = rng.choice(len(points), n_draws, replace=False)
    return [points[i] for i in order[:n_draws]]


@dataclass
class SelectionResult:
    best: TrainConfig
    candidates: list
    losses: list


def select_hyperparams(train_ds: Dataset, val_ds: Dataset, grid: dict = None, n_draws: int = 1, seed: int = 0,
                       base: TrainConfig = TrainConfig(), policies: Sequence[Policy] = None,
                       mode: str = "joint_peq", dgp_spec=None, kernel: KernelConfig = KernelConfig(),
                       d: int = 2) -> SelectionResult:
    """Random search over ``grid`` minimizing the validation factual loss.

    Joint mode trains on all ``policies``; separate mode trains the first
    policy alone. Ties go to the earliest draw.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    grid = GRID if grid is None else grid
    policies = list(policies) if policies else [Policy.behavior()]
    rng = np.random.default_rng([seed, 0x5E1])
    draws = sample_grid(grid, n_draws, rng)
    emb = make_embedding(train_ds, policies, kernel, d, dgp_spec) if mode == "joint_peq" else None
    candidates, losses = [], []
    for hp in draws:
        cfg = replace(base, **hp)
        if mode == "joint_peq":
            est = train_peq(train_ds, policies, emb, cfg, dgp_spec)
        else:
            est = train_separate(train_ds, policies[0], cfg, dgp_spec, d=d)
        candidates.append(cfg)
        losses.append(factual_loss(est, val_ds))
    best = int(np.argmin(losses))
    return SelectionResult(candidates[best], candidates, losses)


def save_estimator(est: TrainedEstimator, directory) -> Path:
    """Write ``estimator.json`` (weights, embeddings, policies, scaling) and ``train_log.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = {
        "mode": est.mode,
        "policies": [p.to_dict() for p in est.policies],
        "embeddings": [{"rho": [r.tolist() for r in e.rho], "d": e.d, "stress": list(e.stress),
                        "labels": list(e.labels)} for e in est.embeddings],
        "params": [params_to_dict(th) for th in est.params],
        "y_center": est.y_center,
        "y_scale": est.y_scale,
        "config": asdict(est.config),
        "dgp_spec": None if est.dgp_spec is None else est.dgp_spec.to_dict(),
        "diverged": est.diverged,
    }
    (d / "estimator.json").write_text(json.dumps(blob))
    if est.logs:
        est.write_log(d / "train_log.csv")
    return d / "estimator.json"


def load_estimator(path) -> TrainedEstimator:
    """Inverse of :func:`save_estimator`; accepts the directory or the JSON file. Logs are not restored."""
    path = Path(path)
    if path.is_dir():
        path = path / "estimator.json"
    blob = json.loads(path.read_text())
    embs = [PolicyEmbedding([np.asarray(r, dtype=float).reshape(len(r), -1) for r in e["rho"]], e["d"],
                            tuple(e["stress"]), tuple(e["labels"])) for e in blob["embeddings"]]
    return TrainedEstimator(
        params=[params_from_dict(p) for p in blob["params"]],
        policies=tuple(Policy(**p) for p in blob["policies"]),
        embeddings=embs,
        mode=blob["mode"],
        logs=[],
        y_center=blob["y_center"],
        y_scale=blob["y_scale"],
        config=TrainConfig(**blob["config"]),
        dgp_spec=None if blob["dgp_spec"] is None else DgpSpec.from_dict(blob["dgp_spec"]),
        diverged=blob["diverged"],
    )
