"""Recurrent Q/G network with exact reverse-mode gradients.

Components, all with tanh activations:

* history encoder ``phi``: stacked RNN over ``[L_t; A_{t-1}]`` (``A_0 = 0``)
  giving ``h_t``, which sees ``H_t`` only;
* tail encoder ``rho~``: stacked RNN running backward over per-step policy
  embeddings; the tail code at step ``t`` is ``e_{t+1}`` (zero at ``t = tau``);
* Q-head: one hidden layer on ``[h_t; a_t; e_{t+1}]`` with a linear output;
* G-head: one hidden layer on ``h_t`` with a logit output.

Dropout (inverted) is applied to ``h_t`` where it enters the heads, during
training only. Shapes follow the convention ``(tau, K, B)`` for per-policy
quantities and ``(tau, B)`` for shared ones.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Trajectory


@dataclass(frozen=True)
class NetConfig:
    d_L: int
    d_rho: int
    hidden: int = 16
    tail_hidden: int = 8
    layers: int = 1
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.d_L, self.d_rho, self.hidden, self.tail_hidden, self.layers) < 1:
            raise ValueError("network dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class ModelParams:
    """Named parameter tensors plus the architecture they belong to."""

    def __init__(self, config: NetConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())

    def distance(self, other: "ModelParams") -> float:
        return float(np.sqrt(sum(((v - other.tensors[k]) ** 2).sum() for k, v in self.tensors.items())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def _shapes(cfg: NetConfig) -> dict:
    nh, ne = cfg.hidden, cfg.tail_hidden
    shapes = {}
    for l in range(cfg.layers):
        shapes[f"h{l}_Wx"] = ((cfg.d_L + 1) if l == 0 else nh, nh)
        shapes[f"h{l}_Wh"] = (nh, nh)
        shapes[f"h{l}_b"] = (nh,)
    for l in range(cfg.layers):
        shapes[f"e{l}_Wx"] = (cfg.d_rho if l == 0 else ne, ne)
        shapes[f"e{l}_Wh"] = (ne, ne)
        shapes[f"e{l}_b"] = (ne,)
    shapes.update(
        q_W1h=(nh, nh), q_w1a=(nh,), q_W1e=(ne, nh), q_b1=(nh,), q_w2=(nh,), q_b2=(1,),
        g_W1=(nh, nh), g_b1=(nh,), g_w2=(nh,), g_b2=(1,),
    )
    return shapes


def _fan_in(cfg: NetConfig, name: str) -> int:
    shapes = _shapes(cfg)
    if name[0] in "he" and name.endswith(("_Wx", "_Wh")):
        width = cfg.hidden if name[0] == "h" else cfg.tail_hidden
        return shapes[name[:-3] + "_Wx"][0] + width
    if name.startswith("q_"):
        return cfg.hidden + 1 + cfg.tail_hidden
    return cfg.hidden


def init_params(cfg: NetConfig, seed: int = 0) -> ModelParams:
    """Weights ``~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith(("_b", "_b1", "_b2")):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(cfg, name))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, tensors)


def zero_params(cfg: NetConfig) -> ModelParams:
    return ModelParams(cfg, {k: np.zeros(s) for k, s in _shapes(cfg).items()})


# ---------------------------------------------------------------------------
# forward / backward


def _history_inputs(L: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``[L_t; A_{t-1}]`` stacked over time, shape ``(tau, B, d_L + 1)``."""
    B, tau, _ = L.shape
    a_prev = np.zeros((B, tau))
    a_prev[:, 1:] = A[:, :-1]
    return np.concatenate([L, a_prev[:, :, None]], axis=2).transpose(1, 0, 2)


def _rnn_forward(inp: np.ndarray, Wx, Wh, b, reverse: bool) -> np.ndarray:
    T = inp.shape[0]
    pre = inp @ Wx + b
    out = np.empty(pre.shape)
    state = np.zeros(pre.shape[1:])
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for s in steps:
        state = np.tanh(pre[s] + state @ Wh)
        out[s] = state
    return out


def _rnn_backward(inp, out, d_out, Wx, Wh, reverse: bool):
    """Gradients of a tanh RNN layer; returns ``(dWx, dWh, db, d_inp)``."""
    T = out.shape[0]
    d_pre = np.empty(out.shape)
    carry = np.zeros(out.shape[1:])
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for s in steps:
        da = (d_out[s] + carry) * (1.0 - out[s] ** 2)
        d_pre[s] = da
        carry = da @ Wh.T
    prev = np.zeros(out.shape)
    if reverse:
        prev[:-1] = out[1:]
    else:
        prev[1:] = out[:-1]
    flat = lambda x: x.reshape(-1, x.shape[-1])
    dWx = flat(inp).T @ flat(d_pre)
    dWh = flat(prev).T @ flat(d_pre)
    db = flat(d_pre).sum(axis=0)
    return dWx, dWh, db, d_pre @ Wx.T


def tail_codes(theta: ModelParams, rho: np.ndarray):
    """Backward tail encoder over ``rho`` (shape ``(tau, K, d)``).

    Returns ``(codes, layer_outputs)`` where ``codes[j]`` is the top-layer
    state one step ahead of ``j`` (``e_{t+1}`` for 1-based ``t = j + 1``),
    zero at the last step.
    """
    cfg = theta.config
    if rho.shape[-1] != cfg.d_rho:
        raise ValueError(f"embedding rows have dimension {rho.shape[-1]}, network expects {cfg.d_rho}")
    outs = []
    inp = rho
    for l in range(cfg.layers):
        inp = _rnn_forward(inp, theta[f"e{l}_Wx"], theta[f"e{l}_Wh"], theta[f"e{l}_b"], reverse=True)
        outs.append(inp)
    codes = np.zeros(inp.shape)
    codes[:-1] = inp[1:]
    return codes, outs


def forward_batch(theta: ModelParams, L: np.ndarray, A: np.ndarray, rho: np.ndarray, q_actions: np.ndarray,
                  train: bool = False, rng: Optional[np.random.Generator] = None):
    """Q and G outputs for a batch.

    Parameters
    ----------
    L : array, shape (B, tau, d_L)
    A : array, shape (B, tau)
        Observed actions (feed the history encoder as ``A_{t-1}``).
    rho : array, shape (tau, K, d)
        Per-step policy embeddings.
    q_actions : array, shape (tau, K, B)
        Action fed to the Q-head for each step, policy and unit.
    train : bool
        Enables dropout (needs ``rng``).

    Returns
    -------
    q : array, shape (tau, K, B)
    g_logit : array, shape (tau, B)
    cache : dict
        Intermediates for :func:`backward`.
    """
    cfg = theta.config
    L = np.asarray(L, dtype=float)
    A = np.asarray(A, dtype=float)
    rho = np.asarray(rho, dtype=float)
    q_actions = np.asarray(q_actions, dtype=float)
    x0 = _history_inputs(L, A)
    h_outs = []
    inp = x0
    for l in range(cfg.layers):
        inp = _rnn_forward(inp, theta[f"h{l}_Wx"], theta[f"h{l}_Wh"], theta[f"h{l}_b"], reverse=False)
        h_outs.append(inp)
    H = inp
    mask = None
    if train and cfg.dropout > 0:
        if rng is None:
            raise ValueError("dropout needs a random generator")
        mask = (rng.random(H.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        Hd = H * mask
    else:
        Hd = H
    codes, e_outs = tail_codes(theta, rho)

    pre = (
        (Hd @ theta["q_W1h"])[:, None, :, :]
        + q_actions[..., None] * theta["q_w1a"]
        + (codes @ theta["q_W1e"])[:, :, None, :]
        + theta["q_b1"]
    )
    Zq = np.tanh(pre)
    q = Zq @ theta["q_w2"] + theta["q_b2"][0]
    Zg = np.tanh(Hd @ theta["g_W1"] + theta["g_b1"])
    g_logit = Zg @ theta["g_w2"] + theta["g_b2"][0]
    cache = dict(x0=x0, h_outs=h_outs, Hd=Hd, mask=mask, rho=rho, codes=codes, e_outs=e_outs,
                 q_actions=q_actions, Zq=Zq, Zg=Zg)
    return q, g_logit, cache


def backward(theta: ModelParams, cache: dict, dq: np.ndarray, dg: np.ndarray) -> dict:
    """Exact gradients of ``sum(dq * q) + sum(dg * g_logit)`` for the recorded forward pass."""
    cfg = theta.config
    grads = {}
    Zq, Zg, Hd, codes = cache["Zq"], cache["Zg"], cache["Hd"], cache["codes"]
    dq = np.asarray(dq, dtype=float)
    dg = np.asarray(dg, dtype=float)
    flat = lambda x: x.reshape(-1, x.shape[-1])

    grads["q_w2"] = np.einsum("tkb,tkbh->h", dq, Zq)
    grads["q_b2"] = np.array([dq.sum()])
    d_pre = dq[..., None] * theta["q_w2"] * (1.0 - Zq ** 2)
    d_pre_k = d_pre.sum(axis=1)
    d_pre_b = d_pre.sum(axis=2)
    grads["q_W1h"] = flat(Hd).T @ flat(d_pre_k)
    grads["q_w1a"] = np.einsum("tkb,tkbh->h", cache["q_actions"], d_pre)
    grads["q_W1e"] = flat(codes).T @ flat(d_pre_b)
    grads["q_b1"] = d_pre_k.sum(axis=(0, 1))
    d_codes = d_pre_b @ theta["q_W1e"].T
    dHd = d_pre_k @ theta["q_W1h"].T

    grads["g_w2"] = np.einsum("tb,tbh->h", dg, Zg)
    grads["g_b2"] = np.array([dg.sum()])
    dpg = dg[..., None] * theta["g_w2"] * (1.0 - Zg ** 2)
    grads["g_W1"] = flat(Hd).T @ flat(dpg)
    grads["g_b1"] = flat(dpg).sum(axis=0)
    dHd = dHd + dpg @ theta["g_W1"].T

    dH = dHd if cache["mask"] is None else dHd * cache["mask"]
    h_outs = cache["h_outs"]
    d_out = dH
    for l in range(cfg.layers - 1, -1, -1):
        inp = cache["x0"] if l == 0 else h_outs[l - 1]
        gx, gh, gb, d_out = _rnn_backward(inp, h_outs[l], d_out, theta[f"h{l}_Wx"], theta[f"h{l}_Wh"], reverse=False)
        grads[f"h{l}_Wx"], grads[f"h{l}_Wh"], grads[f"h{l}_b"] = gx, gh, gb

    e_outs = cache["e_outs"]
    d_out = np.zeros(e_outs[-1].shape)
    d_out[1:] = d_codes[:-1]
    for l in range(cfg.layers - 1, -1, -1):
        inp = cache["rho"] if l == 0 else e_outs[l - 1]
        gx, gh, gb, d_out = _rnn_backward(inp, e_outs[l], d_out, theta[f"e{l}_Wx"], theta[f"e{l}_Wh"], reverse=True)
        grads[f"e{l}_Wx"], grads[f"e{l}_Wh"], grads[f"e{l}_b"] = gx, gh, gb
    assert set(grads) == set(theta.tensors), "gradient groups out of sync with parameters"
    return grads


# ---------------------------------------------------------------------------
# single-trajectory views


def _tail_array(rho_tail, t: int, tau: int, d: int) -> np.ndarray:
    rho_tail = np.zeros((0, d)) if rho_tail is None else np.atleast_2d(np.asarray(rho_tail, dtype=float))
    if rho_tail.size == 0:
        rho_tail = np.zeros((0, d))
    if rho_tail.shape != (tau - t, d):
        raise ValueError(f"tail at t={t} needs shape {(tau - t, d)}, got {rho_tail.shape}")
    rho = np.zeros((tau, 1, d))
    rho[t:, 0, :] = rho_tail
    return rho


def _check_t(traj: Trajectory, t: int):
    if not 1 <= t <= traj.tau:
        raise IndexError(f"t={t} outside 1..{traj.tau}")


def forward_q(theta: ModelParams, traj: Trajectory, t: int, a_t: int, rho_tail=None) -> float:
    """``Q_t(a_t, H_t; rho_{t+1:tau})`` for one trajectory; ``rho_tail`` has ``tau - t`` rows."""
    _check_t(traj, t)
    tau = traj.tau
    rho = _tail_array(rho_tail, t, tau, theta.config.d_rho)
    qa = np.zeros((tau, 1, 1))
    qa[t - 1] = a_t
    q, _, _ = forward_batch(theta, traj.L[None], traj.A[None], rho, qa)
    return float(q[t - 1, 0, 0])


def forward_g(theta: ModelParams, traj: Trajectory, t: int) -> float:
    """``P(A_t = 1 | H_t)`` from the G-head."""
    _check_t(traj, t)
    rho = np.zeros((traj.tau, 1, theta.config.d_rho))
    _, g, _ = forward_batch(theta, traj.L[None], traj.A[None], rho, np.zeros((traj.tau, 1, 1)))
    return float(1.0 / (1.0 + np.exp(-g[t - 1, 0])))


def encode_tail(theta: ModelParams, rho_tail) -> np.ndarray:
    """Top-layer tail code for rows ``rho_{t+1}..rho_tau``; the empty tail encodes to zero."""
    d = theta.config.d_rho
    if rho_tail is None or np.size(rho_tail) == 0:
        return np.zeros(theta.config.tail_hidden)
    rho_tail = np.asarray(rho_tail, dtype=float)
    if rho_tail.ndim != 2 or rho_tail.shape[1] != d:
        raise ValueError(f"tail rows must have dimension {d}, got shape {rho_tail.shape}")
    if rho_tail.shape[0] == 0:
        return np.zeros(theta.config.tail_hidden)
    rho = np.concatenate([np.zeros((1, d)), rho_tail])[:, None, :]
    codes, _ = tail_codes(theta, rho)
    return codes[0, 0].copy()


def encode_deterministic_tail(a_tail) -> np.ndarray:
    """One-dimensional embedding rows ``(a_s,)`` for a fixed action tail."""
    return np.asarray(a_tail, dtype=float).reshape(-1, 1)


def polyak_update(target: ModelParams, theta: ModelParams, beta: float) -> ModelParams:
    """In-place ``theta' <- beta * theta + (1 - beta) * theta'``; returns ``target``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    for k, v in target.tensors.items():
        src = theta.tensors[k]
        if src.shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {src.shape} vs {v.shape}")
        v *= 1.0 - beta
        v += beta * src
    return target


# ---------------------------------------------------------------------------
# checkpoints


def params_to_dict(theta: ModelParams) -> dict:
    return {
        "config": asdict(theta.config),
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in theta.tensors.items()},
    }


def params_from_dict(d: dict) -> ModelParams:
    cfg = NetConfig(**d["config"])
    tensors = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["tensors"].items()}
    expected = _shapes(cfg)
    for k, s in expected.items():
        if k not in tensors or tensors[k].shape != tuple(s):
            raise ValueError(f"checkpoint tensor {k} missing or misshaped")
    return ModelParams(cfg, tensors)


def save_params(theta: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(theta)))


def load_params(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
