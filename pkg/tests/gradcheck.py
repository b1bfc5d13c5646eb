"""Central finite-difference check of ``net.backward`` shared by the unit and acceptance tests."""
import numpy as np

from tailq.net import NetConfig, backward, forward_batch, init_params


def make_problem(layers=1, hidden=5, tail_hidden=4, dropout=0.0, B=3, tau=4, K=2, d_L=3, d_rho=2, seed=0):
    rng = np.random.default_rng(seed)
    cfg = NetConfig(d_L=d_L, d_rho=d_rho, hidden=hidden, tail_hidden=tail_hidden, layers=layers, dropout=dropout)
    theta = init_params(cfg, seed)
    for v in theta.tensors.values():
        v += 0.1 * rng.standard_normal(v.shape)
    L = rng.standard_normal((B, tau, d_L))
    A = rng.integers(0, 2, (B, tau)).astype(float)
    rho = rng.standard_normal((tau, K, d_rho))
    qa = rng.integers(0, 2, (tau, K, B)).astype(float)
    cq = rng.standard_normal((tau, K, B))
    cg = rng.standard_normal((tau, B))
    return theta, (L, A, rho, qa), cq, cg


def worst_relative_errors(theta, inputs, cq, cg, h=1e-5, dropout_seed=None):
    """Per-group ``||g_fd - g_bp|| / max(||g_fd|| + ||g_bp||, 1e-12)`` for the loss ``sum(cq*q) + sum(cg*g)``."""
    def run(th):
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        return forward_batch(th, *inputs, train=dropout_seed is not None, rng=rng)

    def loss(th):
        q, g, _ = run(th)
        return float((cq * q).sum() + (cg * g).sum())

    _, _, cache = run(theta)
    grads = backward(theta, cache, cq, cg)
    out = {}
    for name, v in theta.tensors.items():
        fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            up = loss(theta)
            v[idx] = old - h
            dn = loss(theta)
            v[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        bp = grads[name]
        out[name] = float(np.linalg.norm(fd - bp) / max(np.linalg.norm(fd) + np.linalg.norm(bp), 1e-12))
    return out
