"""Domain types, JSON-lines serialization and policy application.

A trajectory is ``O = (L_1, A_1, ..., L_tau, A_tau, Y)``. Datasets are stored
array-backed (``L`` of shape ``(n, tau, d_L)``, ``A`` of shape ``(n, tau)``,
``Y`` of shape ``(n,)``) and are immutable after construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when trajectory dimensions disagree."""


class MalformedRecordError(ValueError):
    """Raised when a JSON-lines record cannot be parsed."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class FutureAccessError(IndexError):
    """Raised when a history view is asked for a variable it cannot see."""


class MissingContextError(ValueError):
    """Raised when a threshold policy is applied without a generator spec."""


@dataclass(frozen=True)
class Trajectory:
    id: str
    L: np.ndarray
    A: np.ndarray
    Y: float

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        A = np.asarray(self.A, dtype=np.int8)
        if L.ndim != 2:
            raise ShapeError(f"trajectory {self.id}: L must be 2-d, got shape {L.shape}")
        if A.shape != (L.shape[0],):
            raise ShapeError(f"trajectory {self.id}: {A.shape[0]} actions for {L.shape[0]} steps")
        if not np.all((A == 0) | (A == 1)):
            raise ValueError(f"trajectory {self.id}: actions must be 0/1")
        if not np.isfinite(self.Y):
            raise ValueError(f"trajectory {self.id}: outcome is not finite")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", float(self.Y))

    @property
    def tau(self) -> int:
        return self.L.shape[0]


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.array(x, copy=True)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` longitudinal trajectories sharing ``tau`` and ``d_L``.

    Parameters
    ----------
    L : array, shape (n, tau, d_L)
        Time-varying covariates; intermediate outcomes are packed in here.
    A : array, shape (n, tau)
        Binary treatments.
    Y : array, shape (n,)
        Final outcome observed after step ``tau``.
    ids : sequence of str, optional
        Trajectory identifiers, ``"0" .. "n-1"`` when omitted.
    """

    L: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    ids: tuple = None
    outcome_bounds: Optional[tuple] = field(default=None)

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        A = np.asarray(self.A)
        Y = np.asarray(self.Y, dtype=float)
        if L.ndim != 3:
            raise ShapeError(f"L must have shape (n, tau, d_L), got {L.shape}")
        n, tau, d_L = L.shape
        if tau < 1 or d_L < 1:
            raise ShapeError("tau and d_L must be positive")
        if A.shape != (n, tau):
            raise ShapeError(f"A has shape {A.shape}, expected {(n, tau)}")
        if Y.shape != (n,):
            raise ShapeError(f"Y has shape {Y.shape}, expected {(n,)}")
        if n and not np.all((A == 0) | (A == 1)):
            raise ValueError("actions must be binary")
        if not np.all(np.isfinite(Y)):
            raise ValueError("outcomes must be finite")
        ids = tuple(str(i) for i in range(n)) if self.ids is None else tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise ShapeError(f"{len(ids)} ids for {n} trajectories")
        object.__setattr__(self, "L", _frozen(L))
        object.__setattr__(self, "A", _frozen(A.astype(np.int8)))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "ids", ids)
        bounds = (float(Y.min()), float(Y.max())) if n else None
        object.__setattr__(self, "outcome_bounds", bounds)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def tau(self) -> int:
        return self.L.shape[1]

    @property
    def d_L(self) -> int:
        return self.L.shape[2]

    def __len__(self) -> int:
        return self.n

    @property
    def trajectories(self) -> list:
        return [Trajectory(self.ids[i], self.L[i], self.A[i], self.Y[i]) for i in range(self.n)]

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], tau: int = None, d_L: int = None) -> "Dataset":
        if not trajs:
            if tau is None or d_L is None:
                raise ShapeError("tau and d_L are required for an empty dataset")
            return cls(np.zeros((0, tau, d_L)), np.zeros((0, tau)), np.zeros(0))
        shapes = {t.L.shape for t in trajs}
        if len(shapes) != 1:
            raise ShapeError(f"ragged trajectories: shapes {sorted(shapes)}")
        return cls(
            np.stack([t.L for t in trajs]),
            np.stack([t.A for t in trajs]),
            np.array([t.Y for t in trajs]),
            ids=[t.id for t in trajs],
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        ids = [self.ids[i] for i in np.arange(self.n)[index]]
        return Dataset(self.L[index], self.A[index], self.Y[index], ids=ids)

    def with_outcome(self, Y) -> "Dataset":
        return Dataset(self.L, self.A, Y, ids=self.ids)

    def history(self, i: int, t: int) -> "HistoryView":
        return HistoryView(Trajectory(self.ids[i], self.L[i], self.A[i], self.Y[i]), t)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.ids == other.ids
            and self.L.shape == other.L.shape
            and np.array_equal(self.L, other.L)
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.Y, other.Y)
        )


@dataclass(frozen=True)
class HistoryView:
    """Read-only window ``H_t = (L_1, A_1, ..., A_{t-1}, L_t)`` onto a trajectory.

    Indices are 1-based, matching the time index ``t``.
    """

    traj: Trajectory
    t: int

    def __post_init__(self):
        if not 1 <= self.t <= self.traj.tau:
            raise IndexError(f"t={self.t} outside 1..{self.traj.tau}")

    def L(self, s: int) -> np.ndarray:
        if s < 1:
            raise IndexError(f"s={s} < 1")
        if s > self.t:
            raise FutureAccessError(f"L_{s} is not part of H_{self.t}")
        return self.traj.L[s - 1]

    def A(self, s: int) -> int:
        if s < 1:
            raise IndexError(f"s={s} < 1")
        if s >= self.t:
            raise FutureAccessError(f"A_{s} is not part of H_{self.t}")
        return int(self.traj.A[s - 1])

    @property
    def Y(self):
        raise FutureAccessError("the final outcome is not part of any history")

    def covariates(self) -> np.ndarray:
        return self.traj.L[: self.t].copy()

    def actions(self) -> np.ndarray:
        return self.traj.A[: self.t - 1].copy()

    def features(self) -> np.ndarray:
        """Flattened ``(L_1..L_t, A_1..A_{t-1})`` zero-padded to the width of ``H_tau``."""
        tau, d_L = self.traj.L.shape
        out = np.zeros(tau * d_L + tau - 1)
        out[: self.t * d_L] = self.traj.L[: self.t].ravel()
        out[tau * d_L: tau * d_L + self.t - 1] = self.traj.A[: self.t - 1]
        return out


def history_features(ds: Dataset, t: int) -> np.ndarray:
    """Vectorized :meth:`HistoryView.features` for every trajectory at step ``t``."""
    if not 1 <= t <= ds.tau:
        raise IndexError(f"t={t} outside 1..{ds.tau}")
    width = ds.tau * ds.d_L + ds.tau - 1
    out = np.zeros((ds.n, width))
    out[:, : t * ds.d_L] = ds.L[:, :t].reshape(ds.n, -1)
    out[:, ds.tau * ds.d_L: ds.tau * ds.d_L + t - 1] = ds.A[:, : t - 1]
    return out


POLICY_KINDS = ("threshold", "fixed_sequence", "behavior_stochastic")


@dataclass(frozen=True)
class Policy:
    """A treatment rule evaluated on observed histories.

    ``threshold`` policies treat when ``sigmoid(score(H_t)) > gamma_t``, where the
    score is the generator's noise-free treatment score. ``fixed_sequence``
    policies ignore the history. ``behavior_stochastic`` stands for the data's
    own assignment mechanism and returns the observed actions.
    """

    kind: str
    label: str
    gammas: Optional[tuple] = None
    sequence: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "threshold":
            if self.gammas is None:
                raise ValueError("threshold policy needs a gamma schedule")
            g = tuple(float(x) for x in self.gammas)
            if any(not 0.0 <= x <= 1.0 for x in g):
                raise ValueError(f"thresholds must lie in [0, 1], got {g}")
            object.__setattr__(self, "gammas", g)
        if self.kind == "fixed_sequence":
            if self.sequence is None:
                raise ValueError("fixed_sequence policy needs an action sequence")
            s = tuple(int(x) for x in self.sequence)
            if any(x not in (0, 1) for x in s):
                raise ValueError(f"actions must be 0/1, got {s}")
            object.__setattr__(self, "sequence", s)

    @classmethod
    def threshold(cls, gammas, label: str = None) -> "Policy":
        gammas = tuple(gammas)
        return cls("threshold", label or "gamma=" + ",".join(f"{g:g}" for g in gammas), gammas=gammas)

    @classmethod
    def constant_threshold(cls, gamma: float, tau: int, label: str = None) -> "Policy":
        return cls.threshold([gamma] * tau, label or f"gamma={gamma:g}")

    @classmethod
    def fixed(cls, sequence, label: str = None) -> "Policy":
        sequence = tuple(sequence)
        return cls("fixed_sequence", label or "".join(str(int(a)) for a in sequence), sequence=sequence)

    @classmethod
    def behavior(cls, label: str = "behavior") -> "Policy":
        return cls("behavior_stochastic", label)

    @property
    def deterministic(self) -> bool:
        return self.kind != "behavior_stochastic"

    def check_horizon(self, tau: int) -> None:
        n = len(self.gammas) if self.kind == "threshold" else len(self.sequence) if self.kind == "fixed_sequence" else tau
        if n != tau:
            raise ShapeError(f"policy {self.label!r} has length {n}, dataset has tau={tau}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "label": self.label}
        if self.gammas is not None:
            d["gammas"] = list(self.gammas)
        if self.sequence is not None:
            d["sequence"] = list(self.sequence)
        return d


def apply_policy(p: Policy, ds: Dataset, dgp_spec=None) -> np.ndarray:
    """Counterfactual actions ``a_dot[l, t]`` of policy ``p`` on the observed histories.

    Returns an int8 array of shape ``(n, tau)``.
    """
    p.check_horizon(ds.tau)
    if p.kind == "fixed_sequence":
        return np.tile(np.asarray(p.sequence, dtype=np.int8), (ds.n, 1))
    if p.kind == "behavior_stochastic":
        return np.array(ds.A, dtype=np.int8)
    if dgp_spec is None:
        raise MissingContextError(f"threshold policy {p.label!r} needs the generator spec to compute its score")
    from .dgp import history_scores

    prob = _sigmoid(history_scores(dgp_spec, ds))
    return (prob > np.asarray(p.gammas)[None, :]).astype(np.int8)


def action_matrix(policies: Sequence[Policy], ds: Dataset, dgp_spec=None) -> np.ndarray:
    """Stacked :func:`apply_policy` rows, shape ``(K, n, tau)``."""
    if not policies:
        return np.zeros((0, ds.n, ds.tau), dtype=np.int8)
    return np.stack([apply_policy(p, ds, dgp_spec) for p in policies])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def save_dataset(ds: Dataset, path) -> None:
    """Write one JSON object per trajectory: ``{"id", "L", "A", "Y"}``."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(ds.n):
            rec = {
                "id": ds.ids[i],
                "L": ds.L[i].tolist(),
                "A": [int(a) for a in ds.A[i]],
                "Y": float(ds.Y[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path, format: str = "jsonl") -> Dataset:
    if format != "jsonl":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    trajs = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise MalformedRecordError(line_no, "record is not an object")
            missing = {"id", "L", "A", "Y"} - set(rec)
            if missing:
                raise MalformedRecordError(line_no, f"missing keys {sorted(missing)}")
            try:
                L = np.asarray(rec["L"], dtype=float)
                A = np.asarray(rec["A"], dtype=float)
                Y = float(rec["Y"])
            except (TypeError, ValueError) as exc:
                raise MalformedRecordError(line_no, f"non-numeric field ({exc})") from None
            if L.ndim != 2:
                raise ShapeError(f"line {line_no}: L must be a tau x d_L matrix")
            if A.shape != (L.shape[0],):
                raise ShapeError(f"line {line_no}: {A.size} actions for {L.shape[0]} covariate rows")
            trajs.append(Trajectory(str(rec["id"]), L, A, Y))
    if not trajs:
        raise ShapeError(f"{path} contains no trajectories; tau is undetermined")
    shapes = {t.L.shape for t in trajs}
    if len(shapes) != 1:
        first = trajs[0].L.shape
        for line_no, t in enumerate(trajs, start=1):
            if t.L.shape != first:
                raise ShapeError(f"record {line_no} has shape {t.L.shape}, expected {first}")
    return Dataset.from_trajectories(trajs)
