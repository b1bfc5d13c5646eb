import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailq.core import (Dataset, FutureAccessError, MalformedRecordError, MissingContextError, Policy, ShapeError,
                        Trajectory, action_matrix, apply_policy, history_features, load_dataset, save_dataset)
from tailq.dgp import DgpSpec, simulate


def _traj(tau=3, d=2, y=1.0, idx="a"):
    return Trajectory(idx, np.arange(tau * d, dtype=float).reshape(tau, d), np.array([1, 0, 1][:tau]), y)


class TestTrajectory:
    def test_valid(self):
        t = _traj()
        assert t.tau == 3
        assert t.A.dtype == np.int8

    @pytest.mark.parametrize("A", [[1, 0], [1, 0, 1, 1]])
    def test_action_length_mismatch(self, A):
        with pytest.raises(ShapeError):
            Trajectory("x", np.zeros((3, 2)), np.array(A), 0.0)

    def test_non_binary_action(self):
        with pytest.raises(ValueError):
            Trajectory("x", np.zeros((3, 2)), np.array([0, 2, 1]), 0.0)

    @pytest.mark.parametrize("y", [np.nan, np.inf])
    def test_non_finite_outcome(self, y):
        with pytest.raises(ValueError):
            _traj(y=y)


class TestDataset:
    def test_shapes_and_readonly(self, small_ds):
        assert small_ds.L.shape == (300, 5, 11)
        assert small_ds.A.shape == (300, 5)
        with pytest.raises(ValueError):
            small_ds.L[0, 0, 0] = 1.0

    def test_from_trajectories_roundtrip(self, small_ds):
        ds2 = Dataset.from_trajectories(small_ds.trajectories)
        assert ds2.equals(small_ds)

    def test_subset(self, small_ds):
        sub = small_ds.subset([3, 1])
        npt.assert_array_equal(sub.L[0], small_ds.L[3])
        npt.assert_array_equal(sub.Y, small_ds.Y[[3, 1]])


class TestHistoryView:
    def test_future_access_raises(self, small_ds):
        h = small_ds.history(0, 2)
        npt.assert_array_equal(h.L(2), small_ds.L[0, 1])
        assert h.A(1) == small_ds.A[0, 0]
        with pytest.raises(FutureAccessError):
            h.L(3)
        with pytest.raises(FutureAccessError):
            h.A(2)
        with pytest.raises(FutureAccessError):
            h.Y

    def test_features_padding(self, small_ds):
        tau, d = small_ds.tau, small_ds.d_L
        f = small_ds.history(4, 2).features()
        assert f.shape == (tau * d + tau - 1,)
        npt.assert_array_equal(f[: 2 * d], small_ds.L[4, :2].ravel())
        npt.assert_array_equal(f[2 * d: tau * d], 0.0)

    @pytest.mark.parametrize("t", [1, 3, 5])
    def test_vectorized_features_match(self, small_ds, t):
        F = history_features(small_ds, t)
        for i in (0, 17, 299):
            npt.assert_array_equal(F[i], small_ds.history(i, t).features())


class TestPolicy:
    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            Policy.threshold([0.5, 1.2])

    def test_fixed_tiles(self, small_ds):
        a = apply_policy(Policy.fixed([1, 0, 1, 0, 1]), small_ds)
        assert a.shape == (300, 5)
        npt.assert_array_equal(a[7], [1, 0, 1, 0, 1])

    def test_behavior_returns_observed(self, small_ds):
        npt.assert_array_equal(apply_policy(Policy.behavior(), small_ds), small_ds.A)

    def test_threshold_needs_spec(self, small_ds):
        with pytest.raises(MissingContextError):
            apply_policy(Policy.constant_threshold(0.5, 5), small_ds)

    def test_horizon_mismatch(self, small_ds):
        with pytest.raises(ShapeError):
            apply_policy(Policy.fixed([1, 1]), small_ds)

    def test_threshold_reproduces_noise_free_behavior(self):
        spec = DgpSpec("limited", tau=6, noise_sd_a=0.0, seed=5)
        ds = simulate(spec, 200)
        npt.assert_array_equal(apply_policy(Policy.constant_threshold(0.5, 6), ds, spec), ds.A)

    def test_action_matrix(self, small_ds, small_spec):
        pols = [Policy.fixed([0] * 5), Policy.constant_threshold(0.5, 5)]
        M = action_matrix(pols, small_ds, small_spec)
        assert M.shape == (2, 300, 5)
        npt.assert_array_equal(M[0], 0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=5, max_size=5))
    def test_fixed_sequence_any(self, seq):
        ds = Dataset(np.zeros((4, 5, 1)), np.zeros((4, 5)), np.zeros(4))
        npt.assert_array_equal(apply_policy(Policy.fixed(seq), ds), np.tile(seq, (4, 1)))


class TestIO:
    def test_roundtrip(self, small_ds, tmp_path):
        p = tmp_path / "d.jsonl"
        save_dataset(small_ds, p)
        back = load_dataset(p)
        assert back.equals(small_ds)
        rec = json.loads(p.read_text().splitlines()[0])
        assert set(rec) == {"id", "L", "A", "Y"}

    def test_malformed_line_number(self, small_ds, tmp_path):
        p = tmp_path / "d.jsonl"
        save_dataset(small_ds.subset([0, 1, 2]), p)
        lines = p.read_text().splitlines()
        lines[1] = lines[1][:-5]
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(MalformedRecordError) as exc:
            load_dataset(p)
        assert exc.value.line_no == 2

    def test_missing_key(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"id": 1, "L": [[0.0]], "A": [1]}) + "\n")
        with pytest.raises(MalformedRecordError):
            load_dataset(p)

    def test_ragged(self, tmp_path):
        p = tmp_path / "d.jsonl"
        recs = [{"id": 0, "L": [[0.0], [1.0]], "A": [1, 0], "Y": 1.0},
                {"id": 1, "L": [[0.0], [1.0], [2.0]], "A": [1, 0, 1], "Y": 1.0}]
        p.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        with pytest.raises(ShapeError):
            load_dataset(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("")
        with pytest.raises(ShapeError):
            load_dataset(p)
