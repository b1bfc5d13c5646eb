import math

import numpy as np
import numpy.testing as npt
import pytest

import tailq.bench as bench
from tailq.bench import (ConfigError, ExperimentConfig, MetricsTable, OracleCache, emit_report, load_config,
                         read_metrics_csv, run_experiment, suite_policies, write_metrics_csv)
from tailq.cli import main
from tailq.core import Policy, load_dataset
from tailq.dgp import DgpSpec
from tailq.train import TrainConfig

SMOKE_TOML = """
[experiment]
suite = "dynamic_b"
mode = "joint"
n = 120
seeds = [0, 1]
n_draws = 0
n_mc = 500
lambda = 0.01

[dgp]
variant = "limited"
tau = 4

[train]
epochs = 3
"""


@pytest.fixture
def smoke_cfg(tmp_path):
    p = tmp_path / "smoke.toml"
    p.write_text(SMOKE_TOML + f'\n[kernel]\ngamma_multiplier = 1.0\n')
    return p


class TestSuites:
    @pytest.mark.parametrize("suite,n", [("deterministic_a", 4), ("dynamic_b", 3), ("dynamic_c", 5), ("duplicate", 2),
                                         ("threshold_family", 8)])
    def test_sizes(self, suite, n):
        pols = suite_policies(suite, 15)
        assert len(pols) == n
        assert len({p.label for p in pols}) == n

    def test_deterministic_a_patterns(self):
        base, never, start5, first10 = suite_policies("deterministic_a", 15)
        assert base.sequence == (1,) * 15 and never.sequence == (0,) * 15
        assert start5.sequence == (0,) * 4 + (1,) * 11
        assert first10.sequence == (1,) * 10 + (0,) * 5

    def test_dynamic_b_schedules(self):
        _, cf1, cf2 = suite_policies("dynamic_b", 15)
        assert cf1.gammas[:3] == (0.4, 0.4, 0.5) and cf2.gammas[:3] == (0.6, 0.6, 0.5)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            suite_policies("nope", 5)


class TestConfig:
    def test_load(self, smoke_cfg):
        cfg = load_config(smoke_cfg)
        assert cfg.mode == "joint_peq" and cfg.lam == 0.01 and cfg.dgp.tau == 4 and cfg.train.epochs == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="missing.toml"):
            load_config(tmp_path / "missing.toml")

    @pytest.mark.parametrize("bad", ['mode = "both"', 'suite = "x"', "seeds = []", 'eval_split = "half"',
                                     "clip = [0.9, 0.1]"])
    def test_invalid(self, tmp_path, bad):
        p = tmp_path / "c.toml"
        p.write_text(f"[experiment]\n{bad}\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[train]\nepochz = 3\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_shipped_configs_parse(self):
        from pathlib import Path
        for f in sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.toml")):
            load_config(f)


def _row(contrast, seed, est, oracle, status="ok"):
    return dict(suite="s", mode="joint_peq", contrast=contrast, seed=seed, estimate=est, oracle=oracle,
                abs_bias=abs(est - oracle), se=0.1, status=status)


class TestMetrics:
    def test_aggregate_by_hand(self):
        m = MetricsTable([_row("c", 0, 1.0, 0.5), _row("c", 1, 0.0, 0.5), _row("c", 2, 2.0, 0.0),
                          _row("c", 3, math.nan, math.nan, "failed: x")])
        (a,) = m.aggregate()
        errs = np.array([0.5, -0.5, 2.0])
        npt.assert_allclose(a["mean_abs_bias"], np.abs(errs).mean())
        npt.assert_allclose(a["sd"], np.abs(errs).std(ddof=1))
        npt.assert_allclose(a["rmse"], np.sqrt((errs ** 2).mean()))
        assert a["n_seeds"] == 3

    def test_csv_roundtrip(self, tmp_path):
        m = MetricsTable([_row("c", 0, 0.1234567890123, 0.1), _row("d", 0, -1.0, 0.0)])
        write_metrics_csv(m, tmp_path / "m.csv")
        back, aggs = read_metrics_csv(tmp_path / "m.csv")
        assert back.rows == m.rows
        assert [a["rmse"] for a in aggs] == [a["rmse"] for a in m.aggregate()]

    def test_empty_table_header_only(self, tmp_path):
        write_metrics_csv(MetricsTable(), tmp_path / "m.csv")
        assert len((tmp_path / "m.csv").read_text().splitlines()) == 1

    def test_report_files(self, tmp_path):
        m = MetricsTable([_row("c", 0, 1.0, 0.5), _row("d", 0, 0.0, 0.5)])
        paths = emit_report(m, tmp_path)
        svg = paths["plot"].read_text()
        assert svg.count('<g class="contrast"') == 2
        assert "| s | joint_peq | c |" in paths["summary"].read_text()


class TestPipeline:
    def test_deterministic_and_reported(self, smoke_cfg, tmp_path):
        cfg = load_config(smoke_cfg)
        a = run_experiment(ExperimentConfig(**{**cfg.__dict__, "output_dir": str(tmp_path / "a")}))
        b = run_experiment(ExperimentConfig(**{**cfg.__dict__, "output_dir": str(tmp_path / "b")}))
        assert a.rows == b.rows
        assert [r["contrast"] for r in a.rows] == ["CF1b", "CF2b"] * 2
        assert all(r["status"] == "ok" for r in a.rows)

    def test_failed_seed_is_logged(self, smoke_cfg, tmp_path, monkeypatch):
        cfg = load_config(smoke_cfg)
        cfg.output_dir = str(tmp_path)
        real = bench.simulate

        def flaky(spec, n):
            if spec.seed == 1:
                raise RuntimeError("boom")
            return real(spec, n)

        monkeypatch.setattr(bench, "simulate", flaky)
        m = run_experiment(cfg)
        assert [r["status"] for r in m.rows if r["seed"] == 1] == ["failed: boom"] * 2
        assert all(a["n_seeds"] == 1 for a in m.aggregate())

    def test_oracle_cache_reused(self, tmp_path, monkeypatch):
        spec = DgpSpec("limited", tau=3)
        p, q = Policy.fixed([1, 1, 1]), Policy.fixed([0, 0, 0])
        cache = OracleCache(tmp_path)
        v = cache.cate(spec, p, q, 200, 5)
        monkeypatch.setattr(bench, "oracle_cate", lambda *a, **k: (_ for _ in ()).throw(AssertionError("recomputed")))
        assert OracleCache(tmp_path).cate(spec, p, q, 200, 5) == v

    def test_duplicate_joint_zero(self, tmp_path):
        cfg = ExperimentConfig(dgp=DgpSpec("limited", tau=3), n=100, suite="duplicate", seeds=(0,),
                               train=TrainConfig(epochs=2), n_draws=0, n_mc=300, output_dir=str(tmp_path))
        (row,) = run_experiment(cfg).rows
        assert row["estimate"] == 0.0 and row["oracle"] == 0.0


class TestCli:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_config_names_path(self, tmp_path, capsys):
        missing = tmp_path / "none.toml"
        assert main(["run-experiment", "--config", str(missing)]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_simulate_train_evaluate(self, smoke_cfg, tmp_path):
        data = tmp_path / "d.jsonl"
        assert main(["simulate", "--config", str(smoke_cfg), "--out", str(data)]) == 0
        assert load_dataset(data).tau == 4
        assert main(["embed-policies", "--config", str(smoke_cfg), "--data", str(data), "--out", str(tmp_path / "e")]) == 0
        assert main(["train", "--config", str(smoke_cfg), "--data", str(data), "--out", str(tmp_path / "m")]) == 0
        assert main(["evaluate", "--config", str(smoke_cfg), "--data", str(data), "--model", str(tmp_path / "m"),
                     "--out", str(tmp_path / "ev")]) == 0
        assert (tmp_path / "ev" / "estimates.csv").exists()

    def test_run_experiment_outputs(self, smoke_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["run-experiment", "--config", str(smoke_cfg), "--out", str(out), "--seed", "3"]) == 0
        for name in ("metrics.csv", "summary.md", "rmse.svg"):
            assert (out / name).exists()

    def test_bad_data_is_validation_error(self, smoke_cfg, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json}\n")
        assert main(["train", "--config", str(smoke_cfg), "--data", str(bad), "--out", str(tmp_path / "m")]) == 1
