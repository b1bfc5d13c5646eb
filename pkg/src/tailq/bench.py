"""Experiment harness: policy suites, per-seed pipeline, aggregation and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import Dataset, Policy
from .dgp import DgpSpec, oracle_cate, simulate
from .embed import KernelConfig, distance_matrices, embed_policies, make_embedding
from .target import estimate_all
from .train import MODES, TrainConfig, select_hyperparams, train_all_separate, train_peq

log = logging.getLogger("tailq.bench")

SUITES = ("deterministic_a", "dynamic_b", "dynamic_c", "duplicate", "threshold_family")
EVAL_SPLITS = ("reuse-all", "holdout")
MODE_ALIASES = {"joint": "joint_peq", "joint_peq": "joint_peq", "separate": "separate_per_policy",
                "separate_per_policy": "separate_per_policy"}


class ConfigError(ValueError):
    pass


def suite_policies(suite: str, tau: int) -> list:
    """Policies of a named suite; the first entry is the baseline."""
    if suite == "deterministic_a":
        return [
            Policy.fixed([1] * tau, "always"),
            Policy.fixed([0] * tau, "CF1a"),
            Policy.fixed([int(t >= 5) for t in range(1, tau + 1)], "CF2a"),
            Policy.fixed([int(t <= 10) for t in range(1, tau + 1)], "CF3a"),
        ]
    base = Policy.constant_threshold(0.5, tau, "baseline")
    if suite == "dynamic_b":
        head = min(2, tau)
        return [
            base,
            Policy.threshold([0.4] * head + [0.5] * (tau - head), "CF1b"),
            Policy.threshold([0.6] * head + [0.5] * (tau - head), "CF2b"),
        ]
    if suite == "dynamic_c":
        return [base] + [Policy.constant_threshold(g, tau, lab) for g, lab in
                         ((0.4, "CF1c"), (0.6, "CF2c"), (0.0, "CF3c"), (1.0, "CF4c"))]
    if suite == "duplicate":
        return [base, Policy.constant_threshold(0.5, tau, "CFdup")]
    if suite == "threshold_family":
        return [base] + [Policy.constant_threshold(g, tau, f"gamma={g:g}") for g in (0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7)]
    raise ConfigError(f"unknown policy suite {suite!r}; expected one of {SUITES}")


@dataclass
class ExperimentConfig:
    dgp: DgpSpec = field(default_factory=DgpSpec)
    n: int = 1000
    suite: str = "dynamic_b"
    mode: str = "joint_peq"
    seeds: tuple = tuple(range(20))
    train: TrainConfig = field(default_factory=TrainConfig)
    n_draws: int = 4
    val_fraction: float = 0.2
    lam: float = 0.01
    clip: tuple = (0.01, 0.99)
    n_mc: int = 100_000
    eval_split: str = "reuse-all"
    embed_dim: int = 2
    kernel: KernelConfig = field(default_factory=KernelConfig)
    output_dir: str = "runs/experiment"
    cache_dir: Optional[str] = None

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.suite not in SUITES:
            raise ConfigError(f"unknown policy suite {self.suite!r}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigError(f"eval_split must be one of {EVAL_SPLITS}")
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if self.n_draws < 0:
            raise ConfigError("n_draws must be non-negative")
        lo, hi = self.clip
        if not 0 < lo < hi < 1:
            raise ConfigError("clip must satisfy 0 < lo < hi < 1")
        if self.suite == "deterministic_a" and self.dgp.variant == "tiny":
            pass
        self.seeds = tuple(int(s) for s in self.seeds)
        self.clip = (float(lo), float(hi))

    @property
    def policies(self) -> list:
        return suite_policies(self.suite, self.dgp.tau)


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def config_from_dict(raw: dict) -> ExperimentConfig:
    exp = _section(raw, "experiment")
    try:
        dgp = DgpSpec.from_dict(_section(raw, "dgp"))
        train = TrainConfig(**_section(raw, "train"))
        kernel = KernelConfig(**_section(raw, "kernel"))
        if "lambda" in exp:
            exp["lam"] = exp.pop("lambda")
        if "clip" in exp:
            exp["clip"] = tuple(exp["clip"])
        if "seeds" in exp and isinstance(exp["seeds"], int):
            exp["seeds"] = tuple(range(exp["seeds"]))
        return ExperimentConfig(dgp=dgp, train=train, kernel=kernel, **exp)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# oracle cache


class OracleCache:
    """On-disk cache of oracle CATEs keyed by a content hash of ``(spec, policies, n_mc, seed)``."""

    def __init__(self, directory=None):
        self.dir = None if directory is None else Path(directory)
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(spec: DgpSpec, p_i: Policy, p_j: Policy, n_mc: int, seed: int) -> str:
        blob = json.dumps({"spec": spec.to_dict(), "i": p_i.to_dict(), "j": p_j.to_dict(), "n_mc": n_mc,
                           "seed": seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def cate(self, spec: DgpSpec, p_i: Policy, p_j: Policy, n_mc: int, seed: int) -> float:
        k = self.key(spec, p_i, p_j, n_mc, seed)
        f = None if self.dir is None else self.dir / f"{k}.json"
        if f is not None and f.exists():
            return float(json.loads(f.read_text())["value"])
        res = oracle_cate(spec, p_i, p_j, n_mc, seed)
        if f is not None:
            f.write_text(json.dumps({"value": res.value, "mc_std_error": res.mc_std_error, "n_mc": res.n_mc,
                                     "method": res.method}))
        return res.value


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class SeedRun:
    seed: int
    rows: list
    train_config: Optional[TrainConfig] = None
    estimator: object = None
    report: object = None
    dataset: Optional[Dataset] = None


def _oracle_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 0x0AC1E, 1]).generate_state(1)[0])


def fit_estimator(ds: Dataset, policies: Sequence[Policy], cfg: ExperimentConfig, spec: DgpSpec, seed: int,
                  train_cfg: TrainConfig = None):
    """Hyperparameter selection (when ``n_draws > 0``) and a final fit on ``ds``."""
    train_cfg = replace(cfg.train, seed=seed) if train_cfg is None else train_cfg
    if train_cfg is cfg.train or train_cfg.seed != seed:
        train_cfg = replace(train_cfg, seed=seed)
    if cfg.n_draws > 0:
        rng = np.random.default_rng([seed, 0x5B1])
        perm = rng.permutation(ds.n)
        n_val = max(1, int(round(cfg.val_fraction * ds.n)))
        sel = select_hyperparams(ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val])), None,
                                 cfg.n_draws, seed, train_cfg, policies, cfg.mode, spec, cfg.kernel, cfg.embed_dim)
        train_cfg = sel.best
    if cfg.mode == "joint_peq":
        emb = make_embedding(ds, policies, cfg.kernel, cfg.embed_dim, spec)
        est = train_peq(ds, policies, emb, train_cfg, spec)
    else:
        est = train_all_separate(ds, policies, train_cfg, spec, cfg.embed_dim)
    return est, train_cfg


def run_seed(cfg: ExperimentConfig, seed: int, cache: OracleCache = None, keep: bool = False) -> SeedRun:
    """One replicate: simulate, oracle contrasts, select, fit, target and contrast against the baseline."""
    policies = cfg.policies
    base, cfs = policies[0], policies[1:]
    spec = cfg.dgp.with_seed(seed)
    cache = cache or OracleCache(None)
    rows = []
    try:
        ds = simulate(spec, cfg.n)
        truths = [cache.cate(spec, p, base, cfg.n_mc, _oracle_seed(seed)) for p in cfs]
        if cfg.eval_split == "holdout":
            n_fit = int(round(0.8 * ds.n))
            fit_ds, eval_ds = ds.subset(np.arange(n_fit)), ds.subset(np.arange(n_fit, ds.n))
        else:
            fit_ds = eval_ds = ds
        est, used = fit_estimator(fit_ds, policies, cfg, spec, seed)
        report = estimate_all(eval_ds, est, cfg.lam, cfg.clip)
        for k, (p, truth) in enumerate(zip(cfs, truths), start=1):
            c = report.contrast(k, 0)
            rows.append(dict(suite=cfg.suite, mode=cfg.mode, contrast=p.label, seed=seed, estimate=c.cate,
                             oracle=truth, abs_bias=abs(c.cate - truth), se=c.se, status="ok"))
        return SeedRun(seed, rows, used, est if keep else None, report if keep else None, ds if keep else None)
    except Exception as exc:  # a failed seed is reported, not fatal
        log.warning("seed %s failed: %s", seed, exc)
        for p in cfs:
            rows.append(dict(suite=cfg.suite, mode=cfg.mode, contrast=p.label, seed=seed, estimate=math.nan,
                             oracle=math.nan, abs_bias=math.nan, se=math.nan, status=f"failed: {exc}"))
        return SeedRun(seed, rows)


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)

    def contrasts(self) -> list:
        seen = []
        for r in self.rows:
            key = (r["suite"], r["mode"], r["contrast"])
            if key not in seen:
                seen.append(key)
        return seen

    def aggregate(self) -> list:
        out = []
        for suite, mode, contrast in self.contrasts():
            ok = [r for r in self.rows if (r["suite"], r["mode"], r["contrast"]) == (suite, mode, contrast)
                  and r["status"] == "ok"]
            err = np.array([r["estimate"] - r["oracle"] for r in ok])
            ab = np.abs(err)
            out.append(dict(
                suite=suite, mode=mode, contrast=contrast,
                mean_abs_bias=float(ab.mean()) if ok else math.nan,
                sd=float(ab.std(ddof=1)) if len(ok) > 1 else 0.0 if ok else math.nan,
                rmse=float(np.sqrt(np.mean(err ** 2))) if ok else math.nan,
                n_seeds=len(ok),
            ))
        return out

    def rmse(self, contrast: str, mode: str = None) -> float:
        for a in self.aggregate():
            if a["contrast"] == contrast and (mode is None or a["mode"] == mode):
                return a["rmse"]
        raise KeyError(contrast)

    def extend(self, other: "MetricsTable") -> "MetricsTable":
        return MetricsTable(self.rows + other.rows)


def run_experiment(cfg: ExperimentConfig, seeds: Sequence[int] = None, keep: bool = False):
    """Run every seed and return the :class:`MetricsTable` (plus the per-seed runs when ``keep``)."""
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    cache_dir = cfg.cache_dir if cfg.cache_dir is not None else str(Path(cfg.output_dir) / "oracle_cache")
    cache = OracleCache(cache_dir)
    runs = []
    for s in seeds:
        t0 = time.perf_counter()
        runs.append(run_seed(cfg, s, cache, keep))
        log.info("seed %s done in %.1fs", s, time.perf_counter() - t0)
    table = MetricsTable([r for run in runs for r in run.rows])
    return (table, runs) if keep else table


# ---------------------------------------------------------------------------
# reports

METRIC_FIELDS = ["row_type", "suite", "mode", "contrast", "seed", "estimate", "oracle", "abs_bias", "se", "status",
                 "mean_abs_bias", "sd", "rmse", "n_seeds"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_metrics_csv(m: MetricsTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in m.rows:
            w.writerow({k: _fmt(r.get(k)) for k in METRIC_FIELDS} | {"row_type": "seed"})
        for a in m.aggregate():
            w.writerow({k: _fmt(a.get(k)) for k in METRIC_FIELDS} | {"row_type": "aggregate"})


def read_metrics_csv(path) -> tuple:
    """Returns ``(MetricsTable of seed rows, list of aggregate rows)``."""
    rows, aggs = [], []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["row_type"] == "seed":
                rows.append(dict(suite=r["suite"], mode=r["mode"], contrast=r["contrast"], seed=int(r["seed"]),
                                 estimate=float(r["estimate"]), oracle=float(r["oracle"]),
                                 abs_bias=float(r["abs_bias"]), se=float(r["se"]), status=r["status"]))
            else:
                aggs.append(dict(suite=r["suite"], mode=r["mode"], contrast=r["contrast"],
                                 mean_abs_bias=float(r["mean_abs_bias"]), sd=float(r["sd"]), rmse=float(r["rmse"]),
                                 n_seeds=int(r["n_seeds"])))
    return MetricsTable(rows), aggs


def summary_markdown(m: MetricsTable) -> str:
    lines = ["| Suite | Mode | Contrast | Abs. bias (± sd) | RMSE | Seeds |", "|---|---|---|---|---|---|"]
    for a in m.aggregate():
        lines.append(f"| {a['suite']} | {a['mode']} | {a['contrast']} | {a['mean_abs_bias']:.4f} ± {a['sd']:.4f} "
                     f"| {a['rmse']:.4f} | {a['n_seeds']} |")
    failed = sorted({r["seed"] for r in m.rows if r["status"] != "ok"})
    if failed:
        lines.append("")
        lines.append(f"Failed seeds: {', '.join(map(str, failed))}")
    return "\n".join(lines) + "\n"


def rmse_svg(m: MetricsTable, width: int = 640, bar_h: int = 22) -> str:
    """Horizontal bar chart of RMSE, one ``<g class="contrast">`` per contrast and mode."""
    aggs = [a for a in m.aggregate()]
    vals = [a["rmse"] for a in aggs if np.isfinite(a["rmse"])]
    top = max(vals) if vals and max(vals) > 0 else 1.0
    left, pad = 220, 10
    height = pad * 2 + bar_h * len(aggs) + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
           f'<text x="{left}" y="14">RMSE per contrast</text>']
    for i, a in enumerate(aggs):
        y = pad + 20 + i * bar_h
        r = a["rmse"] if np.isfinite(a["rmse"]) else 0.0
        w = (width - left - 80) * r / top
        name = f"{a['contrast']} ({a['mode']})"
        out.append(f'<g class="contrast" data-contrast="{a["contrast"]}" data-mode="{a["mode"]}">')
        out.append(f'<text x="{left - 6}" y="{y + bar_h * 0.65:.1f}" text-anchor="end">{name}</text>')
        out.append(f'<rect x="{left}" y="{y + 2}" width="{w:.2f}" height="{bar_h - 4}" fill="#4a7ab5"/>')
        out.append(f'<text x="{left + w + 4:.2f}" y="{y + bar_h * 0.65:.1f}">{r:.4f}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(m: MetricsTable, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": d / "metrics.csv", "summary": d / "summary.md", "plot": d / "rmse.svg"}
    write_metrics_csv(m, paths["metrics"])
    paths["summary"].write_text(summary_markdown(m))
    paths["plot"].write_text(rmse_svg(m))
    return paths


# ---------------------------------------------------------------------------
# sensitivity and scaling studies

BANDWIDTH_MULTIPLIERS = (0.01, 0.1, 1.0, 10.0, 100.0)


def bandwidth_sweep(cfg: ExperimentConfig, multipliers: Sequence[float] = BANDWIDTH_MULTIPLIERS,
                    seeds: Sequence[int] = None) -> dict:
    """Pooled contrast RMSE of joint training for each kernel-scale multiplier.

    Hyperparameters are held at ``cfg.train`` so that only the embedding changes.
    """
    out = {}
    for mult in multipliers:
        c = replace(cfg, mode="joint_peq", n_draws=0, kernel=replace(cfg.kernel, gamma_multiplier=float(mult)))
        table = run_experiment(c, seeds)
        err = np.array([r["estimate"] - r["oracle"] for r in table.rows if r["status"] == "ok"])
        out[float(mult)] = float(np.sqrt(np.mean(err ** 2))) if err.size else math.nan
    return out


def scale_k(ds: Dataset, Ks: Sequence[int] = (5, 10, 20), spec: DgpSpec = None, kernel: KernelConfig = KernelConfig(),
            repeats: int = 3, embed: bool = True) -> dict:
    """Best-of-``repeats`` wall time of the embedding step for ``K`` distinct threshold policies."""
    out = {}
    for K in Ks:
        pols = [Policy.constant_threshold(g, ds.tau, f"gamma={g:.4f}") for g in np.linspace(0.05, 0.95, K)]
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            if embed:
                embed_policies(ds, pols, kernel, dgp_spec=spec)
            else:
                distance_matrices(ds, pols, kernel, spec)
            best = min(best, time.perf_counter() - t0)
        out[int(K)] = best
    return out
