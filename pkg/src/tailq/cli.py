"""Command-line entry point (``tailq``)."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import (BANDWIDTH_MULTIPLIERS, ConfigError, ExperimentConfig, bandwidth_sweep, emit_report,
                    fit_estimator, load_config, run_experiment, scale_k)
from .core import load_dataset, save_dataset
from .dgp import VARIANTS, DgpSpec, simulate
from .embed import embed_policies, make_embedding
from .target import estimate_all, remainder_diagnostic, write_diagnostics_csv
from .train import load_estimator, save_estimator

log = logging.getLogger("tailq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_simulate(args) -> None:
    if args.config:
        cfg = _config(args)
        spec, n = cfg.dgp.with_seed(cfg.seeds[0]), cfg.n if args.n is None else args.n
    else:
        spec = DgpSpec(args.variant, tau=args.tau, seed=args.seed or 0) if args.variant != "tiny" \
            else DgpSpec.tiny(args.seed or 0)
        n = 1000 if args.n is None else args.n
    ds = simulate(spec, n)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} trajectories (tau={ds.tau}, d_L={ds.d_L}) to {args.out}")


def cmd_embed(args) -> None:
    cfg = _config(args)
    ds = load_dataset(args.data)
    spec = cfg.dgp.with_seed(cfg.seeds[0])
    emb = embed_policies(ds, cfg.policies, cfg.kernel, cfg.embed_dim, spec)
    out = _out(args.out)
    with open(out / "embedding.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "policy_label"] + [f"dim{j + 1}" for j in range(emb.d)])
        for t, rho in enumerate(emb.rho, start=1):
            for p, row in zip(cfg.policies, rho):
                w.writerow([t, p.label] + [repr(float(x)) for x in row])
    with open(out / "stress.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "stress"])
        for t, s in enumerate(emb.stress, start=1):
            w.writerow([t, repr(float(s))])
    print(f"wrote {out / 'embedding.csv'}")


def cmd_train(args) -> None:
    cfg = _config(args)
    ds = load_dataset(args.data)
    seed = cfg.seeds[0]
    est, used = fit_estimator(ds, cfg.policies, cfg, cfg.dgp.with_seed(seed), seed)
    path = save_estimator(est, _out(args.out))
    print(f"trained {est.mode} ({used.hyper()}); saved to {path}")


def cmd_evaluate(args) -> None:
    cfg = _config(args) if args.config else None
    ds = load_dataset(args.data)
    est = load_estimator(args.model)
    lam = cfg.lam if cfg else 0.01
    clip = cfg.clip if cfg else (0.01, 0.99)
    report = estimate_all(ds, est, lam, clip)
    out = _out(args.out)
    report.write_csv(out / "estimates.csv")
    for e in report.estimates:
        print(f"{e.label}: {e.psi:.5f} [{e.ci[0]:.5f}, {e.ci[1]:.5f}]")


def cmd_run(args) -> None:
    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    table = run_experiment(cfg)
    paths = emit_report(table, cfg.output_dir)
    print(paths["summary"].read_text())
    if all(r["status"] != "ok" for r in table.rows):
        raise RuntimeError("every seed failed")


def cmd_diagnose(args) -> None:
    cfg = _config(args)
    seed = cfg.seeds[0]
    spec = cfg.dgp.with_seed(seed)
    ds = simulate(spec, cfg.n)
    est, _ = fit_estimator(ds, cfg.policies, cfg, spec, seed)
    report = estimate_all(ds, est, cfg.lam, cfg.clip)
    base = cfg.policies[0]
    diags = [remainder_diagnostic(spec, est, p, base, ds, args.n_mc, cfg.lam, cfg.clip, cfg.kernel,
                                  max_tau=args.max_tau, seed=seed, report=report) for p in cfg.policies[1:]]
    out = _out(args.out)
    write_diagnostics_csv(diags, out / "diagnostics.csv")
    for dg in diags:
        print(f"{dg.label_i} - {dg.label_j}: rem={dg.rem:.5f} mmd={dg.traj_mmd:.5f} ratio={dg.ratio:.4g}")


def cmd_bandwidth(args) -> None:
    cfg = _config(args)
    res = bandwidth_sweep(cfg, args.multipliers)
    out = _out(args.out)
    with open(out / "bandwidth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["multiplier", "rmse"])
        for m, r in res.items():
            w.writerow([repr(m), repr(r)])
    vals = np.array(list(res.values()))
    print(f"RMSE range {vals.min():.5f} to {vals.max():.5f} (ratio {vals.max() / vals.min():.3f})")


def cmd_scale(args) -> None:
    cfg = _config(args)
    spec = cfg.dgp.with_seed(cfg.seeds[0])
    ds = simulate(spec, cfg.n)
    res = scale_k(ds, args.ks, spec, cfg.kernel, args.repeats)
    out = _out(args.out)
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "seconds"])
        for k, s in res.items():
            w.writerow([k, repr(s)])
    ks = sorted(res)
    for a, b in zip(ks, ks[1:]):
        print(f"K {a} -> {b}: time ratio {res[b] / res[a]:.2f}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tailq", description="Multi-policy ICE estimation with policy-tail embeddings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=False, out_required=True):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=["joint", "separate", "joint_peq", "separate_per_policy"])
        sp.add_argument("--out", required=out_required)
        if data:
            sp.add_argument("--data", required=True, help="JSONL dataset")

    s = sub.add_parser("simulate", help="draw a dataset")
    common(s)
    s.add_argument("--variant", choices=VARIANTS, default="limited")
    s.add_argument("--tau", type=int, default=15)
    s.add_argument("--n", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("embed-policies", help="MMD + SMACOF embedding of a suite")
    common(s, data=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train", help="fit the Q/G networks")
    common(s, data=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="targeted estimates from a saved model")
    common(s, data=True)
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-experiment", help="full multi-seed benchmark")
    common(s, out_required=False)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("diagnose-remainder", help="remainder Terms I-III against the baseline")
    common(s)
    s.add_argument("--n-mc", type=int, default=200)
    s.add_argument("--max-tau", type=int, default=4)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("bandwidth-sweep", help="RMSE across kernel-scale multipliers")
    common(s)
    s.add_argument("--multipliers", type=float, nargs="+", default=list(BANDWIDTH_MULTIPLIERS))
    s.set_defaults(func=cmd_bandwidth)

    s = sub.add_parser("scale-K", help="embedding runtime versus number of policies")
    common(s)
    s.add_argument("--ks", type=int, nargs="+", default=[5, 10, 20])
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_scale)
    return p


VALIDATION_ERRORS = (ConfigError, FileNotFoundError, ValueError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
