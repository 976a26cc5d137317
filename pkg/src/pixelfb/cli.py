"""Command-line entry point.

Subcommands: collect, train, eval, sweep, heatmap, swingup. Each takes
--config pointing at an ExperimentConfig JSON plus a handful of overrides;
--seed is mandatory for the stochastic commands unless a config file
supplies one. Exit code is nonzero on any propagated error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, learning


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.ExperimentConfig.load(args.config)
    else:
        cfg = harness.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    elif not args.config and getattr(args, "needs_seed", False):
        raise SystemExit("--seed is required when no --config is given")
    if getattr(args, "n_demos", None) is not None:
        cfg.n_demos = args.n_demos
    if getattr(args, "lam", None) is not None:
        cfg.lam = args.lam
    if getattr(args, "mode", None) is not None:
        cfg.fit_mode = args.mode
    return cfg


def _run_dir_config(run_dir) -> harness.ExperimentConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"no config.json under {run_dir}; run `collect` first")
    return harness.ExperimentConfig.load(path)


def cmd_collect(args) -> None:
    args.needs_seed = True
    cfg = _load_config(args)
    dataset = harness.collect(cfg, run_dir=args.run_dir)
    print(f"collected {len(dataset)} demonstrations of {cfg.episode_len} steps -> {args.run_dir}")


def cmd_train(args) -> None:
    cfg = _run_dir_config(args.run_dir)
    if args.mode:
        cfg.fit_mode = args.mode
    if args.lam is not None:
        cfg.lam = args.lam
    dataset = harness.load_dataset(args.run_dir)
    teacher_k = harness.load_teacher_gain(args.run_dir)
    params, report = harness.train(dataset, cfg, teacher_k, run_dir=args.run_dir)
    print(f"fit mode={report['fit_mode']} on {report['n_samples']} samples")
    print(f"  residual (Frobenius): {report['residual_fro']:.6g}")
    if "spectral_norm_A_LK" in report:
        print(f"  ||A_LK||_2: {report['spectral_norm_A_LK']:.6f}")
        print(f"  spectral radius A_LK: {report['spectral_radius_A_LK']:.6f}")
    print(f"  sparsity of L (fraction zero): {report['sparsity_L']:.4f}")


def cmd_eval(args) -> None:
    cfg = _run_dir_config(args.run_dir)
    params = learning.load_observer_params(Path(args.run_dir) / "params")
    teacher_k = harness.load_teacher_gain(args.run_dir)
    report = harness.evaluate(params, cfg, teacher_k, n_eval=args.n_eval, run_dir=args.run_dir)
    print(f"evaluated {len(report.final_errors)} episodes")
    print(f"  success rate: {report.success_rate:.3f}")
    print(f"  median final error: {report.median_error:.4f}")
    print(f"  5%/95% error: {report.quantile(0.05):.4f} / {report.quantile(0.95):.4f}")


def cmd_sweep(args) -> None:
    args.needs_seed = True
    cfg = _load_config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    cfg.n_demos = max(max(sizes), cfg.n_demos if args.config else 0) or max(sizes)
    rows = harness.sweep(cfg, sizes, run_dir=args.run_dir, mode=args.mode)
    print("size,median_error,success_rate")
    for r in rows:
        print(f"{r['size']},{r['median_error']:.4f},{r['success_rate']:.3f}")


def cmd_heatmap(args) -> None:
    cfg = _run_dir_config(args.run_dir)
    params = learning.load_observer_params(Path(args.run_dir) / "params")
    out = Path(args.run_dir) / "heatmaps"
    written = harness.heatmap(params, cfg, out)
    print(f"wrote {len(written)} heatmap files under {out}")


def cmd_swingup(args) -> None:
    args.needs_seed = True
    cfg = _load_config(args)
    report = harness.swingup(cfg, run_dir=args.run_dir)
    n = cfg.swingup_eval_seeds
    print(f"swing-up tracking over {n} noise seeds")
    print(f"  student success: {report['student_success_count']}/{n}")
    print(f"  teacher success: {report['teacher_success_count']}/{n}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelfb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seeded: bool):
        p.add_argument("--run-dir", required=True, help="run directory for artifacts")
        p.add_argument("--config", help="ExperimentConfig JSON file")
        if seeded:
            p.add_argument("--seed", type=int, help="base seed (required without --config)")

    p = sub.add_parser("collect", help="collect teacher demonstrations")
    add_common(p, seeded=True)
    p.add_argument("--n-demos", type=int)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="fit the pixel observer from a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--mode", choices=["lls", "lasso", "stable"])
    p.add_argument("--lam", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of the trained observer")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--n-eval", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="data-efficiency sweep over demo counts")
    add_common(p, seeded=True)
    p.add_argument("--sizes", default="2,5,10,20,50", help="comma-separated demo counts")
    p.add_argument("--mode", choices=["lls", "lasso", "stable"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", help="render observer gain rows as images")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("swingup", help="Koopman swing-up tracking experiment")
    add_common(p, seeded=True)
    p.set_defaults(func=cmd_swingup)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # propagate as a nonzero exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
