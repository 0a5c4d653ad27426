"""Command-line entry point.

Exit codes: 0 success, 1 failed invariant or check, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from selfrepel.harness.config import KEYS, ConfigError, load_config
from selfrepel.harness.experiments import (
    RunReport,
    emit_plot_data,
    run_flory_balance,
    run_scaling_study,
    run_semigroup,
    run_variance_scan,
)
from selfrepel.harness.validation import run_validation_suite

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    for key in KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="V", help=f"override config key {key}")


def _overrides(args) -> dict[str, str]:
    return {k: str(getattr(args, k)) for k in KEYS if getattr(args, k, None) is not None}


def _config(args):
    return load_config(args.config, _overrides(args))


def _out_path(cfg, name: str) -> Path:
    return Path(cfg.output_dir) / name


def cmd_sample(args) -> int:
    from selfrepel.lattice import LatticeBox
    from selfrepel.sampling import make_rng, sample_drifted_field
    from selfrepel.spectral import eigendecompose

    cfg = _config(args)
    box = LatticeBox(cfg.N_grid[0], cfg.d)
    basis = eigendecompose(box)
    rng = make_rng(cfg.seed)
    u = sample_drifted_field(basis, cfg.params, args.drift, rng, size=args.count)
    path = Path(args.out or _out_path(cfg, "samples.npy"))
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, u)
    print(json.dumps({"path": str(path), "shape": list(u.shape), "seed": cfg.seed, "drift": args.drift}))
    return EXIT_OK


def cmd_mcmc(args) -> int:
    from selfrepel.lattice import LatticeBox
    from selfrepel.sampling import ChainState, make_rng, run_chain, sample_free_field
    from selfrepel.spectral import eigendecompose

    cfg = _config(args)
    if args.resume:
        state = ChainState.from_record(json.loads(Path(args.resume).read_text()))
        state.cfg = cfg.mcmc
    else:
        box = LatticeBox(cfg.N_grid[0], cfg.d)
        start = sample_free_field(eigendecompose(box), cfg.params, make_rng(cfg.seed, args.chain, purpose=1))
        state = ChainState.from_field(start, cfg.params, cfg.mcmc, chain=args.chain)
    run = run_chain(state)
    r = np.asarray(run.samples["radius"])
    summary = {
        "N": state.box.N, "d": state.box.d, "seed": cfg.seed, "chain": run.chain, "step_range": list(run.step_range),
        "mean_R": float(r.mean()), "median_R": float(np.median(r)), "ess_R": run.ess("radius"),
        "acceptance_local": run.acceptance_local, "acceptance_dilation": run.acceptance_dilation,
        "sigma": run.sigma, "eta": run.eta, "cache_ok": run.cache_ok,
    }
    print(json.dumps(summary))
    if args.checkpoint:
        Path(args.checkpoint).parent.mkdir(parents=True, exist_ok=True)
        Path(args.checkpoint).write_text(json.dumps(state.to_record()))
    return EXIT_OK if run.cache_ok else EXIT_INVARIANT


def _finish(report: RunReport, cfg, name: str) -> Path:
    path = report.write(_out_path(cfg, name))
    emit_plot_data(report, Path(cfg.output_dir))
    return path


def cmd_variance(args) -> int:
    cfg = _config(args)
    rep = run_variance_scan(cfg.N_grid, cfg.d, cfg.beta)
    path = _finish(rep, cfg, "variance.jsonl")
    for row in rep.tables["variance"]:
        print(f"N={row['N']:>3d}  min={row['min_variance']:.6f}  max={row['max_variance']:.6f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_scaling(args) -> int:
    cfg = _config(args)
    rep = run_scaling_study(cfg)
    path = _finish(rep, cfg, "scaling.jsonl")
    for name, fit in rep.fits.items():
        if "exponent" in fit:
            print(f"{name}: nu = {fit['exponent']:.3f} +/- {fit['stderr']:.3f} (R^2 {fit['r_squared']:.3f}, {fit['status']})")
        else:
            print(f"{name}: {fit}")
    print(f"wrote {path}")
    ok = all(c["converged"] for c in rep.cells)
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_flory(args) -> int:
    cfg = _config(args)
    rep = run_flory_balance(cfg.N_grid, cfg.d, cfg.beta, cfg.gamma)
    path = _finish(rep, cfg, "flory.jsonl")
    for row in rep.tables["flory"]:
        print(f"N={row['N']:>3d}  a*={row['a_star']:.4f}  R/N={row['radius_over_N']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_semigroup(args) -> int:
    cfg = _config(args)
    N = cfg.N_grid[-1]
    t = np.geomspace(args.t_min, args.t_max if args.t_max else float(N) ** 2, args.points)
    rep = run_semigroup(N, t, args.z)
    path = _finish(rep, cfg, "semigroup.jsonl")
    if "decay" in rep.fits:
        print(f"N={N}: middle-decade slope {rep.fits['decay']['slope']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    rep = run_validation_suite(only=args.only or None)
    for line in rep.lines():
        print(line)
    return EXIT_OK if rep.passed else EXIT_INVARIANT


def cmd_emit_plots(args) -> int:
    rep = RunReport.read(args.report)
    for p in emit_plot_data(rep, args.out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="selfrepel", description="Self-repelling random-surface laboratory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="exact free-field (optionally drifted) draws to .npy")
    _add_config_flags(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("mcmc", help="one Metropolis chain for Q_N")
    _add_config_flags(p)
    p.add_argument("--chain", type=int, default=0)
    p.add_argument("--checkpoint", help="write a JSON checkpoint here when done")
    p.add_argument("--resume", help="continue from a JSON checkpoint")
    p.set_defaults(func=cmd_mcmc)

    for name, func, helptext in [
        ("variance", cmd_variance, "exact pairwise-variance extremes over N_grid"),
        ("scaling", cmd_scaling, "radius scaling study with the gamma = 0 contrast"),
        ("flory", cmd_flory, "energy/penalty balance over the dilation family"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("semigroup", help="return probabilities of the reflected walk (largest N in N_grid)")
    _add_config_flags(p)
    p.add_argument("--t-min", type=float, default=1.0)
    p.add_argument("--t-max", type=float)
    p.add_argument("--points", type=int, default=40)
    p.add_argument("--z", type=int, default=0)
    p.set_defaults(func=cmd_semigroup)

    p = sub.add_parser("validate", help="run the invariant suite")
    p.add_argument("--only", nargs="*")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("emit-plots", help="CSV series from a JSON-lines report")
    p.add_argument("report", type=Path)
    p.add_argument("--out", type=Path, default=Path("plots"))
    p.set_defaults(func=cmd_emit_plots)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
