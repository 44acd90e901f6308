"""Command-line entry point: ``mvmilstein <subcommand> --config run.toml``.

Every subcommand writes its CSV, a JSON manifest whose ``config`` entry
re-parses to the effective configuration, and a TOML echo of that
configuration into the output directory.

Exit codes: 0 success, 1 a ``--check`` pass-condition failed (a failure
record is written), 2 invalid configuration, 3 I/O failure.
"""
import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import SUBCOMMANDS, ConfigError, config_from_mapping, parse_config, require_for
from .experiments import (
    INTEGRANDS,
    _default_k,
    consistency_study,
    moment_stability_check,
    poc_study,
    quadrature_study,
    strong_convergence_study,
)
from .grid import make_uniform_grid
from .model import initial_ensemble
from .noise import sample_noise
from .schemes import simulate

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

DEFAULT_WINDOWS = {
    ("convergence", "milstein"): (0.85, 1.15),
    ("convergence", "euler"): (0.35, 0.65),
    ("consistency", "milstein"): (0.8, 1.2),
}


def default_window(cfg, subcommand):
    """Slope window used by ``--check`` when the config does not set one."""
    if cfg.slope_window is not None:
        return tuple(cfg.slope_window)
    if subcommand == "quadrature":
        rate = INTEGRANDS[cfg.integrand].hoelder + 0.5
        return (rate - 0.2, rate + 0.2)
    return DEFAULT_WINDOWS.get((subcommand, cfg.scheme))


def trajectory_csv(traj) -> str:
    """One row per (step, particle): ``t, i, x_1..x_d``."""
    frames = traj.frames
    d = frames.shape[2]
    lines = [",".join(["t", "i"] + [f"x_{k + 1}" for k in range(d)])]
    for j, t in enumerate(traj.grid.times):
        ts = repr(float(t))
        for i in range(frames.shape[1]):
            lines.append(",".join([ts, str(i)] + [repr(float(v)) for v in frames[j, i]]))
    return "\n".join(lines) + "\n"


def _run_simulate(cfg, workers):
    model = cfg.build_model()
    grid = make_uniform_grid(cfg.T, cfg.n)
    K = _default_k(model, grid.h_max, cfg.K)
    bundle = sample_noise(grid, cfg.N, model.m1, model.m0, K, cfg.seed, 0)
    X0 = initial_ensemble(cfg.N, model.d, cfg.x0, cfg.x0_std, cfg.seed, 0)
    traj = simulate(model, grid, bundle, X0, cfg.scheme, cfg.mode, workers)
    manifest = {
        "study": "simulate",
        "mode": traj.mode,
        "K": K,
        "diverged_at": traj.diverged_at,
        "passed": not traj.diverged,
        "criterion": "no divergence",
    }
    return trajectory_csv(traj), manifest, "trajectory.csv"


def _run_study(cfg, subcommand, workers, window):
    common = dict(M=cfg.M, seed=cfg.seed, workers=workers)
    if subcommand == "quadrature":
        return quadrature_study(cfg.integrand, cfg.T, cfg.h_levels, q=cfg.q, window=window, **common)
    model = cfg.build_model()
    sim = dict(mode=cfg.mode, scheme=cfg.scheme, x0=cfg.x0, x0_std=cfg.x0_std, k_substeps=cfg.K)
    if subcommand == "convergence":
        return strong_convergence_study(model, cfg.T, cfg.N, cfg.h_levels, h_ref=cfg.h_ref, q=cfg.q,
                                        use_closed_form=cfg.use_closed_form, window=window,
                                        **sim, **common)
    if subcommand == "consistency":
        return consistency_study(model, cfg.T, cfg.N, cfg.h_levels, cfg.h_ref, q=cfg.q,
                                 window=window, **sim, **common)
    if subcommand == "poc":
        return poc_study(model, cfg.T, cfg.T / cfg.n, cfg.N_levels, cfg.N_ref, **sim, **common)
    if subcommand == "moments":
        return moment_stability_check(model, cfg.T, cfg.N, cfg.h_levels, p=cfg.p,
                                      tolerance=cfg.tolerance, **sim, **common)
    raise ValueError(f"unknown subcommand {subcommand!r}")


def run(subcommand, cfg, out_dir, workers=1, check=False, stream=None) -> int:
    """Run one subcommand and write its artifacts; returns the exit status."""
    stream = sys.stdout if stream is None else stream
    require_for(cfg, subcommand)
    window = default_window(cfg, subcommand) if check or cfg.slope_window else None
    if subcommand == "simulate":
        csv_text, manifest, csv_name = _run_simulate(cfg, workers)
    else:
        report = _run_study(cfg, subcommand, workers, window)
        csv_text, csv_name = report.to_csv(), f"{subcommand}.csv"
        manifest = report.manifest()
        manifest["study_config"] = manifest.pop("config")
    manifest["subcommand"] = subcommand
    manifest["version"] = __version__
    manifest["workers"] = workers
    manifest["config"] = cfg.to_mapping()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / csv_name).write_text(csv_text)
    (out / f"{subcommand}_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / f"{subcommand}_config.toml").write_text(cfg.to_toml())

    slope = manifest.get("slope")
    summary = f"{subcommand}: wrote {out / csv_name}"
    if slope is not None:
        summary += f"; slope {slope:.4f}"
    if manifest.get("passed") is not None:
        summary += f"; {manifest.get('criterion')}: {'pass' if manifest['passed'] else 'FAIL'}"
    print(summary, file=stream)

    if check and manifest.get("passed") is False:
        record = {
            "subcommand": subcommand,
            "criterion": manifest.get("criterion"),
            "slope": slope,
            "slope_ci95": manifest.get("slope_ci95"),
            "window": list(window) if window else None,
            "diverged_runs": manifest.get("diverged_runs", manifest.get("diverged_at")),
            "manifest": str(out / f"{subcommand}_manifest.json"),
        }
        (out / f"{subcommand}_failure.json").write_text(json.dumps(record, indent=2) + "\n")
        print(json.dumps(record), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def load_config(path):
    """Read a TOML config or a run manifest (``.json``)."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return config_from_mapping(json.loads(text)["config"])
    return parse_config(text)


def build_parser():
    parser = argparse.ArgumentParser(prog="mvmilstein", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML config or a previous run manifest")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--check", action="store_true",
                       help="exit nonzero if the study's pass-condition fails")
        p.add_argument("--out", help="output directory (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if overrides:
            cfg = config_from_mapping({**cfg.to_mapping(), **overrides})
        if args.workers < 1:
            raise ConfigError([f"--workers: must be >= 1, got {args.workers}"])
        return run(args.subcommand, cfg, cfg.out, args.workers, args.check)
    except ConfigError as exc:
        print(f"mvmilstein: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"mvmilstein: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
