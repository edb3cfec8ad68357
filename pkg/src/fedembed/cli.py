"""Command-line entry point: ``fedembed run | grid | verify | prepare-mnist``.

Exit status is 0 on success, 1 when an experiment or check fails and 2 for
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigurationError, FedEmbedError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

RESULT_COLUMNS = ("method", "privacy", "balance", "seed", "macro_f1", "micro_f1", "per_subpop_f1")


def _apply_cli(cfg, seed=None, rounds=None, out=None):
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if rounds is not None:
        cfg = cfgmod.with_overrides(cfg, training={"rounds": rounds})
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg


def _default_out(cfg):
    stem = cfg.name or cfg.method.name
    return Path("runs") / f"{stem}-seed{cfg.seed}"


def _progress(entry):
    print(f"  round {entry['round']:>4}  macro-F1 {entry['macro_f1']:.3f}", file=sys.stderr, flush=True)


def cmd_run(args):
    from .federation import run_experiment

    cfg = _apply_cli(cfgmod.parse_config(args.config), args.seed, args.rounds, args.out)
    out = Path(cfg.output_dir) if cfg.output_dir else _default_out(cfg)
    report = run_experiment(
        cfg,
        out_dir=out,
        parallel_clients=args.parallel_clients,
        checkpoint_every=args.checkpoint_every,
        resume=args.resume,
        progress=None if args.quiet else _progress,
    )
    if args.no_timestamps:
        report.write(out / "report.json", include_timestamps=False)
    print(f"{cfg.method.name}: macro-F1 {report.macro_f1:.4f} after {report.final['rounds']} rounds -> {out}")
    return EXIT_OK


def balance_label(proportions):
    return "balanced" if max(proportions) - min(proportions) < 1e-12 else "imbalanced"


def result_row(cfg, report):
    per = report.final["per_subpop_f1"]
    return {
        "method": cfg.method.name,
        "privacy": "dp" if cfg.dp.enabled else "none",
        "balance": balance_label(cfg.population.proportions),
        "seed": cfg.seed,
        "macro_f1": f"{report.final['macro_f1']:.6f}",
        "micro_f1": f"{report.final['micro_f1']:.6f}",
        "per_subpop_f1": ";".join(f"{per[k]:.6f}" for k in sorted(per, key=int)),
    }


def grid_configs(directory, seeds=1, dp_sweep=False):
    """Expand every ``*.json`` in ``directory`` over seeds and (optionally) privacy."""
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise ConfigurationError(f"no *.json configs in {directory}")
    errors, runs = [], []
    for path in paths:
        try:
            base = cfgmod.parse_config(path)
        except ConfigurationError as exc:
            errors.append(f"{path.name}: {exc}")
            continue
        privacy = (False, True) if dp_sweep else (base.dp.enabled,)
        for dp in privacy:
            cfg = replace(base, dp=replace(base.dp, enabled=dp))
            for i in range(seeds):
                tag = f"{path.stem}{'-dp' if dp else ''}-seed{base.seed + i}"
                runs.append((tag, replace(cfg, seed=base.seed + i)))
    if errors:
        raise ConfigurationError("\n".join(errors))
    return runs


def cmd_grid(args):
    from .federation import run_experiment

    runs = grid_configs(args.config_dir, args.seeds, args.dp_sweep)
    out = Path(args.out or "runs/grid")
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], 0
    for tag, cfg in runs:
        if args.rounds is not None:
            cfg = cfgmod.with_overrides(cfg, training={"rounds": args.rounds})
        print(f"[{tag}]", flush=True)
        try:
            report = run_experiment(cfg, out_dir=out / tag, parallel_clients=args.parallel_clients)
        except ConfigurationError:
            raise
        except FedEmbedError as exc:
            print(f"  failed: {exc}", file=sys.stderr)
            failed += 1
            continue
        rows.append(result_row(cfg, report))
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} reports, results table {out / 'results.csv'}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_verify(args):
    from .verify import run_all

    return EXIT_OK if run_all() else EXIT_FAILED


def cmd_prepare_mnist(args):
    from .data import export_bundled_mnist

    paths = export_bundled_mnist(args.dir or cfgmod.default_data_dir())
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fedembed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--rounds", type=int, help="override training.rounds")
        p.add_argument("--parallel-clients", type=int, default=1, metavar="N",
                       help="simulate clients in N worker threads (results are identical)")

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    common(run)
    run.add_argument("--checkpoint-every", type=int, metavar="R")
    run.add_argument("--resume", metavar="CHECKPOINT")
    run.add_argument("--no-timestamps", action="store_true", help="omit the timestamps block from report.json")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("grid", help="run every config in a directory")
    grid.add_argument("config_dir")
    grid.add_argument("--seeds", type=int, default=1, help="repeat each config over this many consecutive seeds")
    grid.add_argument("--dp-sweep", action="store_true", help="run every config with and without DP")
    common(grid)
    grid.set_defaults(func=cmd_grid)

    verify = sub.add_parser("verify", help="run the built-in property checks")
    verify.set_defaults(func=cmd_verify)

    prep = sub.add_parser("prepare-mnist", help="write the bundled 5k MNIST subset as IDX files")
    prep.add_argument("--dir", help=f"target directory (default ${cfgmod.DATA_DIR_ENV} or ~/.cache/fedembed/mnist)")
    prep.set_defaults(func=cmd_prepare_mnist)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedEmbedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
