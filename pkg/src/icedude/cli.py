"""Command-line driver: ``icedude <verb> [options]``.

Every :class:`~icedude.bench.ExperimentConfig` field has a matching
``--field-name`` flag.  The process exits 0 only when every selected
denoiser finished; 1 when any reported a failure; 2 on bad usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import (
    DENOISERS,
    SOURCES,
    WORKERS_ENV,
    ExperimentConfig,
    MetricsRow,
    alphabet_sweep,
    estimate_channel,
    load_manifest,
    run_denoise,
    run_experiment,
    sweep_initial_delta,
)

VERBS = ("run", "sweep-delta", "sweep-k", "sweep-alphabet", "estimate-channel", "denoise")

# (type, nargs) per config field; nargs "+" marks tuple fields
_FIELD_TYPES = {
    "experiment_id": (str, None),
    "source": (str, None),
    "alphabet_size": (int, None),
    "alpha": (float, None),
    "n": (int, None),
    "inputs": (str, "+"),
    "image_count": (int, None),
    "image_size": (int, None),
    "read_min": (int, None),
    "read_max": (int, None),
    "channel": (str, None),
    "init_channel": (str, None),
    "delta0s": (float, "+"),
    "ks": (int, "+"),
    "denoisers": (str, "+"),
    "epochs": (int, None),
    "hidden": (int, None),
    "batch_size": (int, None),
    "lr_first": (float, None),
    "lr_later": (float, None),
    "ice_iters": (int, None),
    "ice_tol": (float, None),
    "bw_iters": (int, None),
    "bw_tol": (float, None),
    "two_phase": (bool, None),
    "train_items": (int, None),
    "data_seed": (int, None),
    "noise_seed": (int, None),
    "train_seed": (int, None),
    "output_dir": (str, None),
}

_HELP = {
    "source": f"one of {', '.join(SOURCES)}",
    "inputs": "noisy files (.pbm/.pgm, .fa/.fasta, or whitespace-separated integers); "
              "image or FASTA files also replace the synthetic clean data",
    "channel": "true channel: builtin name (pi_0.1, pi_0.2, pi_0.3, pi_dna), bsc:P, sym:P, or a matrix file",
    "init_channel": "initial channel guess; overrides --delta0s",
    "delta0s": "initial guesses delta0 for the channel-estimating denoisers",
    "ks": "one-sided window sizes",
    "denoisers": f"subset of {', '.join(DENOISERS)}",
    "two_phase": "train on --train-items images, then fine-tune on each image",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if names != set(_FIELD_TYPES):
        raise RuntimeError("CLI flags out of sync with ExperimentConfig")
    for name, (typ, nargs) in _FIELD_TYPES.items():
        flag = "--" + name.replace("_", "-")
        if typ is bool:
            g.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=_HELP.get(name))
        else:
            g.add_argument(flag, type=typ, nargs=nargs, default=None, help=_HELP.get(name))
    p.add_argument("--config", type=Path, help="start from the config in a manifest; flags override it")
    p.add_argument("--workers", type=int, help=f"worker processes (capped by ${WORKERS_ENV})")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icedude", description="Universal denoising benchmarks.")
    parser.add_argument("--version", action="version", version=f"icedude {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_config_flags(p)

    p = sub.add_parser("sweep-delta", help="rerun over several initial guesses and report the spread")
    _add_config_flags(p)
    p.add_argument("--deltas", type=float, nargs="*", default=None,
                   help="values of delta0 (default: 0.05 0.1 0.2 0.4)")

    p = sub.add_parser("sweep-k", help="rerun over window sizes")
    _add_config_flags(p)
    p.add_argument("--k-values", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32])

    p = sub.add_parser("sweep-alphabet", help="symmetric Markov sources over several alphabet sizes")
    _add_config_flags(p)
    p.add_argument("--sizes", type=int, nargs="+", default=[2, 3, 4, 10, 30])

    p = sub.add_parser("estimate-channel", help="estimate the channel from noisy data only")
    _add_config_flags(p)

    p = sub.add_parser("denoise", help="write reconstructions of the noisy data")
    _add_config_flags(p)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = load_manifest(args.config) if args.config else ExperimentConfig()
    changes = {}
    for name in _FIELD_TYPES:
        v = getattr(args, name)
        if v is not None:
            changes[name] = tuple(v) if isinstance(v, list) else v
    if args.verb == "sweep-alphabet" and "denoisers" not in changes and not args.config:
        changes["denoisers"] = ("fb", "cude", "ice-ndude", "ice-cude")
    if args.verb == "sweep-k":
        changes["ks"] = tuple(args.k_values)
    if args.inputs and "source" not in changes and not args.config and args.verb in ("estimate-channel", "denoise"):
        changes["source"] = "noisy"
    return dataclasses.replace(base, **changes)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.5f}"
    return str(v)


def print_summary(rows: list[MetricsRow], out=None) -> None:
    out = out or sys.stdout
    cols = ("experiment_id", "denoiser", "k", "delta0", "ber", "normalized_error", "channel_l1", "status")
    shown = [r for r in rows if not r.item and r.denoiser != "ice-trace"]
    table = [cols] + [tuple(_fmt(getattr(r, c)) for c in cols) for r in shown]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    for line in table:
        print("  ".join(s.ljust(w) for s, w in zip(line, widths)).rstrip(), file=out)
    for r in rows:
        if not r.ok:
            print(f"FAILED {r.denoiser} k={r.k} delta0={r.delta0}: {r.message}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))

    try:
        if args.verb in ("run", "sweep-k"):
            rows = run_experiment(cfg, args.workers)
        elif args.verb == "sweep-delta":
            deltas = args.deltas if args.deltas is not None else [0.05, 0.1, 0.2, 0.4]
            rows, spread = sweep_initial_delta(cfg, deltas, args.workers)
            for s in spread:
                print(f"spread {s.denoiser} k={s.k}: min {s.min:.5f} median {s.median:.5f} "
                      f"max {s.max:.5f} spread {s.spread:.5f}")
        elif args.verb == "sweep-alphabet":
            rows = alphabet_sweep(args.sizes, cfg, args.workers)
        elif args.verb == "estimate-channel":
            rows, estimates = estimate_channel(cfg)
            for (k, d0), pi in estimates.items():
                print(f"k={k} delta0={d0:g}")
                for row in pi.entries:
                    print("  " + " ".join(f"{v:.6f}" for v in row))
        else:
            rows, written = run_denoise(cfg, cfg.output_dir or ".")
            for path in written:
                print(f"wrote {path}")
    except (ValueError, OSError) as exc:
        print(f"icedude: {exc}", file=sys.stderr)
        return 1

    print_summary(rows)
    return 0 if all(r.ok for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
