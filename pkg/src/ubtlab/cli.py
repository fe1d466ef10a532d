"""Command-line front end.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure,
5 defense refused by the poison gate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import numcore as nc
from .config import ConfigError, ExperimentConfig, load_config
from .defense import StageError
from .objectives import TrainingError
from .pipeline import (SWEEP_AXES, TRAIN_STAGES, ArtifactConflict, MissingArtifact, RunDir, SweepError,
                       cmd_defend, cmd_eval, cmd_generate, cmd_sweep, cmd_train)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_REFUSED = 0, 2, 3, 4, 5

log = logging.getLogger("ubtlab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "out", None):
        cfg.output = args.out
    return cfg


def _run(cfg: ExperimentConfig) -> RunDir:
    return RunDir(cfg.output, cfg)


def do_init(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.write_text(ExperimentConfig().to_ini())
    print(f"wrote default config to {path}")
    return EXIT_OK


def do_generate(args) -> int:
    cfg = _config(args)
    data = cmd_generate(cfg, _run(cfg))
    for name, ds in data.items():
        print(f"{name}: {len(ds)} samples, {int(ds.poisoned.sum())} poisoned")
    return EXIT_OK


def do_train(args) -> int:
    cfg = _config(args)
    cmd_train(cfg, _run(cfg), args.stage)
    print(f"trained {args.stage} -> {Path(cfg.output) / 'ckpt' / (args.stage + '.ckpt')}")
    return EXIT_OK


def do_defend(args) -> int:
    cfg = _config(args)
    out = cmd_defend(cfg, _run(cfg), args.method)
    if out.ubt is not None:
        res = out.ubt
        print(f"s_susp={res.partition.susp_indices.size} k={res.topk.topk_indices.size} "
              f"gate_similarity={res.gate_similarity:.4f}")
    if out.refused:
        print("poison gate refused unlearning; model left unchanged")
        return EXIT_REFUSED
    print(f"defended ({out.method}) -> {Path(cfg.output) / 'ckpt' / ('defended-' + out.method + '.ckpt')}")
    return EXIT_OK


def do_eval(args) -> int:
    cfg = _config(args)
    rec = cmd_eval(cfg, _run(cfg), args.checkpoint, plot=not args.no_plot)
    kl = "n/a" if rec.kl_to_retrain is None else f"{rec.kl_to_retrain:.6f}"
    print(f"{rec.stage}: ca={rec.ca:.4f} asr={rec.asr:.4f} kl_to_retrain={kl}")
    return EXIT_OK


def do_bound(args) -> int:
    inputs = ev.PacInputs(args.kl, args.c0, args.r, args.eps, args.delta)
    print(f"N0 = {ev.pac_min_samples(inputs)!r}")
    print(f"N0 (exact inversion) = {ev.pac_sufficient_samples(inputs)!r}")
    if args.n is not None:
        print(f"bound_rhs(n={args.n}) = {ev.pac_bound_rhs(args.kl, args.n, args.delta)!r}")
    if args.grid:
        kls = [args.kl * f for f in (0.5, 1.0, 2.0, 4.0)] if args.kl > 0 else [0.0, 1.0, 2.0, 4.0]
        rs = [args.r * f for f in (0.5, 1.0, 2.0)]
        print("kl_q," + ",".join(f"r={r:g}" for r in rs))
        for kl in kls:
            row = [ev.pac_min_samples(ev.PacInputs(kl, args.c0, r, args.eps, args.delta)) for r in rs]
            print(f"{kl:g}," + ",".join(f"{v:.6g}" for v in row))
    return EXIT_OK


def do_sweep(args) -> int:
    cfg = _config(args)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one integer")
    rows = cmd_sweep(cfg, args.axis, values, root=cfg.output)
    for row in rows:
        print(f"{args.axis}={row['value']}: asr {row['asr_poisoned']:.4f} -> {row['asr_defended']:.4f}, "
              f"ca {row['ca_poisoned']:.4f} -> {row['ca_defended']:.4f}, refused={row['refused']}")
    print(f"wrote {Path(cfg.output) / ('sweep-' + args.axis + '.csv')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ubtlab", description="Backdoor unlearning lab for a toy dual encoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="INI config (defaults when omitted)")
        sp.add_argument("-o", "--out", help="override the output directory")
        return sp

    sp = sub.add_parser("init", help="write the default config")
    sp.add_argument("path")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=do_init)

    with_config(sub.add_parser("generate", help="write dataset snapshots")).set_defaults(func=do_generate)

    sp = with_config(sub.add_parser("train", help="train one stage"))
    sp.add_argument("--stage", choices=TRAIN_STAGES, required=True)
    sp.set_defaults(func=do_train)

    sp = with_config(sub.add_parser("defend", help="run a defense on the poisoned checkpoint"))
    sp.add_argument("--method", choices=("ubt", "abl", "cleanft", "none"))
    sp.set_defaults(func=do_defend)

    sp = with_config(sub.add_parser("eval", help="metrics, histogram CSV and figure for a checkpoint"))
    sp.add_argument("checkpoint", help="run checkpoint name (e.g. poison, defended-ubt) or a .ckpt path")
    sp.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    sp.set_defaults(func=do_eval)

    sp = sub.add_parser("bound", help="PAC-Bayes minimum sample size")
    sp.add_argument("--kl", type=float, required=True)
    sp.add_argument("--c0", type=float, default=1.0)
    sp.add_argument("--r", type=float, required=True)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--delta", type=float, default=0.05)
    sp.add_argument("--n", type=int)
    sp.add_argument("--grid", action="store_true", help="print N0 over a small kl x r grid")
    sp.set_defaults(func=do_bound)

    sp = with_config(sub.add_parser("sweep", help="full pipeline per value of one axis"))
    sp.add_argument("--axis", choices=tuple(SWEEP_AXES), required=True)
    sp.add_argument("--values", required=True, help="comma-separated integers")
    sp.set_defaults(func=do_sweep)
    return p


def _numeric(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (nc.NumcoreError, TrainingError)):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ev.InvalidPacInputs, ArtifactConflict) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (StageError, SweepError, TrainingError, nc.NumcoreError) as exc:
        if _numeric(exc):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
