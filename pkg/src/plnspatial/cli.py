"""Command-line entry point: simulate, fit, score, compare, aniso, confound.

Exit status is 0 on success, 1 on usage or input errors and 2 when the
sampler or a numerical routine fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import InputError, NumericalError
from .evaluation import anisotropy_summary, rank_reports, read_reports, score_model, write_reports
from .io import (
    load_dataset,
    read_draws,
    sample_from_draws,
    write_dataset,
    write_draws,
    write_json,
    write_manifest,
)
from .model import get_model

log = logging.getLogger("plnspatial")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_chain_flags(p):
    p.add_argument("--model", help="model id, M0..M10")
    p.add_argument("--iters", type=int, help="total iterations per chain")
    p.add_argument("--burnin", type=int, help="burn-in iterations")
    p.add_argument("--thin", type=int, help="store every k-th iteration")
    p.add_argument("--chains", type=int, help="number of chains")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--config", help="INI run configuration")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plnspatial", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic survey")
    p.add_argument("--model", default="M9")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    _add_chain_flags(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--restricted", action="store_true", help="fit the restricted spatial regression")

    p = sub.add_parser("score", help="DIC and scoring rules for a fit")
    p.add_argument("--fit", required=True, help="output directory of 'fit'")
    p.add_argument("--data", help="dataset (defaults to the one recorded by the fit)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="rank score reports")
    p.add_argument("reports", nargs="+", help="score.csv files")
    p.add_argument("--out", required=True)

    p = sub.add_parser("aniso", help="binned angle-correlation summary")
    p.add_argument("--fit", required=True)
    p.add_argument("--data")
    p.add_argument("--bins", type=int, default=3)
    p.add_argument("--block", help="spatial block label (N or S for by-shore models)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("confound", help="SGLM / RSR / RSR-PPD comparison or coverage study")
    _add_chain_flags(p)
    p.add_argument("--data", help="compare the three fits on this dataset")
    p.add_argument("--reps", type=int, default=30, help="replicates for the coverage study")
    p.add_argument("--generator", choices=("SGLM", "RSR", "both"), default="SGLM")
    p.add_argument("--out", required=True)
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if args.model:
        cfg = replace(cfg, model=args.model)
    chain = cfg.chain
    updates = {k: v for k, v in (("n_iter", args.iters), ("burn_in", args.burnin), ("thin", args.thin),
                                  ("n_chains", args.chains), ("seed", args.seed)) if v is not None}
    if updates:
        try:
            chain = replace(chain, **updates)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    cfg = replace(cfg, chain=chain, seed=chain.seed)
    if getattr(args, "data", None):
        cfg.data = Path(args.data)
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    from .simulate import DesignSpec, default_truth, generate_dataset, generate_locations

    model = get_model(args.model)
    rng = np.random.default_rng(args.seed)
    design = DesignSpec()
    locs = generate_locations(design, rng)
    truth = default_truth(model, design.n_days)
    data, realised = generate_dataset(model, truth, locs, rng, return_latent=True)
    out = _out_dir(args.out)
    write_dataset(data, out / "data.csv")
    write_json(
        {"model": model.model_id, "seed": args.seed, "beta0": realised.beta0, "beta": realised.beta,
         "gamma": realised.gamma, "sigma2": realised.sigma2, "tau2": realised.tau2, "corr": realised.corr,
         "Z": realised.Z(data)},
        out / "truth.json",
    )
    write_manifest(out)
    print(out / "data.csv")


def cmd_fit(args):
    from .sampler import run_chains

    cfg = _run_config(args)
    if cfg.data is None or cfg.out is None:
        raise UsageError("fit needs --data and --out (or [run] data/out in --config)")
    data = load_dataset(cfg.data)
    model = get_model(cfg.model, cfg.circle_kernel)
    sample = run_chains(cfg.chain, model, data, cfg.hyperpriors, restricted=args.restricted)
    out = _out_dir(cfg.out)
    write_draws(sample, out / "draws.csv")
    meta = dict(sample.meta)
    meta["data"] = str(Path(cfg.data).resolve())
    meta["acceptance"] = {k: np.asarray(v).mean(axis=0).tolist() for k, v in sample.acceptance.items()}
    meta["diagnostics"] = sample.diagnostics
    meta["n_draws"] = sample.n_draws
    write_json(meta, out / "meta.json")
    write_manifest(out)
    print(f"{model.model_id}: {sample.n_draws} draws -> {out}")


def _load_fit(fit_dir, data_path=None):
    fit_dir = Path(fit_dir)
    try:
        meta = json.loads((fit_dir / "meta.json").read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read fit metadata in {fit_dir}: {exc}") from None
    sample = sample_from_draws(read_draws(fit_dir / "draws.csv"), meta)
    data = load_dataset(data_path or meta["data"])
    return sample, data, meta


def cmd_score(args):
    sample, data, _ = _load_fit(args.fit, args.data)
    report = score_model(sample, data)
    out = _out_dir(args.out)
    write_reports([report], out / "score.csv")
    write_json(report.to_dict(), out / "score.json")
    write_manifest(out)
    r = report.row()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def cmd_compare(args):
    reports = []
    for path in args.reports:
        try:
            reports.extend(read_reports(path))
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read report {path}: {exc}") from None
    rows = rank_reports(reports)
    out = _out_dir(args.out)
    cols = list(rows[0])
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_manifest(out)
    for r in rows:
        print(f"{r['model']:>4} DIC={r['DIC']:.1f} best={r['best']}")


def cmd_aniso(args):
    sample, data, meta = _load_fit(args.fit, args.data)
    model = get_model(meta["model"], meta.get("circle_kernel", "chord"))
    table = anisotropy_summary(sample, data, n_bins=args.bins, model=model, block=args.block)
    out = _out_dir(args.out)
    rows = table.rows()
    with (out / "aniso.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_manifest(out)
    pk = table.peak
    print(f"peak bin [{pk.lower:.3f}, {pk.upper:.3f}] mean corr {pk.mean_corr:.4f}")


def cmd_confound(args):
    from .confounding import StudyConfig, confounding_report, fit_rsr, misspecification_study, write_coverage
    from .sampler import run_chains

    cfg = _run_config(args)
    out = _out_dir(args.out)
    if args.data:
        data = load_dataset(args.data)
        model = get_model(cfg.model)
        sglm = run_chains(cfg.chain, model, data, cfg.hyperpriors)
        rsr = fit_rsr(cfg.chain, model, data, cfg.hyperpriors)
        rows = confounding_report(sglm, rsr, data).rows()
        with (out / "confounding.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    else:
        study = StudyConfig(model=args.model or "M8", seed=cfg.seed)
        if any(v is not None for v in (args.iters, args.burnin, args.thin, args.chains)):
            study.chain = cfg.chain
        gens = ("SGLM", "RSR") if args.generator == "both" else (args.generator,)
        rows = [r for g in gens for r in misspecification_study(args.reps, g, study)]
        write_coverage(rows, out / "coverage.csv")
    write_manifest(out)
    print(f"{len(rows)} rows -> {out}")


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "score": cmd_score,
    "compare": cmd_compare,
    "aniso": cmd_aniso,
    "confound": cmd_confound,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"plnspatial {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"plnspatial {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, OSError, ValueError) as exc:
        print(f"plnspatial {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
