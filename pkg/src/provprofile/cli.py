"""Command-line batch runs.

Subcommands ``profile-linear``, ``profile-smr``, ``profile-z`` and
``simulate``.  Every run writes ``manifest.json`` next to its reports.  On
failure the exit status is 1 (2 for usage errors) and a JSON error record
is printed to stderr and, when possible, written to ``error.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io as pio
from .core import ProfilingError, score_arrays
from .lambda_policy import LambdaConfig, flag_with_lambda, parse_prior
from .linear import profile_linear
from .nullfit import MleFitConfig
from .simulation import PRESETS, load_scenario, preset, run_replications
from .smoothing import fit_smoothed_null, provider_nulls, stratified_nulls
from .survival import smr_pipeline


class UsageError(ProfilingError):
    pass


def _rho(text):
    v = float(text)
    if not 0 < v < 0.5:
        raise argparse.ArgumentTypeError("rho must lie in (0, 0.5)")
    return v


def _lam(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError("lambda must lie in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="provprofile",
                                     description="Provider profiling with empirical nulls.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)

    def null_opts(p):
        p.add_argument("--rho", type=_rho, default=0.05)
        p.add_argument("--two-sided", action="store_true")
        p.add_argument("--groups", type=int, default=None, help="size groups G")
        p.add_argument("--strata", type=int, default=None,
                       help="use K stratified nulls instead of the smoothed null")
        p.add_argument("--zeta0", type=float, default=1.64)
        lam = p.add_mutually_exclusive_group()
        lam.add_argument("--lambda", dest="lam", type=_lam, default=None)
        lam.add_argument("--lambda-prior", dest="lambda_prior", default=None,
                         help="beta:a,b or point:x")

    p = sub.add_parser("profile-linear", help="linear outcomes CSV")
    common(p)
    null_opts(p)
    p = sub.add_parser("profile-smr", help="survival CSV, SMR Z-scores")
    common(p)
    null_opts(p)
    p.add_argument("--min-expected", type=float, default=3.0)
    p = sub.add_parser("profile-z", help="precomputed provider_id,size,z CSV")
    common(p)
    null_opts(p)
    p = sub.add_parser("simulate", help="run a simulation scenario")
    common(p, needs_input=False)
    p.add_argument("--preset", default=None)
    p.add_argument("--config", type=Path, default=None,
                   help="scenario file (JSON or key=value lines)")
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--rho", type=_rho, default=None)
    p.add_argument("--zeta0", type=float, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--strata", type=int, default=None)
    p.add_argument("--min-expected", type=float, default=None)
    # --seed default 0 is replaced by the scenario seed unless given
    p.set_defaults(seed=None)
    return parser


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": sys.version.split()[0]}


def _lambda_config(args):
    if args.lambda_prior:
        return LambdaConfig(lam=None, prior=parse_prior(args.lambda_prior), seed=args.seed)
    return LambdaConfig(lam=1.0 if args.lam is None else args.lam, seed=args.seed)


def _fit_and_flag(args, ids, size, z, out: Path):
    """Fit the requested null, flag, and write nulls/funnel/flags/model."""
    config = MleFitConfig(zeta0=args.zeta0)
    size = np.asarray(size, dtype=float)
    if args.strata:
        mean, sd, groups = stratified_nulls(size, z, args.strata, config, ids)
        model = {"kind": "stratified", "groups": [
            {"index": g.index, "count": g.count, "median_size": g.median_size,
             "min_size": float(size[g.members].min()), "max_size": float(size[g.members].max()),
             "mean": g.mean, "var": g.var, "null_prop": g.fit.null_prop} for g in groups]}
    else:
        fitted = fit_smoothed_null(size, z, args.groups, config, ids)
        mean, sd = provider_nulls(fitted, size)
        model = {"kind": "smoothed", **fitted.to_dict()}
    lam_cfg = _lambda_config(args)
    reports = flag_with_lambda(ids, z, mean, sd, lam_cfg, args.rho, args.two_sided)
    model.update(rho=args.rho, zeta0=args.zeta0, lam=lam_cfg.lam,
                 lambda_prior=args.lambda_prior, lambda_used=lam_cfg.lam_used)
    pio.write_nulls(out / "nulls.csv", reports, size)
    pio.write_funnel(out / "funnel.csv", reports, size)
    pio.write_flags(out / "flags.csv", reports)
    pio.write_json(out / "null_model.json", model)
    counts = {d: sum(r.decision == d for r in reports) for d in ("worse", "better", "none")}
    return ["nulls.csv", "funnel.csv", "flags.csv", "null_model.json"], counts


def cmd_profile_linear(args):
    ds = pio.read_linear_csv(args.input)
    scores, comps = profile_linear(ds)
    pio.write_linear_scores(args.out / "scores.csv", scores)
    files, counts = _fit_and_flag(args, list(scores.provider_ids), scores.n, scores.z_fe,
                                  args.out)
    summary = {"providers": ds.n_providers, "records": ds.n_records,
               "mu": comps.mu, "sigma_alpha": comps.sigma_alpha, "sigma_w": comps.sigma_w,
               "beta": comps.beta.tolist(), "flags": counts}
    return ["scores.csv", *files], summary


def cmd_profile_smr(args):
    ds = pio.read_survival_csv(args.input)
    res = smr_pipeline(ds, args.min_expected)
    pio.write_smr(args.out / "smr.csv", res)
    files, counts = _fit_and_flag(args, res.provider_ids, res.patient_years, res.z, args.out)
    summary = {"providers": ds.n_providers, "records": ds.n_records,
               "excluded": list(res.excluded), "beta": res.cox.beta.tolist(),
               "cox_iterations": res.cox.iterations, "flags": counts}
    return ["smr.csv", *files], summary


def cmd_profile_z(args):
    ids, size, z = score_arrays(pio.read_scores_csv(args.input))
    files, counts = _fit_and_flag(args, ids, size, z, args.out)
    return files, {"providers": len(ids), "flags": counts}


def _scenario(args):
    if (args.preset is None) == (args.config is None):
        raise UsageError("give exactly one of --preset or --config")
    if args.preset is not None and args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    sc = preset(args.preset) if args.preset else load_scenario(args.config)
    over = {"replications": args.replications, "seed": args.seed, "rho": args.rho,
            "zeta0": args.zeta0, "n_groups": args.groups, "n_strata": args.strata,
            "min_expected": args.min_expected}
    return replace(sc, **{k: v for k, v in over.items() if v is not None})


def cmd_simulate(args):
    sc = _scenario(args)
    res = run_replications(sc, jobs=args.jobs)
    files = []
    if res.curves:
        res.write_curves(args.out / "curves.csv")
        files.append("curves.csv")
    if res.strata_rates:
        res.write_strata_rates(args.out / "strata_rates.csv")
        files.append("strata_rates.csv")
    return files, {"scenario": sc.to_dict(),
                   "failures": {str(k): v for k, v in res.failures.items()}}


COMMANDS = {"profile-linear": cmd_profile_linear, "profile-smr": cmd_profile_smr,
            "profile-z": cmd_profile_z, "simulate": cmd_simulate}


def _config_record(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out: Path = args.out
    record = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
              "config": _config_record(args), "versions": _versions()}
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if getattr(args, "input", None) is not None:
            if not args.input.is_file():
                raise UsageError(f"input file not found: {args.input}")
            record["input"] = {"path": str(args.input), "sha256": _sha256(args.input)}
        out.mkdir(parents=True, exist_ok=True)
        files, summary = COMMANDS[args.command](args)
        record.update(outputs=files, summary=summary)
        pio.write_json(out / "manifest.json", record)
    except (ProfilingError, OSError) as exc:
        err = {"status": "error", "command": args.command, "error": type(exc).__name__,
               "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        try:
            pio.write_json(out / "error.json", {**err, "config": record["config"]})
        except OSError:
            pass
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
