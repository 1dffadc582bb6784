"""``shmm`` command line: fit, simulate, validate, spectral-demo, check.

Exit codes: 0 success, 1 usage or data error, 2 fit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from shmm import dataio, presets
from shmm.core import ModelDims, check_assumptions
from shmm.inference import FitConfig, FitError, fit
from shmm.sim import simulate_batch

log = logging.getLogger("shmm")

FAMILY_CHOICES = ("gaussian_periodic_mean", "exp_periodic_scale", "zero_inflated_exp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared flag groups
# ---------------------------------------------------------------------------


def _add_data_flags(p):
    g = p.add_argument_group("input data")
    g.add_argument("--data", required=True, help="delimited daily data file")
    g.add_argument("--date-column", default="DATE", help="date column name or 0-based index (default DATE)")
    g.add_argument("--value-column", default="RR", help="value column name or 0-based index (default RR)")
    g.add_argument("--date-format", default="compact",
                   help="'iso', 'compact' (YYYYMMDD), a strptime pattern, or 'none' for undated rows (default compact)")
    g.add_argument("--delimiter", default=",", help="field delimiter (default ',')")
    g.add_argument("--missing-below", type=float, default=None,
                   help="raw values below this are missing (default 0 for non-negative families, none otherwise)")
    g.add_argument("--missing-value", type=float, default=None, help="extra raw sentinel treated as missing")
    g.add_argument("--scale", type=float, default=1.0, help="multiply raw values by this (0.1 for tenths of mm)")
    g.add_argument("--quality-column", default=None, help="quality flag column; rows flagged 9 are missing")
    g.add_argument("--start-doy", type=int, default=1, help="day of year of the first row for undated files")
    g.add_argument("--impute-seed", type=int, default=None, help="seed for missing-value draws (default --seed)")


def _col(v):
    if v is None:
        return None
    return int(v) if str(v).isdigit() else v


def _ingest(args, family: str):
    from shmm.emissions import FAMILIES

    fmt = None if args.date_format == "none" else args.date_format
    below = args.missing_below
    if below is None:
        below = FAMILIES[family].support[0] if np.isfinite(FAMILIES[family].support[0]) else -np.inf
    cfg = dataio.IngestConfig(
        date_column=_col(args.date_column) if fmt else None,
        value_column=_col(args.value_column),
        date_format=fmt,
        delimiter=args.delimiter,
        missing_below=below,
        missing_value=args.missing_value,
        scale=args.scale,
        quality_column=_col(args.quality_column),
        start_doy=args.start_doy,
    )
    seed = args.seed if args.impute_seed is None else args.impute_seed
    return dataio.ingest(args.data, cfg, seed=seed)


def _load_model(args):
    if getattr(args, "model", None):
        return dataio.load_model(args.model)
    if getattr(args, "preset", None) == "sim-study":
        return presets.sim_study_model()
    if getattr(args, "preset", None) == "precip":
        raise UsageError("the precip preset fixes fit dimensions only; pass --model for this command")
    raise UsageError("one of --model or --preset sim-study is required")


def _out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

PRESET_FIT = {
    "sim-study": dict(family="gaussian_periodic_mean", states=2, period=365, degree=1, mixture=1, emission_degree=1),
    "precip": dict(family="zero_inflated_exp", states=4, period=365, degree=2, mixture=3, emission_degree=0),
}


def cmd_fit(args) -> int:
    if args.preset:
        for k, v in PRESET_FIT[args.preset].items():
            if getattr(args, k) is None:
                setattr(args, k, v)
    missing = [f"--{k.replace('_', '-')}" for k in ("family", "states", "period") if getattr(args, k) is None]
    if missing:
        raise UsageError(f"missing required flag(s): {' '.join(missing)}")
    series = _ingest(args, args.family)
    out = _out(args)
    dims = ModelDims(args.states, args.period, args.degree or 0)
    cfg = FitConfig(
        n_starts=args.starts, short_run_iters=args.short_iters, short_run_len=args.short_len,
        rel_tol=args.rel_tol, max_iters=args.max_iters, seed=args.seed, pi_mode=args.pi_mode,
        restart_from=args.restart_from, threads=args.threads,
    )
    opts = {}
    if args.family == "zero_inflated_exp":
        opts.update(M=args.mixture or 3, dry_threshold=args.dry_threshold)
    elif args.family == "gaussian_periodic_mean":
        opts.update(M=args.mixture or 1, degree=args.emission_degree or 0, var_floor=args.var_floor)
    else:
        opts.update(M=args.mixture or 1, degree=args.emission_degree or 0, scale_floor=args.scale_floor)
    try:
        res = fit(series.values, dims, args.family, cfg, start=series.start, **opts)
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        if exc.diagnostics is not None:
            dataio.save_json(exc.diagnostics.to_dict(), os.path.join(out, "fit_diagnostics.json"))
        return 2
    dataio.save_model(res.model, os.path.join(out, "model.json"))
    dataio.save_json(res.diagnostics.to_dict(), os.path.join(out, "fit_diagnostics.json"))
    dataio.save_json({"length": len(series), "start_doy": series.start, "events": series.provenance},
                     os.path.join(out, "ingest_provenance.json"))
    d = res.diagnostics
    print(f"loglik {d.trace[-1][1]:.6f} after {len(d.trace) - 1} iterations "
          f"(start {d.chosen_start}, converged={d.converged})")
    return 0


def cmd_simulate(args) -> int:
    model = _load_model(args)
    out = _out(args)
    trajs = simulate_batch(model, args.length, args.reps, args.seed, start=args.start,
                           keep_states=not args.no_states, threads=args.threads)
    width = max(4, len(str(args.reps)))
    for r, tr in enumerate(trajs, start=1):
        dataio.write_series(os.path.join(out, f"rep_{r:0{width}d}.csv"), tr.Y, states=tr.X)
    dataio.save_json({"reps": args.reps, "length": args.length, "seed": args.seed, "start": args.start,
                      "model_fingerprint": trajs[0].fingerprint}, os.path.join(out, "manifest.json"))
    print(f"wrote {len(trajs)} trajectories to {out}")
    return 0


def cmd_validate(args) -> int:
    from shmm.validate import bootstrap_report

    model = _load_model(args)
    series = _ingest(args, model.emissions.tag)
    out = _out(args)
    rep = bootstrap_report(model, series, reps=args.reps, seed=args.seed, window=args.window,
                           dry_threshold=args.dry_threshold, max_spell=args.max_spell,
                           decode=not args.no_decode, threads=args.threads)
    rep.write(out)
    for k, v in rep.coverage().items():
        print(f"{k:>16s}  coverage {v:.3f}")
    return 0


def cmd_spectral_demo(args) -> int:
    from shmm.spectral import default_features, population_roundtrip

    rng = np.random.default_rng(args.seed)
    model = presets.screened_model(args.states, args.period, rng, d=args.degree)
    feats = default_features(model, args.features)
    err = population_roundtrip(model, feats, rng)
    rows = list(zip(range(1, args.period + 1), err["O"], err["pi"], err["Q"]))
    print(f"{'t':>4s} {'err_O':>12s} {'err_pi':>12s} {'err_Q':>12s}")
    for t, a, b, c in rows:
        print(f"{t:4d} {a:12.3e} {b:12.3e} {c:12.3e}")
    worst = max(max(v.max() for v in err.values()), 0.0)
    print(f"max error {worst:.3e}")
    if args.out:
        out = _out(args)
        dataio.write_table(os.path.join(out, "spectral_errors.csv"), ["t", "err_O", "err_pi", "err_Q"], rows)
        dataio.save_model(model, os.path.join(out, "model.json"))
    return 0


def cmd_check(args) -> int:
    model = _load_model(args)
    rep = check_assumptions(model, tol=args.tol)
    for m in rep.messages:
        print(f"warning: {m}", file=sys.stderr)
    doc = rep.to_dict()
    if args.out:
        dataio.save_json(doc, os.path.join(_out(args), "assumptions.json"))
    print(json.dumps({"ok": rep.ok, "alpha": rep.alpha, "spectral_gap": rep.spectral_gap,
                      "min_abs_det": float(np.abs(rep.det).min()), "messages": rep.messages}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shmm", description="Seasonal hidden Markov models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
        sp.add_argument("--threads", type=int, default=1, help="worker cap for parallel sections (default 1)")
        sp.add_argument("--out", required=out_required, help="output directory")

    f = sub.add_parser("fit", help="fit a model by multi-start EM")
    _add_data_flags(f)
    common(f)
    f.add_argument("--preset", choices=sorted(PRESET_FIT), help="fill dimensions and family from a preset")
    f.add_argument("--family", choices=FAMILY_CHOICES)
    f.add_argument("--states", type=int, help="number of hidden states K")
    f.add_argument("--period", type=int, help="period T")
    f.add_argument("--degree", type=int, help="trigonometric degree of the transitions (default 0)")
    f.add_argument("--mixture", type=int, help="mixture components M per state (zero-inflated: includes the dry mass)")
    f.add_argument("--emission-degree", type=int, help="trigonometric degree of the emission mean/scale (default 0)")
    f.add_argument("--starts", type=int, default=30, help="number of random starts (default 30)")
    f.add_argument("--short-iters", type=int, default=50, help="EM iterations per start (default 50)")
    f.add_argument("--short-len", type=int, default=500, help="observations used by each start (default 500)")
    f.add_argument("--rel-tol", type=float, default=1e-7, help="relative log-likelihood stopping threshold")
    f.add_argument("--max-iters", type=int, default=5000, help="cap on long-run EM iterations")
    f.add_argument("--pi-mode", choices=("free", "stationary"), default="free", help="initial-law treatment")
    f.add_argument("--restart-from", choices=("initial", "short_run"), default="initial",
                   help="long run starts from the chosen start's initial point or its short-run end")
    f.add_argument("--dry-threshold", type=float, default=0.0, help="values <= this are dry (zero-inflated)")
    f.add_argument("--var-floor", type=float, default=1e-6, help="Gaussian variance floor")
    f.add_argument("--scale-floor", type=float, default=1e-3, help="floor on the periodic scale 1 + sigma(t)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate trajectories from a model")
    common(s)
    s.add_argument("--model", help="model document (JSON)")
    s.add_argument("--preset", choices=("sim-study", "precip"), help="built-in model instead of --model")
    s.add_argument("--length", type=int, required=True, help="observations per trajectory")
    s.add_argument("--reps", type=int, default=1, help="number of trajectories (default 1)")
    s.add_argument("--start", type=int, default=1, help="phase of the first observation (default 1)")
    s.add_argument("--no-states", action="store_true", help="omit the hidden state column")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="parametric-bootstrap validation report")
    _add_data_flags(v)
    common(v)
    v.add_argument("--model", help="model document (JSON)")
    v.add_argument("--preset", choices=("sim-study", "precip"), help="built-in model instead of --model")
    v.add_argument("--reps", type=int, default=1000, help="bootstrap replicates (default 1000)")
    v.add_argument("--window", type=int, default=0, help="pool days within +-window of each day (default 0)")
    v.add_argument("--dry-threshold", type=float, default=0.0, help="values <= this are dry")
    v.add_argument("--max-spell", type=int, default=30, help="longest spell length tabulated before overflow")
    v.add_argument("--no-decode", action="store_true", help="skip the decoded state-frequency table")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("spectral-demo", help="spectral recovery round trip on a random model")
    common(d, out_required=False)
    d.add_argument("--states", type=int, default=2, help="number of hidden states (default 2)")
    d.add_argument("--period", type=int, default=4, help="period (default 4)")
    d.add_argument("--degree", type=int, default=1, help="transition trigonometric degree (default 1)")
    d.add_argument("--features", type=int, default=None, help="feature count N (default 2K)")
    d.set_defaults(func=cmd_spectral_demo)

    c = sub.add_parser("check", help="screen a model against the identifiability assumptions")
    common(c, out_required=False)
    c.add_argument("--model", help="model document (JSON)")
    c.add_argument("--preset", choices=("sim-study", "precip"), help="built-in model instead of --model")
    c.add_argument("--tol", type=float, default=1e-8, help="relative determinant tolerance")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"shmm: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"shmm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
