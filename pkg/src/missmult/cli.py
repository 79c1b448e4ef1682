"""Command-line interface: ``missmult {simulate,fit,summarize,replicate,diagnose}``.

Human-readable tables go to stdout; logs go to stderr as JSON lines.  Exit
codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  Every failure also prints one JSON error line.
"""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import io as mio
from .eval import (BLOCKS, MetricReport, StudyResult, gelman_rubin, pooled_draws,
                   posterior_summary, replicate_study, score_draws, summary_rows)
from .gibbs import config_dict, run_chains
from .model import InvariantError
from .simgen import GroundTruth, gen_scenario1, gen_scenario2

log = logging.getLogger("missmult")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODELS = {"misszidm": "missZIDM", "missdm": "missDM", "zidm": "ZIDM", "dmdm": "DMDM"}
GR_THRESHOLD = 1.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()})


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)
    mio.capture_warnings()


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = mio.load_config(args.config)
    scenario = mio.build_scenario(cfg["scenario"], kind=args.scenario)
    gen = gen_scenario1 if args.scenario == 1 else gen_scenario2
    records, cov, truth = gen(scenario, args.seed)
    os.makedirs(args.out, exist_ok=True)
    mio.atomic_write(os.path.join(args.out, "records.csv"), mio.format_records(records))
    mio.atomic_write(os.path.join(args.out, "labels.txt"),
                     "".join(f"{c + 1}\n" for c in range(records.C)))
    if cov.x_site.shape[1] > 1:
        N = cov.x_site.shape[0]
        mio.atomic_write(os.path.join(args.out, "site_covariates.csv"), mio.format_covariates(
            cov.x_site, [(i + 1,) for i in range(N)], ["site_id"]))
        keys = [(i + 1, j + 1) for i in range(N) for j in range(records.visits_per_site[i])]
        mio.atomic_write(os.path.join(args.out, "visit_covariates.csv"), mio.format_covariates(
            cov.x_visit, keys, ["site_id", "visit_id"]))
    mio.write_json(os.path.join(args.out, "truth.json"), truth.to_dict())
    mio.write_json(os.path.join(args.out, "scenario.json"),
                   {"kind": args.scenario, "seed": args.seed, **mio.config_echo(scenario)})
    n_val = int(np.sum(records.validated >= 0))
    print(f"scenario {args.scenario}: {len(records)} records, {n_val} validated, "
          f"written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_dataset(data_dir, standardize):
    def opt(name):
        p = os.path.join(data_dir, name)
        return p if os.path.exists(p) else None

    records_path = os.path.join(data_dir, "records.csv")
    if not os.path.exists(records_path):
        raise mio.DataError(f"{data_dir}: records.csv not found")
    labels = mio.read_labels(opt("labels.txt")) if opt("labels.txt") else None
    table, index = mio.parse_records(records_path, labels)
    cov, constants = mio.parse_covariates(
        index, table, site_path=opt("site_covariates.csv"),
        visit_path=opt("visit_covariates.csv"), indiv_path=opt("individual_covariates.csv"),
        standardize=standardize)
    try:
        data = table.to_dataset(cov)
    except InvariantError as exc:
        raise mio.DataError(str(exc)) from exc
    return data, index, constants


def _chain_diagnostics(chains):
    diag = {"chains": [{"stream_id": c.stream_id, "runtime_s": c.runtime,
                        "acceptance_beta_gamma": c.acceptance_rate_beta_gamma.tolist(),
                        "mh_step_size": np.asarray(c.mh_step_size).tolist()}
                       for c in chains]}
    if len(chains) >= 2:
        diag["gelman_rubin"] = _gr_summary(gelman_rubin(chains))
    return diag


def _gr_summary(gr):
    vals = np.concatenate([np.ravel(v) for v in gr.values()])
    return {"monitored": int(vals.size),
            "max": float(np.max(vals)) if vals.size else None,
            "fraction_below_1.1": float(np.mean(vals < GR_THRESHOLD)) if vals.size else None,
            "per_block_max": {k: float(np.max(v)) for k, v in gr.items()}}


def cmd_fit(args):
    cfg = mio.load_config(args.config)
    model = cfg["model"]
    variant = MODELS[args.model] if args.model else model.get("variant", "missZIDM")
    hyper = mio.build_hyper(model, variant=variant)
    run_over = {}
    if args.seed is not None:
        run_over["seed"] = args.seed
    if args.chains is not None:
        run_over["chains"] = args.chains
    run = mio.build_run(cfg["run"], **run_over)
    standardize = bool(cfg["data"].get("standardize", True))
    data, index, constants = _load_dataset(args.data, standardize)
    log.info("fitting %s: %d records, %d visits, %d chain(s)", hyper.variant, data.dims.M,
             data.dims.V, run.chains)
    chains = run_chains(data, hyper, run, workers=args.workers)
    keep = None if args.save_zeta else [k for k in chains[0].draws if k != "zeta"]
    persisted = [{k: v for k, v in c.draws.items() if keep is None or k in keep}
                 for c in chains]
    rows = summary_rows(posterior_summary(persisted))
    meta = {
        "package_version": __version__,
        "model": mio.config_echo(hyper),
        "run": config_dict(run),
        "data": {"path": os.path.abspath(args.data), "standardize": standardize,
                 "standardization": {k: (None if v is None else vars(v))
                                     for k, v in constants.items()},
                 "dims": {"N": data.dims.N, "V": data.dims.V, "M": data.dims.M,
                          "T": data.dims.T, "C": data.dims.C},
                 "dropped_visits": data.n_dropped_visits,
                 "labels": index.labels},
    }
    mio.save_fit(args.out, chains, meta=meta, summary_rows=rows,
                 diagnostics=_chain_diagnostics(chains), binary=args.binary, keep=keep)
    print(f"{hyper.variant}: {len(chains)} chain(s) x {chains[0].n_draws} draws "
          f"written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# summarize / diagnose
# ---------------------------------------------------------------------------

_SHOWN = ("eta", "psi", "theta_star", "beta_eta", "beta_psi", "beta_gamma")


def cmd_summarize(args):
    meta, chains = mio.load_fit(args.fit)
    summary = posterior_summary(chains)
    shown = list(summary) if args.all else [k for k in _SHOWN if k in summary]
    print(f"{'parameter':<22}{'mean':>10}{'2.5%':>10}{'97.5%':>10}")
    for name, mean, lo, hi in summary_rows({k: summary[k] for k in shown}):
        print(f"{name:<22}{mean:>10.4f}{lo:>10.4f}{hi:>10.4f}")
    if args.truth:
        truth = GroundTruth.from_dict(mio.read_json(args.truth))
        scores = score_draws(pooled_draws(chains), truth)
        report = MetricReport(variant=meta["model"]["variant"],
                              metrics={b: scores.get(b) for b in BLOCKS}, replicates=1)
        table = StudyResult(reports=[report], per_replicate={})
        print()
        print(table.to_text(), end="")
        if args.out:
            mio.atomic_write(args.out, table.to_csv())
    return EXIT_OK


def cmd_diagnose(args):
    meta, chains = mio.load_fit(args.fit)
    diag = mio.read_json(os.path.join(args.fit, "diagnostics.json"))
    for c in diag["chains"]:
        acc = ", ".join(f"{a:.2f}" for a in c["acceptance_beta_gamma"])
        print(f"chain {c['stream_id']}: beta_gamma acceptance [{acc}]")
    if len(chains) < 2:
        print("Gelman-Rubin needs at least two chains; rerun fit with --chains 2")
        return EXIT_OK
    gr = gelman_rubin(chains)
    s = _gr_summary(gr)
    print(f"Gelman-Rubin over {s['monitored']} scalars: max {s['max']:.3f}, "
          f"{100 * s['fraction_below_1.1']:.1f}% below {GR_THRESHOLD}")
    for k, v in s["per_block_max"].items():
        print(f"  {k:<12} max {v:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replicate
# ---------------------------------------------------------------------------

def cmd_replicate(args):
    scfg = mio.load_config(args.scenario_config)
    fcfg = mio.load_config(args.fit_config)
    scenario = mio.build_scenario(scfg["scenario"])
    hyper = mio.build_hyper(fcfg["model"])
    run = mio.build_run(fcfg["run"])
    study = fcfg["study"]
    variants = study.get("variants", ["missZIDM", "missDM", "DMDM", "ZIDM"])
    variants = [MODELS.get(str(v).lower(), v) for v in variants]
    prior = study.get("prior", "auto")
    if prior not in ("auto", "config"):
        raise mio.ConfigError("[study] prior must be 'auto' or 'config'")
    workers = args.workers or int(study.get("workers", 1))
    t0 = time.perf_counter()
    res = replicate_study(scenario, variants, R=args.replicates, seed=args.seed, run_config=run,
                          hyper=hyper, prior=None if prior == "config" else "auto",
                          workers=workers)
    os.makedirs(args.out, exist_ok=True)
    mio.atomic_write(os.path.join(args.out, "table.csv"), res.to_csv())
    mio.atomic_write(os.path.join(args.out, "table.txt"), res.to_text())
    lines = ["variant,replicate,block,abs,frob,cov"]
    for v, reps in res.per_replicate.items():
        for r, scores in enumerate(reps):
            for b, m in (scores or {}).items():
                lines.append(f"{v},{r},{b},{m['abs']:.17g},{m['frob']:.17g},{m['cov']:.17g}")
    mio.atomic_write(os.path.join(args.out, "replicates.csv"), "\n".join(lines) + "\n")
    mio.write_json(os.path.join(args.out, "study.json"), {
        "scenario": mio.config_echo(scenario), "model": mio.config_echo(hyper),
        "run": config_dict(run), "variants": variants, "prior": prior,
        "replicates": args.replicates, "seed": args.seed,
        "runtime_s": time.perf_counter() - t0, "package_version": __version__})
    print(res.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _pos_int(text):
    v = _nonneg_int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    p = _Parser(prog="missmult", description="Bayesian models for misclassified, "
                "zero-inflated multinomial data.")
    p.add_argument("--version", action="version", version=f"missmult {__version__}")
    # logging flags are accepted before or after the command name
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="warnings and errors only")
    for a in common._actions:
        p._add_action(a)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a simulation dataset")
    s.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="run the sampler on a dataset directory")
    f.add_argument("--data", required=True)
    f.add_argument("--model", choices=sorted(MODELS))
    f.add_argument("--config")
    f.add_argument("--chains", type=_pos_int)
    f.add_argument("--seed", type=_nonneg_int)
    f.add_argument("--out", required=True)
    f.add_argument("--workers", type=_pos_int, default=1)
    f.add_argument("--binary", action="store_true", help="also write binary draw files")
    f.add_argument("--save-zeta", action="store_true", help="persist at-risk indicator draws")
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("summarize", parents=[common], help="posterior summaries, optionally scored")
    m.add_argument("--fit", required=True)
    m.add_argument("--truth")
    m.add_argument("--out", help="write the metric table as CSV")
    m.add_argument("--all", action="store_true", help="list every stored quantity")
    m.set_defaults(func=cmd_summarize)

    r = sub.add_parser("replicate", parents=[common], help="replicated simulation study")
    r.add_argument("--scenario-config", required=True)
    r.add_argument("--fit-config", required=True)
    r.add_argument("--replicates", type=_pos_int, default=10)
    r.add_argument("--seed", type=_nonneg_int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=_pos_int)
    r.set_defaults(func=cmd_replicate)

    d = sub.add_parser("diagnose", parents=[common], help="convergence diagnostics for a fit")
    d.add_argument("--fit", required=True)
    d.set_defaults(func=cmd_diagnose)
    return p


def _fail(code, kind, exc):
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    if args.command is None:
        parser.print_help(sys.stderr)
        return _fail(EXIT_USAGE, "usage", "no command given")
    _setup_logging(logging.DEBUG if getattr(args, "verbose", False) else
                   logging.WARNING if getattr(args, "quiet", False) else logging.INFO)
    try:
        return args.func(args)
    except (UsageError, mio.ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (mio.DataError, FileNotFoundError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (InvariantError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
