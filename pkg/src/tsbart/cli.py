"""Command-line front end.

Subcommands: ``fit``, ``tune``, ``simulate``, ``benchmark``, ``predict``
and ``rerun``. Every command writes only inside ``--out`` and leaves a
``manifest.json`` there recording the resolved arguments, the master
seed, input digests and output digests. ``rerun`` replays a manifest.

Exit codes: 0 success, 2 bad configuration or arguments, 3 bad data,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._seeding import derive_seed
from .data import Dataset, Schema, dataset_from_frame, load_csv, read_frame, write_csv
from .exceptions import ConfigError, DataError, NumericalError, SchemaError, TsbartError
from .sampler import (
    FitConfig,
    build_model,
    run_chain,
    summarize,
    write_predictions,
    write_scalars,
    write_trees,
)
from .simbench import (
    SCENARIOS,
    Budget,
    Sim1Config,
    Sim2Config,
    run_benchmark,
    sim1_generate,
    sim2_generate,
    write_replicates,
    write_summary,
)
from .trees import TreePriorConfig
from .tuning import DEFAULT_CANDIDATES, TuningBudget, parse_candidates, tune_crossings, write_report

log = logging.getLogger("tsbart")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, argv, config: dict, seed: int, inputs, started):
    outputs = {p.name: _digest(p) for p in sorted(out.iterdir())
               if p.is_file() and p.name != "manifest.json" and not p.name.startswith(".")}
    manifest = {
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config,
        "seed": seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": outputs,
        "version": __version__,
        "duration_seconds": round(time.perf_counter() - started, 3),
    }
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest.", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, out / "manifest.json")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _repr(v) -> str:
    return repr(float(v))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- shared argument groups ---------------------------------------------------------------


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", required=True, help="input CSV with a header row")
    g.add_argument("--kind", choices=("continuous", "binary", "survival"), default="continuous")
    g.add_argument("--time", required=True, help="target covariate column (t)")
    g.add_argument("--response", help="response column (y, or the 0/1 outcome)")
    g.add_argument("--event", help="event/censoring column for survival data (alias of --response)")
    g.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    g.add_argument("--categorical", default="", help="comma-separated columns to one-hot encode")


def _add_chain_args(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--trees", type=int, default=200)
    g.add_argument("--draws", type=int, default=10000)
    g.add_argument("--burn", type=int, default=1000)
    g.add_argument("--thin", type=int, default=1)
    g.add_argument("--mode", choices=("tsbart", "vanilla_bart"), default="tsbart")
    g.add_argument("--nu", type=float, default=3.0)
    g.add_argument("--q-sigma", type=float, default=0.9)
    g.add_argument("--tree-alpha", type=float, default=0.95)
    g.add_argument("--tree-beta", type=float, default=2.0)
    g.add_argument("--min-leaf", type=int, default=5)
    g.add_argument("--max-cuts", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")


def _split(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else []


def _schema(args) -> Schema:
    response = args.response or args.event
    if response is None:
        flag = "--event" if args.kind == "survival" else "--response"
        raise ConfigError(f"missing {flag}: name the response column")
    covs = _split(args.covariates) or None
    return Schema(response=response, time=args.time, kind=args.kind, covariates=covs,
                  categorical=tuple(_split(args.categorical)))


def _fit_config(args, seed: int, **extra) -> FitConfig:
    tree = TreePriorConfig(args.tree_alpha, args.tree_beta, args.min_leaf)
    return FitConfig(kind=args.kind, mode=args.mode, m=args.trees, n_draws=args.draws,
                     n_burn=args.burn, thin=args.thin, nu=args.nu, q_sigma=args.q_sigma,
                     tree_prior=tree, max_cuts=args.max_cuts, seed=seed, **extra)


def _config_dict(cfg: FitConfig) -> dict:
    d = asdict(cfg)
    d["tree_prior"] = asdict(cfg.tree_prior)
    return d


def _load_points(path, dataset: Dataset, schema: Schema):
    """Prediction points: a CSV with the time column and the raw covariate columns."""
    frame = read_frame(path)
    if schema.response not in frame.columns:
        frame[schema.response] = "0"
    pts = dataset_from_frame(frame, Schema(schema.response, schema.time, "continuous",
                                           schema.covariates, schema.categorical), str(path))
    if pts.covariate_names != dataset.covariate_names:
        # categorical levels absent from the points file: align by name
        X = np.zeros((pts.n, dataset.p))
        for j, name in enumerate(dataset.covariate_names):
            if name in pts.covariate_names:
                X[:, j] = pts.X[:, pts.covariate_names.index(name)]
            elif name.split("=", 1)[0] not in schema.categorical:
                raise SchemaError(f"{path}: covariate column {name!r} not found")
        return pts.t, X
    return pts.t, pts.X


# --- commands ----------------------------------------------------------------------------


def cmd_fit(args, argv) -> int:
    started = time.perf_counter()
    sources = [args.kappa is not None, args.length_scale is not None, args.tune]
    if sum(sources) != 1:
        raise ConfigError("give exactly one of --kappa, --length-scale or --tune")
    schema = _schema(args)
    dataset = load_csv(args.data, schema)
    out = _out_dir(args.out)
    inputs = [Path(args.data)]
    config_extra = {}
    kappa, length = args.kappa, args.length_scale
    if args.tune:
        grid = parse_candidates(args.grid) if args.grid else DEFAULT_CANDIDATES
        base = _fit_config(args, derive_seed(args.seed, "tune"))
        tuned = tune_crossings(dataset, base, grid, TuningBudget(), jobs=args.jobs)
        write_report(tuned, out / "tuning.csv")
        kappa = tuned.kappa
        config_extra["tuning_grid"] = list(tuned.candidates)
    cfg = _fit_config(args, derive_seed(args.seed, "fit"), kappa=kappa if kappa else 1.0,
                      length_scale=length, keep_loglik=False, keep_trees=args.keep_trees)
    points = None
    if args.predict_at:
        points = _load_points(args.predict_at, dataset, schema)
        inputs.append(Path(args.predict_at))
    draws = run_chain(dataset, cfg, predict_at=points, model=build_model(dataset, cfg))
    write_scalars(draws, out / "scalars.csv")
    if points is not None:
        write_predictions(draws, out / "predictions.csv")
    if args.keep_trees:
        write_trees(draws, out / "trees.txt")
    print(f"kappa={cfg.kappa!r} length_scale={draws.length_scale!r} draws={draws.n_draws}")
    _write_manifest(out, "fit", argv, {**_config_dict(cfg), **config_extra}, args.seed, inputs,
                    started)
    return 0


def cmd_tune(args, argv) -> int:
    started = time.perf_counter()
    grid = parse_candidates(args.grid) if args.grid else DEFAULT_CANDIDATES
    dataset = load_csv(args.data, _schema(args))
    out = _out_dir(args.out)
    base = _fit_config(args, derive_seed(args.seed, "tune"))
    budget = TuningBudget(args.trees, args.draws, args.burn)
    tuned = tune_crossings(dataset, base, grid, budget, jobs=args.jobs)
    write_report(tuned, out / "tuning.csv")
    print(f"selected kappa={tuned.kappa!r} length_scale={tuned.length_scale!r} "
          f"zeta={tuned.zeta!r}")
    conf = {**_config_dict(base), "grid": list(grid), "budget": asdict(budget)}
    _write_manifest(out, "tune", argv, conf, args.seed, [Path(args.data)], started)
    return 0


def cmd_simulate(args, argv) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    if args.suite == "sim1":
        cfg = Sim1Config(n=args.n, p=args.p, pair_correlation=args.correlation, seed=args.seed)
        data = sim1_generate(cfg)
        write_csv(data.train, out / "train.csv")
        write_csv(data.test, out / "test.csv")
        pd.DataFrame({"f": data.f_test}).to_csv(out / "truth_test.csv", index=False,
                                                 float_format=_repr)
    else:
        cfg = Sim2Config(scenario=args.scenario, n=args.n, seed=args.seed,
                         target_survival=args.target_survival, n_test=args.n_test)
        data = sim2_generate(cfg)
        write_csv(data.train, out / "train.csv")
        names = [f"x{j + 1}" for j in range(data.test_X.shape[1])]
        cols = {"subject": np.repeat(np.arange(data.test_X.shape[0]), data.grid.size),
                "t": np.tile(data.grid.values, data.test_X.shape[0])}
        for j, name in enumerate(names):
            cols[name] = np.repeat(data.test_X[:, j], data.grid.size)
        cols["hazard"] = data.h_test.reshape(-1)
        pd.DataFrame(cols).to_csv(out / "test_hazards.csv", index=False, float_format=_repr)
    print(f"wrote {args.suite} data to {out}")
    _write_manifest(out, "simulate", argv, asdict(cfg), args.seed, [], started)
    return 0


def cmd_benchmark(args, argv) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    if args.suite == "sim1":
        cfg = Sim1Config(n=args.n, p=args.p, pair_correlation=args.correlation)
    else:
        cfg = Sim2Config(scenario=args.scenario, n=args.n, n_test=args.n_test)
    budget = Budget(m=args.trees, n_draws=args.draws, n_burn=args.burn, kappa=args.kappa)
    result = run_benchmark(args.suite, cfg, args.replicates, budget, seed=args.seed,
                           jobs=args.jobs)
    write_summary(result, out / "summary.csv")
    write_replicates(result, out / "replicates.csv")
    for row in result.summary:
        print(f"{row['method']:>13}  logloss_out={row['logloss_out']:.4f}  "
              f"coverage={row['coverage']:.4f}  mse={row['mse']:.5f}")
    print(f"paired Wilcoxon p={result.p_value:.4g}")
    _write_manifest(out, "benchmark", argv, result.config, args.seed, [], started)
    return 0


def cmd_predict(args, argv) -> int:
    """Posterior mean and interval per point from a fit's predictions.csv."""
    started = time.perf_counter()
    run = Path(args.run)
    source = run / "predictions.csv"
    if not source.exists():
        raise DataError(f"{source} not found; fit with --predict-at first")
    frame = pd.read_csv(source)
    wide = frame.pivot(index="draw", columns="point", values="value")
    s = summarize(wide.to_numpy(), args.level)
    t = frame.groupby("point")["t"].first().to_numpy()
    out = pd.DataFrame({"point": wide.columns, "t": t, "mean": s.mean, "lower": s.lower,
                        "upper": s.upper})
    target = _out_dir(args.out)
    out.to_csv(target / "summary.csv", index=False, float_format=_repr)
    _write_manifest(target, "predict", argv, {"level": args.level}, 0, [source], started)
    return 0


def cmd_rerun(args, argv) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    old = list(manifest["argv"])
    if "--out" not in old:
        raise ConfigError("manifest argv has no --out")
    old[old.index("--out") + 1] = args.out
    base = Path(manifest.get("cwd", "."))
    for flag in ("--data", "--predict-at", "--manifest", "--run"):
        if flag in old:
            k = old.index(flag) + 1
            old[k] = str(base / old[k])
    return main(old)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsbart", description="BART with targeted smoothing.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="run one chain",
                         description="Fit a model. Writes scalars.csv (draw, sigma2, eta, "
                                     "gamma2, loglik), predictions.csv (draw, point, t, value) "
                                     "when --predict-at is given, and manifest.json.")
    _add_data_args(fit)
    _add_chain_args(fit)
    fit.add_argument("--kappa", type=float, help="expected number of crossings")
    fit.add_argument("--length-scale", type=float)
    fit.add_argument("--tune", action="store_true", help="pick kappa by WAIC first")
    fit.add_argument("--grid", help="candidate kappas for --tune, e.g. 0.5,1,2,4,8")
    fit.add_argument("--jobs", type=int, default=1)
    fit.add_argument("--predict-at", help="CSV of points (time and covariate columns)")
    fit.add_argument("--keep-trees", action="store_true", help="also write trees.txt")
    fit.set_defaults(func=cmd_fit)

    tune = sub.add_parser("tune", help="choose expected crossings by WAIC",
                          description="Writes tuning.csv (kappa, length_scale, waic, lppd, "
                                      "p_waic, selected).")
    _add_data_args(tune)
    _add_chain_args(tune)
    tune.set_defaults(trees=50, draws=2000, burn=500)
    tune.add_argument("--grid", help="comma-separated candidates (default 0.5,1,2,4,8)")
    tune.add_argument("--jobs", type=int, default=1)
    tune.set_defaults(func=cmd_tune)

    sim = sub.add_parser("simulate", help="generate a simulation dataset")
    sim.add_argument("--suite", choices=("sim1", "sim2"), required=True)
    sim.add_argument("--scenario", choices=SCENARIOS, default="linear_interaction")
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--p", type=int, default=4)
    sim.add_argument("--correlation", type=float, default=0.5)
    sim.add_argument("--target-survival", type=float, default=0.5)
    sim.add_argument("--n-test", type=int, default=200)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("benchmark", help="compare tsbart and vanilla_bart on simulations",
                           description="Writes summary.csv and replicates.csv.")
    bench.add_argument("--suite", choices=("sim1", "sim2"), required=True)
    bench.add_argument("--scenario", choices=SCENARIOS, default="linear_interaction")
    bench.add_argument("--n", type=int, default=500)
    bench.add_argument("--p", type=int, default=4)
    bench.add_argument("--correlation", type=float, default=0.5)
    bench.add_argument("--n-test", type=int, default=200)
    bench.add_argument("--replicates", type=int, default=20)
    bench.add_argument("--trees", type=int, default=50)
    bench.add_argument("--draws", type=int, default=2000)
    bench.add_argument("--burn", type=int, default=500)
    bench.add_argument("--kappa", type=float, default=1.0)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--jobs", type=int, default=1)
    bench.add_argument("--out", required=True)
    bench.set_defaults(func=cmd_benchmark)

    summ = sub.add_parser("predict", help="posterior means and intervals from a fit",
                          description="Summarizes predictions.csv of a fit into summary.csv "
                                      "(point, t, mean, lower, upper).")
    summ.add_argument("--run", required=True, help="output directory of a fit")
    summ.add_argument("--level", type=float, default=0.95)
    summ.add_argument("--out", required=True, help="directory for summary.csv")
    summ.set_defaults(func=cmd_predict)

    rerun = sub.add_parser("rerun", help="replay a manifest into a new directory")
    rerun.add_argument("--manifest", required=True)
    rerun.add_argument("--out", required=True)
    rerun.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TsbartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
