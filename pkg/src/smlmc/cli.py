"""Command-line interface: ``smlmc {simulate,fit,cluster,impute,bench}``.

Every subcommand accepts ``--seed``, ``--config`` (a JSON or YAML mapping of
settings; explicit flags win) and ``--out``.  Library errors map to exit
codes: 2 invalid input, 3 unparseable data, 4 numerical failure, 5 bad model
file, 6 population failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from . import bench as bench_mod
from .data import SyntheticSpec, default_cadences, default_ground_truth, load_dataset, save_dataset, synth_generate
from .errors import DomainError, SmlmcError
from .kernel import characteristic_features
from .modelio import load_model, save_model
from .online import OnlineConfig, metrics, naive_one_lag, paired_t_test, run_independent, run_online
from .population import ClusterConfig, PopulationConfig, build_population_model, describe, grid_mode_search, univariate_population
from .shrinkage import PriorConfig
from .trainer import FitResult, TrainConfig, fit_patient

log = logging.getLogger("smlmc")


# -- config handling -------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise DomainError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise DomainError("config must be a mapping")
    return doc


def build_dataclass(cls, values: dict):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise DomainError(f"unknown {cls.__name__} settings: {sorted(unknown)}")
    kw = {}
    for name, value in values.items():
        if name == "prior" and isinstance(value, dict):
            value = build_dataclass(PriorConfig, value)
        elif name == "cluster" and isinstance(value, dict):
            value = build_dataclass(ClusterConfig, value)
        elif isinstance(value, list):
            value = tuple(value)
        kw[name] = value
    try:
        return cls(**kw)
    except TypeError as exc:
        raise DomainError(str(exc)) from exc


def _merge(cfg: dict, **flags) -> dict:
    out = dict(cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# -- subcommands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _merge(
        load_config(args.config),
        n_patients=args.n_patients,
        D=args.D,
        horizon=args.horizon,
        dense_cadence=args.dense_cadence,
        sparse_cadence=args.sparse_cadence,
        hyper_jitter=args.hyper_jitter,
        noise=args.noise,
        seed=args.seed,
    )
    D = int(cfg.pop("D", 6))
    seed = int(cfg.pop("seed", 0))
    truth = default_ground_truth(D, seed=seed, noise=float(cfg.pop("noise", 0.05)))
    cadences = default_cadences(D, float(cfg.pop("dense_cadence", 4.0)), float(cfg.pop("sparse_cadence", 24.0)))
    spec = build_dataclass(
        SyntheticSpec,
        {"ground_truth": truth, "cadences": cadences, "seed": seed, "n_patients": 10, "horizon": 240.0, **cfg},
    )
    cohort = synth_generate(spec)
    save_dataset(args.out, cohort)
    if args.truth_out:
        save_model(args.truth_out, truth, meta={"seed": seed})
    print(f"wrote {len(cohort)} patients ({sum(p.n_obs for p in cohort)} observations) to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = _merge(
        load_config(args.config),
        Q=args.Q,
        R=args.R,
        n_random_init=args.n_random_init,
        max_outer_iters=args.max_outer_iters,
        workers=args.workers,
    )
    if args.dense:
        cfg["sparse"] = False
    tc = build_dataclass(TrainConfig, cfg)
    if args.eta is not None:
        tc = tc.with_eta(args.eta)
    return tc


def cmd_fit(args) -> int:
    cohort = load_dataset(args.data)
    if args.patient:
        wanted = set(args.patient)
        cohort = [p for p in cohort if p.patient_id in wanted]
        missing = wanted - {p.patient_id for p in cohort}
        if missing:
            raise DomainError(f"patients not in dataset: {sorted(missing)}")
    tc = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).spawn(len(cohort))
    for obs, ss in zip(cohort, seeds):
        seed = int(ss.generate_state(1)[0])
        if args.univariate:
            if tc.Q != 1 or tc.R != 1:
                tc = dataclasses.replace(tc, Q=1, R=1)
            for d, name in enumerate(obs.covariate_names):
                one = obs.select(lambda c, t, _d=d: c == _d)
                if one.n_obs < 2:
                    continue
                sub = type(obs)(obs.patient_id, [name], [one.times[d]], [one.values[d]])
                r = fit_patient(sub, tc, seed=seed)
                save_model(out / f"{obs.patient_id}__{name}.json", r, meta={"univariate": True})
            print(f"{obs.patient_id}: univariate fits written")
            continue
        r = fit_patient(obs, tc, seed=seed)
        save_model(out / f"{obs.patient_id}.json", r)
        feats = ", ".join(f"({p:.1f} h, {l:.1f} h)" for p, l in map(characteristic_features, r.kernel.basis))
        print(f"{obs.patient_id}: objective {r.objective_trace[-1]:.4f} after {r.n_outer} iterations; kernels {feats}")
    return 0


def _model_paths(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not files:
        raise DomainError("no model files given")
    return files


def cmd_cluster(args) -> int:
    fits = [load_model(p) for p in _model_paths(args.models)]
    if not all(isinstance(f, FitResult) for f in fits):
        raise DomainError("cluster expects per-patient fit files")
    cfg = load_config(args.config)
    cluster_cfg = build_dataclass(ClusterConfig, _merge(cfg.pop("cluster", {}), Q_max=args.q_max))
    if args.univariate:
        groups = defaultdict(list)
        for f in fits:
            if f.kernel.D != 1:
                raise DomainError("univariate clustering expects single-covariate fits")
            groups[f.covariate_names[0]].append(f)
        names = sorted(groups)
        kernels = univariate_population([groups[n] for n in names])
        mean = np.array([grid_mode_search([f.mean[0] for f in groups[n]]) for n in names])
        scale = np.array([grid_mode_search([f.scale[0] for f in groups[n]]) for n in names])
        save_model(args.out, {"kernels": kernels, "covariate_names": names, "mean": mean, "scale": scale})
        print(f"wrote univariate kernels for {len(names)} covariates to {args.out}")
        return 0
    pcfg = build_dataclass(PopulationConfig, {**cfg, "cluster": cluster_cfg})
    model = build_population_model(fits, pcfg, seed=args.seed)
    save_model(args.out, model, meta={"n_patients": len(fits)})
    print(f"Q' = {model.Q_prime}")
    for row in describe(model):
        print(f"  period {row['period_h']:.2f} h, length-scale {row['length_scale_h']:.2f} h, {row['members']} members, coverage {row['coverage']:.2f}")
    return 0


RECORD_FIELDS = ["patient_id", "method", "covariate", "time", "mean", "var", "actual", "covered"]


def cmd_impute(args) -> int:
    model = load_model(args.model)
    if not hasattr(model, "to_kernel"):
        raise DomainError("impute expects a population model file")
    cohort = load_dataset(args.data)
    ocfg = build_dataclass(
        OnlineConfig,
        _merge(load_config(args.config), window_hours=args.window, momentum=args.momentum, learning_rate=args.lr),
    )
    if args.no_update:
        ocfg = dataclasses.replace(ocfg, update=False)
    baselines = args.baseline or []
    uni = None
    if "independent" in baselines:
        if not args.univariate_model:
            raise DomainError("--baseline independent needs --univariate-model")
        uni = load_model(args.univariate_model)
        names = list(model.covariate_names)
        missing = set(names) - set(uni["covariate_names"])
        if missing:
            raise DomainError(f"univariate model lacks covariates {sorted(missing)}")
        order = [uni["covariate_names"].index(n) for n in names]
        uni = {"kernels": [uni["kernels"][i] for i in order], "mean": uni["mean"][order], "scale": uni["scale"][order]}

    rows = []
    per_patient = defaultdict(lambda: defaultdict(dict))  # method -> covariate -> patient -> mae
    for obs in cohort:
        runs = {"structured": run_online(obs, model, ocfg)}
        if "naive" in baselines:
            runs["naive"] = naive_one_lag(obs, prior_mean=model.mean)
        if uni is not None:
            runs["independent"] = run_independent(obs, uni["kernels"], model.mean, model.scale)
        for method, records in runs.items():
            for r in records:
                rows.append([obs.patient_id, method, r.covariate, r.time, r.predicted_mean, r.predicted_var, r.actual, int(r.in_95_region)])
            for name, m in metrics(records).items():
                per_patient[method][name][obs.patient_id] = m.mae

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        w.writerows(rows)

    summary_path = Path(args.summary) if args.summary else out.with_name(out.stem + "_summary.csv")
    names = list(model.covariate_names)
    with summary_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "covariate", "n", "mae", "coverage95", "t_vs_structured", "p_vs_structured", "significant"])
        for method in per_patient:
            recs = [r for r in rows if r[1] == method]
            overall = metrics_from_rows(recs)
            for name in names:
                if name not in overall:
                    continue
                n, mae, cov = overall[name]
                t = p = math.nan
                sig = ""
                if method != "structured":
                    a, b = per_patient["structured"][name], per_patient[method][name]
                    common = sorted(set(a) & set(b))
                    if len(common) >= 2:
                        res = paired_t_test([a[i] for i in common], [b[i] for i in common], n_comparisons=len(names))
                        t, p, sig = res.t, res.p, int(res.significant)
                w.writerow([method, name, n, mae, cov, t, p, sig])
    print(f"wrote {len(rows)} records to {out} and summary to {summary_path}")
    return 0


def metrics_from_rows(rows) -> dict:
    groups = defaultdict(list)
    for r in rows:
        groups[r[2]].append(r)
    out = {}
    for name, rs in groups.items():
        err = np.abs(np.array([r[6] - r[4] for r in rs]))
        var = np.array([r[5] for r in rs])
        cov = float(np.mean([r[7] for r in rs])) if np.all(np.isfinite(var)) else math.nan
        out[name] = (len(rs), float(err.mean()), cov)
    return out


def cmd_bench(args) -> int:
    cfg = _merge(load_config(args.config), sizes=args.sizes, workers=args.workers, Q=args.Q, D=args.D, R=args.R, method=args.method, seed=args.seed)
    report = bench_mod.run_bench(
        sizes=tuple(cfg.get("sizes", (500, 1000, 2000, 3000))),
        workers=tuple(cfg.get("workers", (1, 4))),
        Q=int(cfg.get("Q", 5)),
        D=int(cfg.get("D", 24)),
        R=int(cfg.get("R", 8)),
        method=cfg.get("method", "per_parameter"),
        seed=int(cfg.get("seed", 0)),
    )
    print(bench_mod.format_table(report.rows))
    print(f"max objective difference {report.max_objective_diff:.3g}, max gradient difference {report.max_gradient_diff:.3g}")
    doc = {"rows": [r.as_dict() for r in report.rows], "max_objective_diff": report.max_objective_diff, "max_gradient_diff": report.max_gradient_diff}
    if args.scaling:
        slope, times = bench_mod.inversion_scaling()
        doc["inversion_slope"] = slope
        doc["inversion_times"] = times
        print(f"inversion log-log slope {slope:.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smlmc", description="Sparse multi-output GP kernels for irregular clinical time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON or YAML settings file")
        sp.add_argument("--out", required=out_required)

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    common(s)
    s.add_argument("--n-patients", type=int)
    s.add_argument("--D", type=int)
    s.add_argument("--horizon", type=float)
    s.add_argument("--dense-cadence", type=float)
    s.add_argument("--sparse-cadence", type=float)
    s.add_argument("--hyper-jitter", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--truth-out", help="also write the generating kernel")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit per-patient kernels")
    common(f)
    f.add_argument("--data", required=True)
    f.add_argument("--patient", action="append")
    f.add_argument("--Q", type=int)
    f.add_argument("--R", type=int)
    f.add_argument("--eta", type=float)
    f.add_argument("--n-random-init", type=int)
    f.add_argument("--max-outer-iters", type=int)
    f.add_argument("--workers", type=int)
    f.add_argument("--dense", action="store_true", help="no shrinkage prior")
    f.add_argument("--univariate", action="store_true", help="fit every covariate on its own")
    f.set_defaults(func=cmd_fit, seed=0)

    c = sub.add_parser("cluster", help="build the population model")
    common(c)
    c.add_argument("--models", nargs="+", required=True, help="fit files or directories")
    c.add_argument("--q-max", type=int)
    c.add_argument("--univariate", action="store_true")
    c.set_defaults(func=cmd_cluster, seed=0)

    i = sub.add_parser("impute", help="online one-step-ahead prediction")
    common(i)
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--summary")
    i.add_argument("--window", type=float)
    i.add_argument("--momentum", type=float)
    i.add_argument("--lr", type=float)
    i.add_argument("--no-update", action="store_true")
    i.add_argument("--baseline", action="append", choices=["naive", "independent"])
    i.add_argument("--univariate-model")
    i.set_defaults(func=cmd_impute)

    b = sub.add_parser("bench", help="time objective and gradient evaluation")
    common(b, out_required=False)
    b.add_argument("--sizes", type=int, nargs="+")
    b.add_argument("--workers", type=int, nargs="+")
    b.add_argument("--Q", type=int)
    b.add_argument("--D", type=int)
    b.add_argument("--R", type=int)
    b.add_argument("--method", choices=["per_parameter", "blocked"])
    b.add_argument("--scaling", action="store_true", help="also report the inversion scaling slope")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SmlmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
