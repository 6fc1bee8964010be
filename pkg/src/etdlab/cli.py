"""Command-line front end: ``etdlab analyze | run | ensemble | report``.

Exit codes: 0 success (a diverging run is a result, not a failure),
2 configuration error, 3 invalid model, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .analysis import analyze, integrate_mean_ode
from .config import ExperimentConfig
from .exceptions import (ConfigParse, EmptyEmphasis, Inconsistent, MissingRuns, ModelError,
                         NonIrreducible, SingularSystem, UnreachableAction)
from .experiment import EnsembleStats, RunRecord, default_jobs, run_ensemble, run_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_IO = 0, 2, 3, 4
MODEL_ERRORS = (ModelError, SingularSystem, NonIrreducible, UnreachableAction, Inconsistent,
                EmptyEmphasis)
RUNS_FILE = "runs.csv"
AGGREGATE_FILE = "aggregate.json"


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path, header, rows, config_hash):
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _read_csv(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# config_hash="):
            raise MissingRuns(f"{path} has no config hash header")
        rows = list(csv.DictReader(fh))
    return first.strip().split("=", 1)[1], rows


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), runs=getattr(args, "runs", None),
                              thin=getattr(args, "thin", None))


def _analysis(cfg, mdp, pp):
    return analyze(mdp, pp, weighting=cfg.doc["weighting"])


# ---------------------------------------------------------------------------


def cmd_analyze(args):
    cfg = _load(args)
    mdp, pp = cfg.build_model()
    report = _analysis(cfg, mdp, pp)
    doc = {"config_hash": cfg.hash, "config": cfg.to_dict(), "report": report.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "analysis.json").write_text(text)
        ode = cfg.doc.get("ode")
        if ode is not None and report.theta_star is not None:
            theta0 = np.zeros(mdp.n_features) if ode["theta0"] is None else np.asarray(ode["theta0"])
            tau, path = integrate_mean_ode(report, theta0, ode["horizon"], ode["dt"])
            header = ["tau"] + [f"theta_{j}" for j in range(mdp.n_features)]
            _write_csv(out / "ode.csv", header, np.column_stack([tau, path]).tolist(), cfg.hash)
    else:
        sys.stdout.write(text)
    if not report.assumptions.ok:
        failed = [k for k, v in report.assumptions.to_dict().items() if v is False]
        print(f"etdlab: model violates the standing assumptions ({', '.join(failed)})",
              file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK


def trajectory_rows(traj):
    return [[int(t), int(s), f, m, ne, *th] for t, s, f, m, ne, th in
            zip(traj.t, traj.states, traj.F, traj.M, traj.norm_e, traj.theta)]


def cmd_run(args):
    cfg = _load(args)
    mdp, pp = cfg.build_model()
    report = _analysis(cfg, mdp, pp)
    plan = cfg.build_plan(mdp, pp, report)
    traj = run_trajectory(plan, args.run_index)
    out = _out_dir(args.out)
    header = ["t", "S_t", "F_t", "M_t", "norm_e"] + [f"theta_{j}" for j in range(mdp.n_features)]
    _write_csv(out / "trajectory.csv", header, trajectory_rows(traj), cfg.hash)
    _write_json(out / "trajectory.json", {
        "config_hash": cfg.hash, "config": cfg.to_dict(),
        "seed": plan.base_seed, "run_index": args.run_index, "thin": plan.thin,
        "n_steps": traj.n_steps, "diverged": traj.diverged, "diverged_at": traj.diverged_at,
        "clip_events": traj.clip_events, "theta_final": traj.theta_final.tolist(),
        "theta_bar": traj.theta_bar_final.tolist(),
        "theta_star": None if report.theta_star is None else report.theta_star.tolist(),
        "created": datetime.now(timezone.utc).isoformat(),
    })
    if traj.diverged:
        print(f"etdlab: run diverged at step {traj.diverged_at}", file=sys.stderr)
    return EXIT_OK


RUN_FIELDS = list(RunRecord.__dataclass_fields__)


def cmd_ensemble(args):
    cfg = _load(args)
    mdp, pp = cfg.build_model()
    report = _analysis(cfg, mdp, pp)
    if report.theta_star is None:
        raise ModelError("no theta* available for this model")
    jobs = args.jobs if args.jobs is not None else default_jobs()
    rows, points = [], []
    for param, value in cfg.grid_points():
        plan = cfg.build_plan(mdp, pp, report, param, value)
        stats, _ = run_ensemble(plan, jobs=jobs, theta_star=report.theta_star)
        for rec in stats.records:
            rows.append([value if value is not None else float("nan"),
                         *[getattr(rec, f) for f in RUN_FIELDS]])
        points.append({"param": param, "value": value, "delta": plan.delta,
                       "radius": plan.algo.radius, "aggregate": stats.aggregate})
    out = _out_dir(args.out)
    _write_csv(out / RUNS_FILE, ["grid_value"] + RUN_FIELDS, rows, cfg.hash)
    e = cfg.doc["experiment"]
    _write_json(out / AGGREGATE_FILE, {
        "config_hash": cfg.hash, "config": cfg.to_dict(),
        "base_seed": e["base_seed"], "seeds": [[e["base_seed"], r] for r in range(e["n_runs"])],
        "theta_star": report.theta_star.tolist(), "points": points,
    })
    return EXIT_OK


def _record_from_row(row):
    vals = {}
    for name, f in RunRecord.__dataclass_fields__.items():
        raw = row[name]
        if f.type in ("int", int):
            vals[name] = int(raw)
        elif f.type in ("bool", bool):
            vals[name] = bool(int(raw))
        else:
            vals[name] = float(raw)
    return RunRecord(**vals)


CURVES = {
    "occupation_fraction": ["neighborhood_fraction_median", "neighborhood_fraction_mean"],
    "segment_violation": ["segment_violation_prob", "segment_violation_ci"],
    "averaged_deviation": ["averaged_deviation_median", "final_deviation_median"],
    "kappa": ["kappa", "kappa_se"],
    "divergence": ["divergence_rate", "divergence_ci"],
}


def cmd_report(args):
    dirs = [Path(d) for d in args.dirs]
    files = [d / RUNS_FILE for d in dirs if (d / RUNS_FILE).is_file()]
    if not files:
        raise MissingRuns(f"no {RUNS_FILE} found in {', '.join(map(str, dirs))}")
    hashes, groups = set(), {}
    for path in files:
        h, rows = _read_csv(path)
        hashes.add(h)
        for row in rows:
            groups.setdefault(row["grid_value"], []).append(_record_from_row(row))
    if len(hashes) > 1:
        raise ConfigParse(f"refusing to mix outputs of different configs: {sorted(hashes)}")
    if not any(groups.values()):
        raise MissingRuns("run files contain no records")
    config_hash = hashes.pop()
    keys = sorted(groups, key=float)
    aggs = {v: EnsembleStats.from_records(groups[v]).aggregate for v in keys}
    out = _out_dir(args.out)
    for name, fields in CURVES.items():
        header, rows = ["grid_value"], []
        for f in fields:
            header += [f + "_lo", f + "_hi"] if f.endswith("_ci") else [f]
        for v in keys:
            row = [float(v)]
            for f in fields:
                row += aggs[v][f] if f.endswith("_ci") else [aggs[v][f]]
            rows.append(row)
        _write_csv(out / f"{name}.csv", header, rows, config_hash)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="etdlab", description="Emphatic TD(lambda) laboratory.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="exact analysis of a model")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="output directory (stdout when omitted)")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("run", help="one seeded trajectory")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default=".")
    r.add_argument("--thin", type=int)
    r.add_argument("--run-index", type=int, default=0)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("ensemble", help="seeded ensemble with aggregate statistics")
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", default=".")
    e.add_argument("--thin", type=int)
    e.add_argument("--runs", type=int)
    e.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: $ETDLAB_JOBS or 1)")
    e.set_defaults(func=cmd_ensemble)

    rp = sub.add_parser("report", help="plot-ready CSV curves from ensemble outputs")
    rp.add_argument("dirs", nargs="+")
    rp.add_argument("--out", default=".")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigParse as exc:
        print(f"etdlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MODEL_ERRORS as exc:
        print(f"etdlab: invalid model: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (OSError, MissingRuns) as exc:
        print(f"etdlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
