"""Command-line entry point: ``agecomp <command> --config FILE [--out DIR]``.

Exit status is 0 on success, 1 when a verification or check fails, 2 for
configuration errors and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from . import config as cfgmod
from .classify import analyze, membership, predict
from .equilibria import EquilibriumSet, disease_free, endemic_point, write_point_csv
from .lyapunov import LyapunovProbe, finite_difference, monitor
from .oracle import NotReducibleError, compare, integrate, reduce
from .solver import SolverError, simulate

log = logging.getLogger("agecomp")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def fmt(v: float) -> str:
    return f"{v:.17g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _json(path: Path, payload) -> None:
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, float)):
            f = float(o)
            return f if math.isfinite(f) else str(f)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return o

    path.write_text(json.dumps(clean(payload), indent=2, sort_keys=True) + "\n")


def _apply_overrides(raw: dict, args) -> None:
    tol = raw.setdefault("analysis", {}).setdefault("tolerances", {})
    for key in (*cfgmod.TOLERANCE_KEYS, "membership"):
        val = getattr(args, f"tol_{key}", None)
        if val is not None:
            tol[key] = val


def _load(args) -> cfgmod.ExperimentConfig:
    raw, text = cfgmod.load_text(args.config)
    _apply_overrides(raw, args)
    return cfgmod.resolve(raw, text, str(args.config), Path(args.config).parent)


def _out(args) -> Path | None:
    if args.out is None:
        return None
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- run pipeline shared by simulate, classify and sweep -----------------------

def run_experiment(cfg: cfgmod.ExperimentConfig, out: Path | None,
                   classify: bool | None = None, oracle: bool | None = None) -> dict:
    """Simulate one resolved config, write its files, return the summary.

    ``classify`` and ``oracle`` override the config switches without touching
    the resolved config that gets written out.
    """
    p, grid, init, run, an = cfg.params, cfg.grid, cfg.init, cfg.run, cfg.analysis
    classify = an["classify"] if classify is None else classify
    oracle = an["oracle"] if oracle is None else oracle
    derived = p.derive(grid)
    bs = cfgmod.analysis_blocks(p, an)
    tol = an["tolerances"]
    every = int(run["record_every"])
    common = dict(record_every=every, monitor_every=every,
                  snapshot_times=run["snapshot_times"], engine=run["engine"])
    summary: dict = {"r0": p.r0_values(), "blocks": [[j + 1 for j in g] for g in bs.groups],
                     "n_supercritical_blocks": bs.n_gt}
    analysis = None
    if classify:
        analysis = analyze(p, init, grid, float(run["horizon"]), bs, derived,
                           cfg.tolerances(), tol.get("membership"), **common)
        traj, probe = analysis.trajectory, analysis.probe
        summary["prediction"] = {
            "target": None if analysis.prediction.target is None
            else analysis.prediction.target.label(),
            "clause": analysis.prediction.clause, "rationale": analysis.prediction.rationale}
        summary["membership"] = list(analysis.membership.flags)
        summary["verification"] = analysis.report.to_dict()
    else:
        k = an.get("block")
        if k is None:
            pred = predict(p, bs, membership(init, p, grid, tol.get("membership")))
            if pred.target is not None and pred.target.kind == "block":
                k = pred.target.block
        probe = LyapunovProbe(p, derived, bs, k) if an["lyapunov"] else None
        traj = simulate(p, init, grid, float(run["horizon"]), derived,
                        monitors={"lyapunov": probe} if probe else None, **common)

    header = ["t", "S"] + [f"mass_{j + 1}" for j in range(p.n)] + [f"F_{j + 1}" for j in range(p.n)]
    cols = [traj.times, traj.s, *traj.mass, *traj.force]
    if an["lyapunov"] and probe is not None:
        header += ["L0", "dL0_analytic"]
        cols += [probe.l0(traj.series), probe.l0_dt(traj.series)]
        alpha = _lk_weights(an, analysis, probe, p.n)
        if alpha is not None:
            header += ["Lk", "dL_analytic"]
            cols += [probe.lk(traj.series, alpha), probe.lk_dt(traj.series, alpha)]
            summary["lyapunov_weights"] = list(alpha)
            summary["lyapunov_block"] = probe.k
    summary.update(
        final={"t": traj.final.t, "S": traj.final.s,
               "mass": traj.final.masses(grid.da).tolist()},
        norm_final=traj.final.norm(grid.da), norm_max=float(traj.norms().max()),
        discarded_tail_mass=traj.discarded.tolist(),
        grid={"da": grid.da, "steps": grid.steps, "a_max": grid.a_max},
        config=cfg.raw,
    )
    if oracle:
        summary["oracle"] = _oracle(cfg, traj)

    if out is not None:
        _write_csv(out / "trajectory.csv", header, zip(*cols))
        if probe is not None and traj.series:
            keys = sorted(traj.series)
            _write_csv(out / "lyapunov_series.csv", ["t"] + keys,
                       zip(traj.series_times, *(traj.series[k] for k in keys)))
        if traj.snapshots:
            snap = out / "snapshots"
            snap.mkdir(exist_ok=True)
            for t, x in sorted(traj.snapshots.items()):
                _write_csv(snap / f"t_{t:.6g}.csv", ["a"] + [f"x_{j + 1}" for j in range(p.n)],
                           zip(grid.mids, *x))
        (out / "config.resolved.toml").write_text(cfg.to_toml())
        _json(out / "summary.json", summary)
    summary["_analysis"] = analysis
    return summary


def _lk_weights(an, analysis, probe, n):
    if not probe.watched:
        return None
    if "alpha" in an:
        return [float(a) for a in an["alpha"]]
    if analysis is not None and analysis.report.alpha_hat:
        return list(analysis.report.alpha_hat)
    w = np.zeros(n)
    w[list(probe.watched)] = 1.0 / len(probe.watched)
    return w.tolist()


def _oracle(cfg, traj) -> dict:
    try:
        system = reduce(cfg.params)
    except NotReducibleError as exc:
        return {"skipped": str(exc)}
    h = 1e-4 * max(1.0, 1.0 / system.mu0)
    masses = cfg.init.masses(cfg.grid.da)
    ref = integrate(system, cfg.init.s, masses, traj.times[-1], h=h,
                    sample_every=max(1, int(round(cfg.grid.dt / h))))
    err = compare(traj.times, traj.s, traj.mass, ref)
    lim = cfg.analysis["tolerances"]["oracle"]
    return {"errors": err, "tolerance": lim, "ok": max(err.values()) <= lim}


# -- commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out(args)
    summary = run_experiment(cfg, out, classify=False)
    f = summary["final"]
    print(f"t={fmt(f['t'])} S={fmt(f['S'])} " + " ".join(
        f"mass_{j + 1}={fmt(m)}" for j, m in enumerate(f["mass"])))
    if out is not None:
        print(f"wrote {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg, _out(args), classify=True)
    a = summary["_analysis"]
    print(f"prediction: {summary['prediction']['target']} ({a.prediction.clause}: "
          f"{a.prediction.rationale})")
    print(a.report.to_text())
    return EXIT_OK if a.report.ok else EXIT_FAIL


def cmd_equilibria(args) -> int:
    cfg = _load(args)
    p, grid = cfg.params, cfg.grid
    derived = p.derive(grid)
    bs = cfgmod.analysis_blocks(p, cfg.analysis)
    out = _out(args)
    e0 = disease_free(p, grid)
    print(f"E0: S*={fmt(e0.s_star)}")
    if out is not None:
        write_point_csv(out / "E0.csv", e0, grid)
    for k in range(1, bs.n_gt + 1):
        group = bs.groups[k - 1]
        if args.alpha is not None and args.block == k:
            alpha = [float(v) for v in args.alpha.split(",")]
        else:
            alpha = np.zeros(p.n)
            alpha[list(group)] = 1.0 / len(group)
        pt = endemic_point(p, derived, bs, k, alpha)
        masses = pt.densities.sum(axis=1) * grid.da
        label = EquilibriumSet("block", k, tuple(group)).label()
        print(f"{label}: S*={fmt(pt.s_star)} alpha=[{', '.join(fmt(a) for a in alpha)}] "
              f"masses=[{', '.join(fmt(m) for m in masses)}]")
        if out is not None:
            write_point_csv(out / f"E{k}.csv", pt, grid)
    return EXIT_OK


def _read_series(path: Path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, data = rows[0], np.array(rows[1:], dtype=float)
    return data[:, 0], {k: data[:, i] for i, k in enumerate(head) if i > 0}


def cmd_lyapunov(args) -> int:
    run_dir = Path(args.run)
    series_file = run_dir / "lyapunov_series.csv"
    if not series_file.exists():
        print(f"{series_file} not found; rerun simulate with analysis.lyapunov = true",
              file=sys.stderr)
        return EXIT_CONFIG
    cfg = cfgmod.load(run_dir / "config.resolved.toml")
    p, grid = cfg.params, cfg.grid
    derived = p.derive(grid)
    bs = cfgmod.analysis_blocks(p, cfg.analysis)
    times, series = _read_series(series_file)
    summary = json.loads((run_dir / "summary.json").read_text())
    k = summary.get("lyapunov_block")
    probe = LyapunovProbe(p, derived, bs, k)
    tol = cfg.analysis["tolerances"]["lyapunov"]
    rows = {"L0": (probe.l0(series), probe.l0_dt(series))}
    if k is not None:
        alpha = ([float(v) for v in args.alpha.split(",")] if args.alpha
                 else summary["lyapunov_weights"])
        rows[f"L{k}"] = (probe.lk(series, alpha), probe.lk_dt(series, alpha))
    matched = f"L{k}" if k is not None else "L0"
    ok = True
    for name, (vals, dl) in rows.items():
        finite = np.flatnonzero(~np.isfinite(vals))
        start = int(finite[-1]) + 1 if finite.size else 0
        if start >= vals.size - 1:
            print(f"{name}: never finite")
            ok = ok and name != matched
            continue
        rep = monitor(times[start:], vals[start:], tol * max(1.0, abs(vals[start])))
        _, fd = finite_difference(times[start:], vals[start:])
        mid = 0.5 * (dl[start + 1:] + dl[start:-1])
        rel = float(np.max(np.abs(fd - mid) / (np.abs(mid) + 1)))
        print(f"{name}: from t={fmt(times[start])} max_increment={rep.max_increment:.3g} "
              f"first_violation={rep.first_violation} total_decrease={rep.total_decrease:.6g} "
              f"derivative_rel_error={rel:.3g}" + ("  [checked]" if name == matched else ""))
        if name == matched:
            ok = rep.ok
    return EXIT_OK if ok else EXIT_FAIL


def cmd_oracle_check(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg, _out(args), classify=False, oracle=True)
    res = summary["oracle"]
    if "skipped" in res:
        print(f"not reducible: {res['skipped']}", file=sys.stderr)
        return EXIT_CONFIG
    for key, v in res["errors"].items():
        print(f"{key}: sup error {v:.6g}")
    print(f"tolerance {res['tolerance']:g}: {'pass' if res['ok'] else 'fail'}")
    return EXIT_OK if res["ok"] else EXIT_FAIL


# -- sweeps -----------------------------------------------------------------------

def expand_axes(axes: list[dict]) -> list[tuple[tuple[str, object], ...]]:
    """Cartesian product of axis values, duplicates dropped with a warning."""
    cleaned = []
    for ax in axes:
        seen, vals = set(), []
        for v in ax["values"]:
            key = json.dumps(v, sort_keys=True)
            if key in seen:
                log.warning("axis %s: duplicate value %r dropped", ax["path"], v)
                continue
            seen.add(key)
            vals.append(v)
        cleaned.append([(ax["path"], v) for v in vals])
    return list(itertools.product(*cleaned))


def _sweep_one(job) -> dict:
    idx, base, point, out_dir, source = job
    raw = json.loads(base)
    for path, value in point:
        cfgmod.set_path(raw, path, value)
    run_dir = Path(out_dir) / f"run_{idx:04d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    row = {"run": idx, "dir": run_dir.name, **{path: v for path, v in point}}
    try:
        cfg = cfgmod.resolve(raw, "", f"{source} (run {idx})", Path(source).parent)
        s = run_experiment(cfg, run_dir, classify=True)
        a = s["_analysis"]
        row.update(r0=s["r0"], target=s["prediction"]["target"], verified=a.report.ok,
                   distance=a.report.distance, alpha_hat=list(a.report.alpha_hat), error="")
    except (cfgmod.ConfigError, SolverError, ValueError) as exc:
        row.update(r0=[], target="", verified=False, distance=math.nan, alpha_hat=[],
                   error=str(exc))
    return row


def cmd_sweep(args) -> int:
    plan, _ = cfgmod.load_text(args.config)
    if "base" not in plan:
        raise cfgmod.ConfigError("sweep file needs a 'base' (path or table)", None, args.config)
    base = plan["base"]
    if isinstance(base, str):
        base, _ = cfgmod.load_text(Path(args.config).parent / base)
    _apply_overrides(base, args)
    points = expand_axes(plan.get("axes", []))
    out = _out(args) or Path("sweep_out")
    out.mkdir(parents=True, exist_ok=True)
    src = str(Path(args.config))
    jobs = [(i, json.dumps(base), pt, str(out), src) for i, pt in enumerate(points)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    rows.sort(key=lambda r: r["run"])
    paths = [ax["path"] for ax in plan.get("axes", [])]
    n = max((len(r["r0"]) for r in rows), default=0)
    header = (["run", "dir"] + paths + [f"R0_{j + 1}" for j in range(n)]
              + ["target", "verified", "distance"] + [f"alpha_{j + 1}" for j in range(n)]
              + ["error"])
    table = []
    for r in rows:
        pad = lambda v: list(v) + [""] * (n - len(v))  # noqa: E731
        table.append([r["run"], r["dir"]] + [json.dumps(r[p]) for p in paths] + pad(r["r0"])
                     + [r["target"], r["verified"], r["distance"]] + pad(r["alpha_hat"])
                     + [r["error"]])
    _write_csv(out / "results.csv", header, table)
    _json(out / "manifest.json", {"runs": [r["dir"] for r in rows], "plan": plan,
                                  "results": "results.csv"})
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} runs, {failed} failed, results in {out / 'results.csv'}")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agecomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True, out=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", required=True, help="experiment TOML file")
        if out:
            sp.add_argument("--out", help="output directory")
        for key in (*cfgmod.TOLERANCE_KEYS, "membership"):
            sp.add_argument(f"--tol-{key.replace('_', '-')}", dest=f"tol_{key}", type=float,
                            help=f"override analysis.tolerances.{key}")
        sp.set_defaults(func=fn)
        return sp

    add("simulate", cmd_simulate, "run the solver and write trajectory files")
    add("classify", cmd_classify, "predict the attracting set and verify it by simulation")
    eq = add("equilibria", cmd_equilibria, "print the disease-free and endemic points")
    eq.add_argument("--block", type=int, default=1, help="block for --alpha")
    eq.add_argument("--alpha", help="comma-separated weights, one per strain")
    ly = add("lyapunov", cmd_lyapunov, "evaluate Lyapunov functionals of a finished run",
             config=False, out=False)
    ly.add_argument("--run", required=True, help="output directory of a simulate run")
    ly.add_argument("--alpha", help="comma-separated weights for Lk")
    add("oracle-check", cmd_oracle_check, "compare against the reduced ODE")
    sw = add("sweep", cmd_sweep, "run a parameter sweep")
    sw.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        out = Path(getattr(args, "out", None) or ".")
        out.mkdir(parents=True, exist_ok=True)
        dump = out / "failure.npz"
        exc.dump(dump)
        print(f"numerical failure: {exc}; state dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
