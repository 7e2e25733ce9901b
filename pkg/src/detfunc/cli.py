"""
Command-line entry point.

Subcommands::

    detfunc simulate   --scenario s.toml   trajectory CSV, snapshots, manifest
    detfunc defect     --scenario s.toml   completeness defect table
    detfunc conditions --scenario s.toml   closed-form sufficient conditions
    detfunc verify     --scenario s.toml   same-noise pair ensemble audit
    detfunc sweep      --scenario s.toml   conditions over a parameter list
    detfunc report     --out <dir>         tidy long-format CSV of all tables

Exit codes: 0 success, 1 verification found a violation, 2 configuration
error, 3 condition gate failed, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .conditions import ConditionReport, constants_from_model, estimate_c_E, main_condition
from .config import Scenario, initial_field, load_scenario, scenario_from_dict
from .functionals import FunctionalSet, SpacePair, c_delta_L, completeness_defect, defect_constant
from .io import read_csv, write_csv, write_manifest, write_ndjson, write_snapshot
from .noise import NoisePath
from .rds import NumericalFailure, conjugate, integrate_transformed, radius_path
from .spectral import ConfigurationError
from .verifier import check_gronwall, convergence_in_probability, pair_ensemble

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_GATE = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("detfunc")


# ---------------------------------------------------------------------------
# shared evaluation
# ---------------------------------------------------------------------------


def _family(sc: Scenario) -> FunctionalSet:
    return sc.functionals if sc.functionals is not None else FunctionalSet.empty(sc.grid)


def evaluate_conditions(sc: Scenario) -> tuple[ConditionReport, dict]:
    """Completeness defect, embedding constant and the condition report of a scenario."""
    L = _family(sc)
    defect = completeness_defect(L, SpacePair.VH(), sc.truncation)
    if "c_E" in sc.constants:
        c_E = float(sc.constants["c_E"])
    else:
        c_E = estimate_c_E(sc.grid).value
    k = constants_from_model(sc.nu, sc.kappa, sc.params.f_vdual_sq, sc.cov, defect.eps, c_E,
                             float(sc.constants["a0"]), float(sc.constants["a1"]),
                             float(sc.run["m_window"]))
    return main_condition(k), {"eps_L": defect.eps, "c_L": defect.c_L, "c_E": c_E, "k": len(L)}


def _out_dir(sc: Scenario, args) -> Path:
    out = Path(args.out) if args.out else sc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _steps(t: float, dt: float, name: str) -> int:
    n = int(round(t / dt))
    if n < 1 or abs(n * dt - t) > 1e-9 * max(t, 1.0):
        raise ConfigurationError(f"field '{name}' must be a positive multiple of run.dt")
    return n


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(sc: Scenario, args) -> int:
    out = _out_dir(sc, args)
    p, run = sc.params, sc.run
    dt, t_end = float(run["dt"]), float(run["t_end"])
    n_steps = _steps(t_end, dt, "run.t_end")
    save_every = int(run.get("save_every", 10))
    snap_every = _steps(float(run.get("snapshot_every", t_end)), dt, "run.snapshot_every")
    path = NoisePath(sc.seed, sc.cov, p.ou, dt)
    traj_u = integrate_transformed(initial_field(sc), path, p, t_end, dt, save_every=1)
    traj_v = conjugate(traj_u, path)
    rad = radius_path(path, p, float(run["eps_margin"]), t_end=t_end, dt=dt)
    norms = traj_v.norm_table()
    rows = [
        {"t": traj_v.times[n], "h": norms["h"][n], "v": norms["v"][n],
         "v_dual": norms["v_dual"][n], "R2": rad.r2[n]}
        for n in range(0, n_steps + 1) if n % save_every == 0 or n == n_steps
    ]
    files = ["trajectory.csv"]
    write_csv(out / "trajectory.csv", rows, ["t", "h", "v", "v_dual", "R2"])
    (out / "snapshots").mkdir(exist_ok=True)
    for n in range(0, n_steps + 1):
        if n % snap_every == 0 or n == n_steps:
            name = f"snapshots/snapshot_{n:08d}.csv"
            write_snapshot(out / name, traj_v.field_at(n), traj_v.times[n])
            files.append(name)
    if args.verbosity >= 2:
        write_ndjson(out / "path.ndjson", (
            {"t": traj_v.times[n], "z": traj_v.z[n][sc.grid.half_index[0], sc.grid.half_index[1]]}
            for n in range(0, n_steps + 1, save_every)
        ))
        files.append("path.ndjson")
    summary = {"final_h": norms["h"][-1], "initial_h": norms["h"][0],
               "cfl_max": traj_u.cfl_max, "cfl_flag": traj_u.cfl_flag}
    digest = write_manifest(out, sc.raw, "simulate", files, summary)
    log.info("simulate: ‖u(T)‖_H = %.6g, manifest %s", norms["h"][-1], digest)
    print(digest)
    return EXIT_OK


def cmd_defect(sc: Scenario, args) -> int:
    out = _out_dir(sc, args)
    fblock = sc.raw.get("functionals", {})
    families: list[tuple[float | None, FunctionalSet]] = []
    if "cutoffs" in fblock:
        if fblock.get("kind") != "modes":
            raise ConfigurationError("field 'functionals.cutoffs' requires kind = \"modes\"")
        for cut in fblock["cutoffs"]:
            families.append((float(cut), FunctionalSet.modes(sc.grid, float(cut))))
    else:
        families.append((fblock.get("cutoff"), _family(sc)))
    delta = float(sc.run["delta"])
    rows = []
    for cut, L in families:
        rep = defect_constant(L, completeness_defect(L, sc.pair, sc.truncation).eps, sc.pair,
                              sc.truncation, rng=np.random.default_rng(sc.seed))
        row = {"cutoff": "" if cut is None else cut, **rep.csv_row(),
               "c_L_lower": rep.c_L_lower, "pair": sc.pair.kind, "s": sc.pair.s}
        row["C_deltaL"] = c_delta_L(L, rep.eps, delta, sc.truncation) if sc.pair.kind == "VH" else ""
        rows.append(row)
        log.info("defect: %s k=%d eps_L=%.10g", rep.kind, rep.k, rep.eps)
    fields = ["cutoff", "kind", "k", "eps_L", "c_L", "c_L_lower", "C_deltaL", "truncation", "pair", "s"]
    write_csv(out / "defect.csv", rows, fields)
    write_manifest(out, sc.raw, "defect", ["defect.csv"])
    for r in rows:
        print(f"{r['kind']} k={r['k']} eps_L={r['eps_L']:.10g} c_L={r['c_L']:.6g}")
    return EXIT_OK


def cmd_conditions(sc: Scenario, args) -> int:
    out = _out_dir(sc, args)
    rep, extra = evaluate_conditions(sc)
    write_csv(out / "conditions.csv", [{**rep.csv_row(), "c_L": extra["c_L"], "k": extra["k"]}])
    write_manifest(out, sc.raw, "conditions", ["conditions.csv"])
    print(rep.table())
    return EXIT_OK if rep.main_pass else EXIT_GATE


def cmd_verify(sc: Scenario, args) -> int:
    out = _out_dir(sc, args)
    run, p = sc.run, sc.params
    rep, extra = evaluate_conditions(sc)
    gate = rep.main_pass and rep.moment_pass and rep.radius_pass
    status = "within guarantee" if gate else "outside guarantee"
    cond_row = {**rep.csv_row(), "c_L": extra["c_L"], "k": extra["k"], "status": status}
    if not gate and not args.override_gate:
        write_csv(out / "conditions.csv", [cond_row])
        print(rep.table())
        print("verify: condition gate failed (use --override-gate to run anyway)", file=sys.stderr)
        return EXIT_GATE
    L = _family(sc)
    eps_L = extra["eps_L"]
    delta = float(run["delta"])
    c = sc.nu / 2.0
    C_dL = c_delta_L(L, eps_L, delta, sc.truncation) if len(L) else 0.0
    dt, horizon = float(run["dt"]), float(run["t_end"])
    n_pairs = int(run["n_pairs"])
    seeds = [sc.seed + j for j in range(n_pairs)]
    pairs = pair_ensemble(p, sc.cov, L, seeds, horizon, dt, ic_seed=int(run["ic_seed"]),
                          eps=float(run["eps_margin"]), workers=args.workers)
    audits = [check_gronwall(tr, eps_L, c, delta, C_dL) for tr in pairs]
    conv = convergence_in_probability(pairs, float(run["delta_level"]),
                                      level=float(run["exceedance_level"]))
    n_viol = sum(a.n_violations for a in audits)

    def pair_record(tr, a):
        rec = {"seed": tr.seed, "w_h0": tr.w_h[0], "w_h_final": tr.w_h[-1],
               "gronwall_violations": a.n_violations,
               "min_rhs_over_lhs": float(np.min(a.rhs[1:] / np.maximum(a.lhs[1:], 1e-300)))}
        if args.verbosity >= 2:
            rec.update({"times": tr.times, "w_h": tr.w_h, "eta": tr.eta})
        return rec

    write_ndjson(out / "pairs.ndjson", (pair_record(tr, a) for tr, a in zip(pairs, audits)))
    every = int(run.get("summary_every", 10))
    viol_t = np.sum([~a.ok for a in audits], axis=0)
    t = conv.times
    win = dict(zip(np.round(conv.window_starts, 9), conv.mean_window_eta))
    rows = [{"time": t[n], "exceedance_fraction": conv.fractions[n],
             "eta_window": win.get(round(float(t[n]), 9), ""), "gronwall_violations": int(viol_t[n])}
            for n in range(0, len(t), every)]
    write_csv(out / "summary.csv", rows,
              ["time", "exceedance_fraction", "eta_window", "gronwall_violations"])
    cond_row.update({"eps_L": eps_L, "C_deltaL": C_dL, "n_pairs": n_pairs,
                     "gronwall_violations": n_viol,
                     "sync_time": "" if conv.sync_time is None else conv.sync_time,
                     "final_exceedance": float(conv.fractions[-1]),
                     "spearman_late": conv.spearman_late, "consistent": conv.consistent})
    write_csv(out / "conditions.csv", [cond_row])
    files = ["pairs.ndjson", "summary.csv", "conditions.csv"]
    write_manifest(out, sc.raw, "verify", files,
                   {"gronwall_violations": n_viol, "sync_time": conv.sync_time, "status": status})
    print(rep.table())
    print(f"status: {status}")
    print(f"Gronwall violations: {n_viol} over {n_pairs} pairs")
    print(f"synchronisation time: {conv.sync_time}, late-half Spearman: {conv.spearman_late:.4g}")
    final_ok = conv.fractions[-1] <= conv.level
    return EXIT_OK if n_viol == 0 and final_ok else EXIT_VERIFY_FAILED


def _set_path(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigurationError(f"sweep parameter '{dotted}' does not name a scenario field")
        node = node[key]
    node[keys[-1]] = value


def _sweep_task(args: tuple) -> dict:
    raw, base_dir, param, value = args
    raw = copy.deepcopy(raw)
    _set_path(raw, param, value)
    sc = scenario_from_dict(raw, base_dir)
    rep, extra = evaluate_conditions(sc)
    return {"parameter": param, "value": value, **rep.csv_row(), "c_L": extra["c_L"]}


def cmd_sweep(sc: Scenario, args) -> int:
    out = _out_dir(sc, args)
    block = sc.raw.get("sweep")
    if not block or "parameter" not in block or "values" not in block:
        raise ConfigurationError("missing required field 'sweep.parameter' or 'sweep.values'")
    raw = {k: v for k, v in sc.raw.items() if k != "sweep"}
    tasks = [(raw, None, block["parameter"], v) for v in block["values"]]
    if args.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            rows = list(ex.map(_sweep_task, tasks))
    else:
        rows = [_sweep_task(t) for t in tasks]
    write_csv(out / "sweep.csv", rows)
    write_manifest(out, sc.raw, "sweep", ["sweep.csv"])
    for r in rows:
        print(f"{r['parameter']}={r['value']}: lhs_main={r['lhs_main']:.6g} "
              f"rhs_main={r['rhs_main']:.6g} {'PASS' if r['main_pass'] else 'FAIL'}")
    return EXIT_OK


_INDEX_COLUMNS = ("t", "time", "value", "cutoff")


def _as_number(text: str) -> float | None:
    try:
        x = float(text)
    except ValueError:
        return {"True": 1.0, "False": 0.0}.get(text)
    return x


def cmd_report(out: Path, args) -> int:
    if not out.is_dir():
        raise ConfigurationError(f"output directory {out} does not exist")
    rows = []
    for csv_path in sorted(out.glob("*.csv")):
        if csv_path.name == "report.csv":
            continue
        table = read_csv(csv_path)
        if not table:
            continue
        index = next((c for c in _INDEX_COLUMNS if c in table[0]), None)
        for n, rec in enumerate(table):
            x = rec[index] if index else n
            for key, text in rec.items():
                if key == index:
                    continue
                val = _as_number(text)
                if val is None or not math.isfinite(val) and text not in ("inf", "-inf"):
                    continue
                rows.append({"source": csv_path.stem, "x_name": index or "row", "x": x,
                             "quantity": key, "value": val})
    write_csv(out / "report.csv", rows, ["source", "x_name", "x", "quantity", "value"])
    print(f"{len(rows)} rows written to {out / 'report.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario TOML file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--override-gate", action="store_true",
                        help="run verify even when the sufficient conditions fail")
    common.add_argument("--workers", type=int, default=1, help="worker processes for ensembles")
    common.add_argument("--verbosity", type=int, default=1, choices=(0, 1, 2, 3),
                        help="0 quiet, 1 info, 2 adds per-step dumps, 3 debug")
    parser = argparse.ArgumentParser(prog="detfunc", description=__doc__.split("\n\n")[0].strip(),
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "integrate one trajectory"),
                       ("defect", "completeness defect of the functional family"),
                       ("conditions", "evaluate the closed-form sufficient conditions"),
                       ("verify", "audit a same-noise pair ensemble"),
                       ("sweep", "conditions over a list of parameter values"),
                       ("report", "tidy long-format CSV of an output directory")):
        sub.add_parser(name, help=text, parents=[common])
    return parser


_COMMANDS = {"simulate": cmd_simulate, "defect": cmd_defect, "conditions": cmd_conditions,
             "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO, 2: logging.INFO, 3: logging.DEBUG}[args.verbosity]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "report":
            if args.out:
                out = Path(args.out)
            elif args.scenario:
                out = load_scenario(args.scenario).out_dir
            else:
                raise ConfigurationError("report needs --out or --scenario")
            return cmd_report(out, args)
        if not args.scenario:
            raise ConfigurationError(f"{args.command} needs --scenario <path>")
        sc = load_scenario(args.scenario)
        return _COMMANDS[args.command](sc, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc} (last valid time {exc.last_valid_time:.6g})",
              file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
