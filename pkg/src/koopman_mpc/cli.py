"""Command-line entry point: ``koopman-mpc <subcommand> [options]``.

Exit codes: 0 success, 1 failed check, 2 usage error, 3 missing file,
4 malformed configuration, 5 dimension or dictionary mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .edmd import (
    DictionaryMismatchError, ModelFormatError, SnapshotAccumulator, coupling_report,
    load_model, rmse_table, save_model, solve_model,
)
from .qp import kkt_residuals, random_qp_instances, solve_qp

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_MISMATCH = 5

RMSE_ROWS = ("X", "Y", "v", "theta", "X2", "Y2")

log = logging.getLogger("koopman_mpc")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _load_test_set(data: Path):
    with np.load(_require(data / "test.npz"), allow_pickle=False) as f:
        return f["states"].copy(), f["inputs"].copy()


def _scenario(args) -> harness.ScenarioConfig:
    sc = harness.load_scenario(_require(args.config)) if args.config else harness.ScenarioConfig()
    if args.controller:
        sc.controller = args.controller
    if args.horizon is not None:
        sc.mpc = harness.MpcConfig.from_dict({**sc.mpc.to_dict(), "N_h": args.horizon})
    return harness.ScenarioConfig.from_dict(sc.to_dict())


def _bilinear_model(args):
    if args.model:
        m = load_model(_require(args.model))
        if m.kind != "bilinear":
            raise ModelFormatError(f"{args.model}: BK-MPC needs a bilinear model, got {m.kind}")
        return m
    log.info("training a bilinear model on %d trajectories (seed %d)", args.n_traj, args.seed)
    return harness.train_models(args.n_traj, seed=args.seed, lam=args.lam)["bilinear"]


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    ds = harness.generate_dataset(args.n_traj + args.n_test, args.steps, args.seed,
                                  n_test=args.n_test)
    ds.accumulator.save(out / "accumulator.npz")
    np.savez(out / "test.npz", states=ds.test_states, inputs=ds.test_inputs)
    print(f"{ds.accumulator.count} snapshot pairs -> {out / 'accumulator.npz'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    out = _out_dir(args)
    acc = SnapshotAccumulator.load(_require(Path(args.data) / "accumulator.npz"))
    kinds = ("linear", "bilinear") if args.kind is None else (args.kind,)
    for kind in kinds:
        src = acc.to_linear() if kind == "linear" else acc
        if src.kind != kind:
            raise ModelFormatError(f"accumulator holds {acc.kind} regressors, cannot fit {kind}")
        path = out / f"model_{kind}.json"
        save_model(solve_model(src, args.lam), path)
        print(f"{kind} model -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    states, inputs = _load_test_set(Path(args.data))
    models = Path(args.models or args.data)
    tables = {k: rmse_table(load_model(_require(models / f"model_{k}.json")), states, inputs)
              for k in ("linear", "bilinear")}
    path = out / "rmse.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["observable", "linear", "bilinear"])
        for name in RMSE_ROWS:
            w.writerow([name, repr(tables["linear"][name]), repr(tables["bilinear"][name])])
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    out = _out_dir(args)
    model = load_model(_require(args.model))
    if model.kind != "bilinear":
        raise ModelFormatError("coupling inspection needs a bilinear model")
    rows = coupling_report(model)
    cols = ["coefficient", "matrix", "row", "column", "group_size", "learned", "taylor", "rel_error"]
    path = out / "couplings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    out = _out_dir(args)
    sc = _scenario(args)
    model = _bilinear_model(args) if sc.controller == "bkmpc" else None
    lg = harness.run_closed_loop(sc, model)
    lg.to_csv(out / "log.csv")
    m = lg.metrics()
    harness.write_metrics(m, out / "metrics.json")
    harness.save_scenario(sc, out / "scenario.json")
    print(json.dumps(m.to_dict()))
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    out = _out_dir(args)
    kinds = (args.controller,) if args.controller else harness.CONTROLLERS
    mpc = harness.MpcConfig() if args.horizon is None else harness.MpcConfig(N_h=args.horizon)
    model = _bilinear_model(args) if "bkmpc" in kinds else None
    res = harness.monte_carlo(args.scenarios, args.seed, kinds, model, mpc=mpc)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    for kind, logs in res.logs.items():
        for i, lg in enumerate(logs):
            lg.to_csv(runs / f"{kind}_{i:03d}.csv")
            harness.write_metrics(lg.metrics(), runs / f"{kind}_{i:03d}.json")
    (out / "metrics.json").write_text(json.dumps(res.summary(), indent=2))
    print(json.dumps(res.metrics, indent=2))
    return EXIT_OK


def cmd_qp_selftest(args) -> int:
    out = _out_dir(args)
    cases = random_qp_instances(args.count, args.seed)
    path = out / "qp_selftest.csv"
    matches = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "n", "m", "oracle_objective", "solver_objective", "abs_error",
                    "iterations", "status", "primal_residual", "dual_residual",
                    "complementarity", "match"])
        for i, (p, ref) in enumerate(cases):
            sol = solve_qp(p)
            res = kkt_residuals(p, sol.x, sol.y)
            err = abs(sol.objective - ref[1])
            ok = sol.status == "optimal" and err <= 1e-6 and max(res) <= 1e-6
            matches += ok
            w.writerow([i, p.n, p.m, repr(ref[1]), repr(sol.objective), repr(err),
                        sol.iterations, sol.status, *map(repr, res), int(ok)])
    print(f"{matches}/{len(cases)} oracle matches -> {path}")
    return EXIT_OK if matches == len(cases) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="koopman-mpc",
                                 description="Bilinear Koopman MPC pipeline for a unicycle robot.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out="out"):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out, help="output directory")
        return p

    p = common(sub.add_parser("gen-data", help="simulate training data into an accumulator"))
    p.add_argument("--n-traj", type=int, default=5000, help="training trajectories")
    p.add_argument("--n-test", type=int, default=500, help="held-out trajectories")
    p.add_argument("--steps", type=int, default=40)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("fit", help="solve for linear and/or bilinear models"))
    p.add_argument("--data", default="out", help="directory holding accumulator.npz")
    p.add_argument("--kind", choices=("linear", "bilinear"))
    p.add_argument("--lambda", dest="lam", type=float, default=1e-9)
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("eval", help="open-loop RMSE table on the held-out set"))
    p.add_argument("--data", default="out", help="directory holding test.npz")
    p.add_argument("--models", help="directory holding model_*.json (default: --data)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("inspect", help="coupling coefficients against Taylor values"))
    p.add_argument("--model", default="out/model_bilinear.json")
    p.set_defaults(func=cmd_inspect)

    for name, fn, helptext in (("run", cmd_run, "closed-loop scenario"),
                               ("montecarlo", cmd_montecarlo, "randomized controller comparison")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--controller", choices=harness.CONTROLLERS)
        p.add_argument("--horizon", type=int)
        p.add_argument("--model", help="bilinear model JSON (trained on the fly if omitted)")
        p.add_argument("--n-traj", type=int, default=5000, help="training size when no --model")
        p.add_argument("--lambda", dest="lam", type=float, default=1e-9)
        if name == "run":
            p.add_argument("--config", help="scenario JSON")
        else:
            p.add_argument("--scenarios", type=int, default=10)
        p.set_defaults(func=fn)

    p = common(sub.add_parser("qp-selftest", help="QP solver against the enumeration oracle"))
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_qp_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DictionaryMismatchError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except harness.ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
