"""Command-line interface.

Subcommands:
  snapshot      parse a MATPOWER case and write the canonical JSON snapshot
  generate      build perturbed instance datasets (train/val/test + manifest)
  solve         solve instances exactly with the reference LP solver
  repair        post-process dispatch vectors with the repair layers
  train         train a proxy (dnn | deepopf | dc3 | e2elr, sl | ssl)
  bench         evaluate trained proxies on a test split and emit tables
  bench-repair  time the repair layers against the Euclidean projection
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import datagen, grid, training
from .core import EDInstance, solve_reference
from .network import load_proxy, save_proxy
from .repair import RepairContext, feasibility_certificate, power_balance_repair, \
    recover_reserves, reserve_repair

logger = logging.getLogger("edproxy")


def _load_case(path: str, slack: int | None = None) -> grid.SystemCase:
    case = grid.load_case(path, slack=slack)
    if any(abs(g.p_min_pu) > 1e-12 for g in case.generators):
        logger.info("normalizing case: shifting generator minimums to zero")
        case, _ = grid.normalize_case(case)
    return case


def _read_instances(path: str):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_snapshot(args):
    case = grid.load_case(args.case, slack=args.slack)
    snap = grid.case_to_snapshot(case)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(snap)
        logger.info("snapshot written to %s", args.out)
    else:
        print(snap)


def cmd_generate(args):
    case = _load_case(args.case, slack=args.slack)
    split = tuple(float(x) for x in args.split.split(","))
    cfg = datagen.GenConfig(n_instances=args.n, split=split, mode=args.mode,
                            label=args.label, seed=args.seed)
    manifest = datagen.build_dataset(case, cfg, args.out)
    print(json.dumps(manifest, sort_keys=True, indent=1))


def cmd_solve(args):
    case = _load_case(args.case, slack=args.slack)
    records = _read_instances(args.instances)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for rec in records:
            inst = EDInstance.from_case(case, d=np.asarray(rec["d"], dtype=np.float64),
                                        reserve_req=float(rec.get("R", 0.0)))
            sol = solve_reference(inst, tol=args.tol)
            rec["solution"] = {"p": sol.p.tolist(), "r": sol.r.tolist(),
                               "objective": sol.objective, "status": sol.status}
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    logger.info("solved %d instances", len(records))


def cmd_repair(args):
    case = _load_case(args.case, slack=args.slack)
    instances = _read_instances(args.instances)
    dispatches = _read_instances(args.dispatch)
    if len(instances) != len(dispatches):
        raise SystemExit("instances and dispatch files differ in length")
    p_max, r_max = case.p_max(), case.r_max()
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for rec, disp in zip(instances, dispatches):
            d = np.asarray(rec["d"], dtype=np.float64)
            ctx = RepairContext(p_max=p_max, r_max=r_max, demand_total=float(d.sum()),
                                reserve_req=float(rec.get("R", 0.0)))
            p = np.asarray(disp["p"], dtype=np.float64)
            p_rep, _ = power_balance_repair(p, ctx)
            if args.mode == "balance+reserve":
                p_rep, _ = reserve_repair(p_rep, ctx)
            cert = feasibility_certificate(ctx)
            out.write(json.dumps({
                "idx": rec.get("idx"),
                "p": p_rep.tolist(),
                "r": recover_reserves(p_rep, ctx).tolist(),
                "certificate": {"feasible": cert.feasible, "witness": cert.witness},
            }, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    logger.info("repaired %d dispatch vectors", len(instances))


def _load_splits(data_dir: str):
    splits = {}
    for name in ("train", "val", "test"):
        path = os.path.join(data_dir, f"{name}.jsonl")
        if os.path.exists(path):
            dmat, rvec, labels = datagen.read_split(path)
            splits[name] = training.Splits(dmat=dmat, rvec=rvec, labels=labels)
    manifest = None
    mpath = os.path.join(data_dir, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            manifest = json.load(fh)
    return splits, manifest


def cmd_train(args):
    case = _load_case(args.case, slack=args.slack)
    splits, manifest = _load_splits(args.data)
    if "train" not in splits or "val" not in splits:
        raise SystemExit(f"{args.data} must contain train.jsonl and val.jsonl")
    reserve_mode = bool(manifest and manifest["config"]["mode"] == "edr")
    cfg = training.TrainConfig(arch=args.arch, loss_kind=args.loss, seed=args.seed,
                               reserve_mode=reserve_mode, max_epochs=args.epochs,
                               hidden=args.hidden, n_layers=args.layers,
                               lam=args.lam, dropout=args.dropout,
                               batch_size=args.batch_size,
                               max_seconds=args.max_seconds)
    bundle = training.CaseBundle.from_case(case, case_ref=os.path.basename(args.case))
    proxy, log = training.train(cfg, bundle, splits["train"], splits["val"])
    save_proxy(proxy, args.out)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.csv"
    with open(log_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,seconds\n")
        for row in log:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},"
                     f"{row['lr']!r},{row['seconds']:.3f}\n")
    logger.info("model written to %s (log: %s, %d epochs)", args.out, log_path, len(log))


def cmd_bench(args):
    case = _load_case(args.case, slack=args.slack)
    splits, _ = _load_splits(args.data)
    if "test" not in splits:
        raise SystemExit(f"{args.data} must contain test.jsonl")
    models = []
    for path in args.models.split(","):
        try:
            models.append(load_proxy(path.strip()))
        except FileNotFoundError:
            logger.warning("checkpoint %s missing; cell omitted", path)
    bundle = training.CaseBundle.from_case(case, case_ref=os.path.basename(args.case))
    summary = bench_mod.run_benchmark(bundle, splits["test"], models, args.out,
                                      batch_size=args.batch_size)
    print(json.dumps(summary, sort_keys=True, indent=1))


def cmd_bench_repair(args):
    ctx = p = None
    n = args.n
    if args.case:
        case = _load_case(args.case, slack=args.slack)
        p_max = case.p_max()
        r_max = datagen.reserve_capacity(p_max)
        rng = np.random.default_rng(args.seed)
        p = rng.uniform(0.0, 1.0, p_max.size) * p_max
        ctx = RepairContext(p_max=p_max, r_max=r_max,
                            demand_total=0.6 * float(p_max.sum()),
                            reserve_req=1.5 * float(p_max.max()))
        n = p_max.size
    modes = ("ed", "edr") if args.mode == "both" else (args.mode,)
    rows = [bench_mod.bench_repair(n=n, mode=m, reps=args.reps, seed=args.seed,
                                   ctx=ctx, p=p) for m in modes]
    headers = ["mode", "n", "backend", "repair_us", "projection_us", "speedup"]
    table = [[r[h] for h in headers] for r in rows]
    if args.compare_backends:
        for row in bench_mod.bench_kernel_backends(n=n, reps=args.reps, seed=args.seed):
            print(json.dumps(row, sort_keys=True))
    if args.out:
        bench_mod.write_table(headers, table, "repair_vs_projection", args.out)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ed", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def case_args(p):
        p.add_argument("--case", required=True, help="MATPOWER .m file or JSON snapshot")
        p.add_argument("--slack", type=int, default=None, help="override slack bus id")

    p = sub.add_parser("snapshot", help="write the canonical case snapshot")
    case_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_snapshot)

    p = sub.add_parser("generate", help="generate instance datasets")
    case_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--mode", choices=("ed", "edr"), default="ed")
    p.add_argument("--label", choices=("none", "reference"), default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("solve", help="solve instances with the reference solver")
    case_args(p)
    p.add_argument("--instances", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("repair", help="repair dispatch vectors")
    case_args(p)
    p.add_argument("--instances", required=True)
    p.add_argument("--dispatch", required=True)
    p.add_argument("--mode", choices=("balance", "balance+reserve"), default="balance")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_repair)

    p = sub.add_parser("train", help="train an optimization proxy")
    case_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=training.ARCHS, default="e2elr")
    p.add_argument("--loss", choices=("sl", "ssl"), default="ssl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-seconds", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="benchmark trained proxies")
    case_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("bench-repair", help="repair layers vs Euclidean projection")
    p.add_argument("--case", default=None)
    p.add_argument("--slack", type=int, default=None)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--mode", choices=("ed", "edr", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare-backends", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench_repair)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
