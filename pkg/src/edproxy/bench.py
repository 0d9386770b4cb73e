"""Metrics, benchmark orchestration, and table emission.

Accuracy metrics follow the reporting conventions of the dispatch-proxy
literature: optimality gaps are relative to the reference optimum with the
prediction's objective penalized for hard-constraint violations, and
aggregates are shifted geometric means (shift 1% for gaps, 1 p.u. for
violations).  Timings are medians of repeated calls on a monotonic clock
after warmup.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from . import _kernels
from .core import EDInstance, check_feasibility, penalized_objective, solve_reference, FEAS_TOL
from .datagen import reserve_capacity
from .projection import project_feasible_edr, project_hypersimplex
from .repair import RepairContext, power_balance_repair, reserve_repair
from .training import CaseBundle, Splits, instance_from_arrays, predict_eval
from .network import TrainedProxy

logger = logging.getLogger(__name__)

GAP_SHIFT = 0.01     # shift for optimality gaps (1%)
VIOL_SHIFT = 1.0     # shift for constraint violations (1 p.u.)

TIMING_WARMUP = 10
TIMING_REPS = 100


@dataclass
class EvalRecord:
    instance_id: int
    arch: str
    loss_kind: str
    gap: float
    feasible: bool
    violations: dict[str, float] = field(default_factory=dict)
    inference_time: float | None = None   # seconds per instance, batch-amortized
    repair_time: float | None = None
    projection_time: float | None = None


def optimality_gap(z_hat: float, z_star: float) -> float:
    if z_star == 0.0:
        raise ValueError("reference objective is zero; gap undefined "
                         "(report the absolute difference instead)")
    return (z_hat - z_star) / abs(z_star)


def shifted_geometric_mean(values, shift: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty value list")
    shifted = values + shift
    if (shifted <= 0.0).any():
        raise ValueError(f"values must exceed -shift ({-shift})")
    return float(np.exp(np.log(shifted).mean()) - shift)


def feasibility_rate(records: list[EvalRecord]) -> tuple[float, float | None]:
    """(% feasible, shifted geometric mean of max violation over infeasible)."""
    if not records:
        raise ValueError("no records")
    flags = np.array([r.feasible for r in records])
    pct = 100.0 * flags.mean()
    infeasible = [max(r.violations.values()) for r in records if not r.feasible]
    mean_viol = shifted_geometric_mean(infeasible, VIOL_SHIFT) if infeasible else None
    return pct, mean_viol


def median_time(fn, reps: int = TIMING_REPS, warmup: int = TIMING_WARMUP) -> float:
    for _ in range(warmup):
        fn()
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - t0
    return float(np.median(times))


# ---------------------------------------------------------------------------
# model evaluation over a test split
# ---------------------------------------------------------------------------


def evaluate_model(proxy: TrainedProxy, bundle: CaseBundle, split: Splits,
                   z_star: np.ndarray, batch_size: int = 256,
                   time_batches: bool = True) -> list[EvalRecord]:
    records = []
    amortized = None
    if time_batches and split.n > 0:
        sl = slice(0, min(batch_size, split.n))
        t = median_time(lambda: predict_eval(proxy, bundle, split.dmat[sl], split.rvec[sl]))
        amortized = t / (sl.stop - sl.start)
    for lo in range(0, split.n, batch_size):
        sl = slice(lo, min(lo + batch_size, split.n))
        pred = predict_eval(proxy, bundle, split.dmat[sl], split.rvec[sl])
        for k in range(sl.stop - sl.start):
            i = lo + k
            inst = instance_from_arrays(bundle, split.dmat[i], float(split.rvec[i]))
            z_hat = penalized_objective(inst, pred[k])
            report = check_feasibility(inst, pred[k], tol=FEAS_TOL)
            records.append(EvalRecord(
                instance_id=i, arch=proxy.arch, loss_kind=proxy.meta.get("loss", "?"),
                gap=optimality_gap(z_hat, float(z_star[i])),
                feasible=report.feasible, violations=report.violations,
                inference_time=amortized))
    return records


def reference_objectives(bundle: CaseBundle, split: Splits) -> np.ndarray:
    """Reference optima for a split; uses stored labels when present."""
    z = np.empty(split.n)
    for i in range(split.n):
        inst = instance_from_arrays(bundle, split.dmat[i], float(split.rvec[i]))
        if split.labels is not None:
            z[i] = penalized_objective(inst, split.labels[i])
        else:
            sol = solve_reference(inst)
            if sol.status != "optimal":
                raise RuntimeError(f"reference solve failed on instance {i}: {sol.status}")
            z[i] = sol.objective
    return z


# ---------------------------------------------------------------------------
# repair-vs-projection timing benchmark
# ---------------------------------------------------------------------------


def synthetic_context(n: int, seed: int = 0, load_level: float = 0.6):
    rng = np.random.default_rng(seed)
    p_max = rng.uniform(0.5, 1.5, n)
    r_max = reserve_capacity(p_max)
    p = rng.uniform(0.0, 1.0, n) * p_max
    d_tot = load_level * float(p_max.sum())
    r_req = 1.5 * float(p_max.max())
    return p, RepairContext(p_max=p_max, r_max=r_max, demand_total=d_tot,
                            reserve_req=r_req)


def bench_repair(n: int = 1000, mode: str = "ed", reps: int = TIMING_REPS,
                 seed: int = 0, ctx: RepairContext | None = None,
                 p: np.ndarray | None = None) -> dict:
    """Median times for the repair layers vs. the exact Euclidean projection."""
    if ctx is None or p is None:
        p, ctx = synthetic_context(n, seed)
    d_tot = ctx.demand_total

    if mode == "ed":
        def run_repair():
            power_balance_repair(p, ctx)

        def run_projection():
            project_hypersimplex(p, ctx.p_max, d_tot)
    elif mode == "edr":
        inst = EDInstance(case_ref="bench", d=np.array([d_tot]), reserve_req=ctx.reserve_req,
                          p_max=ctx.p_max, r_max=ctx.r_max, c=np.zeros(ctx.p_max.size))

        def run_repair():
            q, _ = power_balance_repair(p, ctx)
            reserve_repair(q, ctx)

        def run_projection():
            project_feasible_edr(p, inst)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    t_repair = median_time(run_repair, reps)
    t_proj = median_time(run_projection, reps)
    return {"mode": mode, "n": n, "backend": _kernels.BACKEND,
            "repair_us": t_repair * 1e6, "projection_us": t_proj * 1e6,
            "speedup": t_proj / t_repair}


def bench_kernel_backends(n: int = 1000, reps: int = TIMING_REPS, seed: int = 0) -> list[dict]:
    """Compare the numba and numpy kernel paths on the repair forward passes."""
    p, ctx = synthetic_context(n, seed)
    dvec = np.array([ctx.demand_total])
    rvec = np.array([ctx.reserve_req])
    p2 = p[None, :]
    rows = []
    backends = [("numpy", _kernels._np_pb_forward, _kernels._np_rr_forward)]
    if _kernels.HAS_NUMBA:
        backends.append(("numba", _kernels._nb_pb_forward_batch, _kernels._nb_rr_forward_batch))
    for name, pb, rr in backends:
        t_pb = median_time(lambda: pb(p2, ctx.p_max, dvec), reps)
        balanced, _, _ = pb(p2, ctx.p_max, dvec)
        t_rr = median_time(lambda: rr(balanced, ctx.p_max, ctx.r_max, rvec), reps)
        rows.append({"backend": name, "n": n,
                     "balance_repair_us": t_pb * 1e6, "reserve_repair_us": t_rr * 1e6})
    return rows


# ---------------------------------------------------------------------------
# table emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_table(headers: list[str], rows: list[list], basename: str, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, basename + ".csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(headers) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    md_path = os.path.join(out_dir, basename + ".md")
    with open(md_path, "w") as fh:
        fh.write("| " + " | ".join(headers) + " |\n")
        fh.write("|" + "|".join("---" for _ in headers) + "|\n")
        for row in rows:
            fh.write("| " + " | ".join(_fmt(v) for v in row) + " |\n")
    return csv_path, md_path


def tables_from_records(records: list[EvalRecord]) -> dict[str, tuple[list[str], list[list]]]:
    """Derive the gap / feasibility / timing tables from evaluation records."""
    groups: dict[tuple[str, str], list[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.arch, r.loss_kind), []).append(r)

    gap_rows, feas_rows, time_rows = [], [], []
    for (arch, loss), recs in sorted(groups.items()):
        gaps = [r.gap for r in recs]
        gap_rows.append([arch, loss, 100.0 * shifted_geometric_mean(gaps, GAP_SHIFT),
                         100.0 * float(np.mean(gaps)), len(recs)])
        pct, viol = feasibility_rate(recs)
        feas_rows.append([arch, loss, pct, viol if viol is not None else ""])
        inf = [r.inference_time for r in recs if r.inference_time is not None]
        time_rows.append([arch, loss,
                          1e3 * 256 * float(np.mean(inf)) if inf else "",
                          1e6 * float(np.mean(inf)) if inf else ""])
    return {
        "gaps": (["arch", "loss", "gap_shifted_geomean_pct", "gap_arith_mean_pct", "n"],
                 gap_rows),
        "feasibility": (["arch", "loss", "feasible_pct", "mean_violation_geomean_pu"],
                        feas_rows),
        "timing": (["arch", "loss", "inference_ms_per_256", "inference_us_per_instance"],
                   time_rows),
    }


def save_records(records: list[EvalRecord], path: str):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def load_records(path: str) -> list[EvalRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            records.append(EvalRecord(**json.loads(line)))
    return records


def run_benchmark(bundle: CaseBundle, test_split: Splits, models: list[TrainedProxy],
                  out_dir: str, batch_size: int = 256, solve_timing_samples: int = 10,
                  time_batches: bool = True) -> dict:
    """Evaluate models over the test split and emit all tables."""
    os.makedirs(out_dir, exist_ok=True)
    z_star = reference_objectives(bundle, test_split)
    records: list[EvalRecord] = []
    for proxy in models:
        records.extend(evaluate_model(proxy, bundle, test_split, z_star,
                                      batch_size, time_batches))
    save_records(records, os.path.join(out_dir, "records.jsonl"))
    tables = tables_from_records(records)

    # per-instance reference solve time over a small sample
    k = min(solve_timing_samples, test_split.n)
    solve_times = []
    for i in range(k):
        inst = instance_from_arrays(bundle, test_split.dmat[i], float(test_split.rvec[i]))
        t0 = time.perf_counter()
        solve_reference(inst)
        solve_times.append(time.perf_counter() - t0)
    tables["solver"] = (["solver", "median_ms_per_instance", "samples"],
                        [["reference_lp", 1e3 * float(np.median(solve_times)), k]])

    paths = {}
    for name, (headers, rows) in tables.items():
        paths[name] = write_table(headers, rows, name, out_dir)
    logger.info("benchmark tables written to %s", out_dir)
    return {"records": len(records), "tables": {k: v[0] for k, v in paths.items()}}
