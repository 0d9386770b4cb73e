"""Perturbed instance generation for dispatch datasets.

Loads are scaled by a global factor drawn uniformly from [0.8, 1.2] times
per-load multiplicative lognormal noise with mean 1 and standard deviation
5% (moments of the lognormal itself, not of the underlying normal).  Reserve
datasets size reserve capacities so the fleet can cover five times the
largest generator, and draw each instance's requirement uniformly between
100% and 200% of that largest generator.

Reproducibility: instance i uses its own PCG64 generator seeded with
(seed, i), with a fixed draw order (scale factor, noise vector, requirement),
so datasets are byte-identical across runs and parallelizable across
instances.  Draws that are infeasible for the dispatch problem are rejected
and redrawn from the same stream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, asdict

import numpy as np

from .core import EDInstance, check_feasibility, solve_reference
from .grid import SystemCase, case_to_snapshot

logger = logging.getLogger(__name__)


@dataclass
class GenConfig:
    n_instances: int = 100
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    mode: str = "ed"            # ed | edr
    label: str = "none"         # none | reference
    seed: int = 0
    gamma_low: float = 0.8
    gamma_high: float = 1.2
    noise_sigma: float = 0.05
    r_low: float = 1.0          # reserve requirement range, x largest generator
    r_high: float = 2.0

    def __post_init__(self):
        if self.mode not in ("ed", "edr"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.label not in ("none", "reference"):
            raise ValueError(f"unknown label mode {self.label!r}")
        if not (0 < self.gamma_low <= self.gamma_high):
            raise ValueError("scale factor range must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be nonnegative")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def perturb_loads(d_ref: np.ndarray, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """One load draw: global scale times per-load lognormal noise."""
    gamma = rng.uniform(cfg.gamma_low, cfg.gamma_high)
    if cfg.noise_sigma > 0.0:
        sigma2 = np.log1p(cfg.noise_sigma ** 2)
        eta = rng.lognormal(mean=-0.5 * sigma2, sigma=np.sqrt(sigma2), size=d_ref.size)
    else:
        eta = np.ones(d_ref.size)
    return gamma * eta * d_ref


def reserve_capacity(p_max: np.ndarray) -> np.ndarray:
    """Per-generator reserve capacity: alpha_r * p_max with
    alpha_r = 5 * max(p_max) / sum(p_max), capped at 1 so r_max <= p_max."""
    total = float(p_max.sum())
    if total <= 0.0:
        raise ValueError("total generation capacity must be positive")
    alpha = min(1.0, 5.0 * float(p_max.max()) / total)
    return alpha * p_max


def sample_reserve_requirement(p_max: np.ndarray, rng: np.random.Generator,
                               low: float = 1.0, high: float = 2.0) -> float:
    if p_max.size == 0:
        raise ValueError("empty capacity vector")
    return float(rng.uniform(low, high) * p_max.max())


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _feasible(d: np.ndarray, p_max: np.ndarray, r_max: np.ndarray, r_req: float) -> bool:
    d_tot = float(d.sum())
    cap = float(p_max.sum())
    return (0.0 < d_tot <= cap and cap - d_tot >= r_req
            and float(r_max.sum()) >= r_req)


def draw_instance(case: SystemCase, cfg: GenConfig, index: int) -> tuple[np.ndarray, float, int]:
    """Deterministically draw instance `index`; returns (d, R, rejected_count)."""
    rng = _instance_rng(cfg.seed, index)
    d_ref = case.demand_vector()
    p_max = case.p_max()
    r_max = case.r_max()
    rejected = 0
    while True:
        d = perturb_loads(d_ref, cfg, rng)
        r_req = sample_reserve_requirement(p_max, rng, cfg.r_low, cfg.r_high) \
            if cfg.mode == "edr" else 0.0
        if _feasible(d, p_max, r_max, r_req):
            return d, r_req, rejected
        rejected += 1
        if rejected > 10_000:
            raise RuntimeError(f"instance {index}: rejection sampling did not terminate")


def build_dataset(case: SystemCase, cfg: GenConfig, out_dir: str) -> dict:
    """Generate, optionally label, and write the three split files + manifest.

    The case written alongside (``case.json``) carries the reserve capacities
    actually used, so downstream consumers need no extra configuration.
    """
    case = _with_reserves(case, cfg)
    os.makedirs(out_dir, exist_ok=True)
    snapshot = case_to_snapshot(case)
    with open(os.path.join(out_dir, "case.json"), "w") as fh:
        fh.write(snapshot)
    case_hash = hashlib.sha256(snapshot.encode()).hexdigest()

    n = cfg.n_instances
    n_train = int(n * cfg.split[0])
    n_val = int(n * cfg.split[1])
    sizes = {"train": n_train, "val": n_val, "test": n - n_train - n_val}

    solver_calls = 0
    rejected_total = 0
    lines: list[str] = []
    for i in range(n):
        d, r_req, rejected = draw_instance(case, cfg, i)
        rejected_total += rejected
        record = {"idx": i, "d": d.tolist(), "R": r_req}
        if cfg.label == "reference":
            inst = EDInstance.from_case(case, d=d, reserve_req=r_req, case_ref=case_hash)
            sol = solve_reference(inst)
            solver_calls += 1
            if sol.status != "optimal":
                raise RuntimeError(f"instance {i}: reference solve returned {sol.status}")
            report = check_feasibility(inst, sol.p, sol.r)
            if not report.feasible:
                raise RuntimeError(f"instance {i}: reference solution infeasible: "
                                   f"{report.violations}")
            record["solution"] = {"p": sol.p.tolist(), "r": sol.r.tolist(),
                                  "objective": sol.objective}
        lines.append(json.dumps(record, sort_keys=True))

    offset = 0
    for name in ("train", "val", "test"):
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w") as fh:
            for line in lines[offset:offset + sizes[name]]:
                fh.write(line + "\n")
        offset += sizes[name]

    manifest = {
        "seed": cfg.seed,
        "config": {**asdict(cfg), "split": list(cfg.split)},
        "case_sha256": case_hash,
        "counts": {**sizes, "solver_calls": solver_calls},
        "rejected": rejected_total,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    logger.info("wrote %d instances to %s (%d rejected draws)", n, out_dir, rejected_total)
    return manifest


def _with_reserves(case: SystemCase, cfg: GenConfig) -> SystemCase:
    if cfg.mode != "edr":
        return case
    r = reserve_capacity(case.p_max())
    for gen, r_g in zip(case.generators, r):
        gen.r_max_pu = float(r_g)
    return case


def read_split(path: str):
    """Load one JSONL split into dense arrays (dmat, rvec, labels-or-None)."""
    dmat, rvec, labels = [], [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            dmat.append(rec["d"])
            rvec.append(rec["R"])
            if "solution" in rec:
                labels.append(rec["solution"]["p"])
    dmat = np.asarray(dmat, dtype=np.float64)
    rvec = np.asarray(rvec, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64) if len(labels) == len(rvec) and labels else None
    return dmat, rvec, lab
