"""Monte-Carlo driver: sweeps configurations, runs seeds, writes CSV summaries.

Outputs in the results directory:

* ``summary.csv``: one row per configuration (experiment, C, T);
* ``checkpoints.csv``: per-checkpoint regret and full-set counts;
* ``timing.csv``: wall-clock per configuration (kept apart so the other
  files are byte-identical across reruns);
* ``trace_<hash>_<seed>.csv`` / ``schedule_<hash>_<seed>.csv`` with tracing on.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from delaysched import rng as rngmod
from delaysched.env import generate, load_instance_csv
from delaysched.harness.config import ExperimentConfig
from delaysched.learners import (
    SimulationError,
    check_rates,
    run_baseline,
    run_batched,
    run_expectation_capacity,
    run_scheduled,
    telescoping_check,
    write_transcript_csv,
)
from delaysched.schedulers import FIXED_P, InvariantViolation, simulate_schedule, write_schedule_csv

log = logging.getLogger(__name__)

SUMMARY_VERSION = "# delaysched summary v1"
CHECKPOINT_VERSION = "# delaysched checkpoints v1"
TIMING_VERSION = "# delaysched timing v1"

SUMMARY_FIELDS = [
    "experiment", "config_hash", "algorithm", "regime", "policy", "rates", "capacity", "horizon",
    "seeds", "mean_regret", "stderr", "mean_pseudo_regret", "overflow_rate", "observed_fraction",
    "max_occupancy", "violations",
]
CHECKPOINT_FIELDS = [
    "experiment", "config_hash", "capacity", "horizon", "checkpoint", "seeds", "mean_regret", "stderr",
    "full_count", "delta",
]


@dataclass
class RunResult:
    index: int
    checkpoints: np.ndarray
    regret: np.ndarray
    pseudo_regret: np.ndarray
    full_at: np.ndarray
    overflow_count: int
    observation_count: int
    max_occupancy: int
    delta: float | None
    violations: list = field(default_factory=list)


@dataclass
class SummaryStats:
    experiment: str
    config_hash: str
    algorithm: str
    regime: str
    policy: str
    rates: str
    capacity: int | None
    horizon: int
    seeds: int
    mean_regret: float
    stderr: float
    mean_pseudo_regret: float
    overflow_rate: float
    observed_fraction: float
    max_occupancy: int
    violations: int
    wall_clock: float
    checkpoints: np.ndarray
    checkpoint_mean: np.ndarray
    checkpoint_stderr: np.ndarray
    full_count: np.ndarray
    delta: float | None


def _instance(cfg: ExperimentConfig, T, seed):
    if cfg.instance_csv:
        return load_instance_csv(cfg.instance_csv)
    return generate(cfg.instance_spec(T, seed))


def run_one(cfg: ExperimentConfig, C, T, index, trace_dir=None) -> RunResult:
    """Run seed ``index`` of configuration (C, T); never raises on invariant failures."""
    seed = rngmod.run_seed(cfg.base_seed, index)
    inst = _instance(cfg, T, seed)
    rates = cfg.rate_policy()
    violations = []
    delta = None
    try:
        if cfg.algorithm == "baseline":
            tr = run_baseline(inst, cfg.regime, rates=rates, master_seed=seed)
        elif cfg.algorithm == "batched":
            tr = run_batched(inst, cfg.regime, C, b=cfg.batch_size, master_seed=seed, rates=rates)
        elif cfg.algorithm == "expectation_capacity":
            tr = run_expectation_capacity(
                inst, cfg.regime, cfg.policy_params["expectation_capacity"], master_seed=seed
            )
        else:
            tr = run_scheduled(inst, cfg.regime, C, cfg.policy_config(), rates, master_seed=seed)
        if "policy" in tr.extras and tr.extras["policy"].policy != FIXED_P:
            delta = tr.extras["policy"].delta
        rep = check_rates(tr)
        if not rep.ok:
            violations.append(f"rates: {rep.message}")
        if not telescoping_check(inst, tr):
            violations.append("estimate telescoping failed")
    except (InvariantViolation, SimulationError) as exc:
        violations.append(str(exc))
        cp = np.asarray([T])
        nan = np.full(1, np.nan)
        return RunResult(index, cp, nan, nan, np.zeros(1, bool), 0, 0, 0, delta, violations)
    cap = tr.capacity
    full = tr.occupancy[tr.checkpoints - 1] >= cap if cap is not None else np.zeros(tr.checkpoints.size, bool)
    if trace_dir is not None:
        h = cfg.config_hash(C, T)
        write_transcript_csv(tr, Path(trace_dir) / f"trace_{h}_{index}.csv", comment=f"config={h} seed={index}")
        if cfg.algorithm in ("scheduled", "expectation_capacity"):
            sch = simulate_schedule(
                inst.delays, cap, tr.extras["policy"], rng=rngmod.stream(seed, rngmod.SCHEDULER)
            )
            write_schedule_csv(sch, inst.delays, Path(trace_dir) / f"schedule_{h}_{index}.csv",
                               comment=f"config={h} seed={index}")
    return RunResult(
        index, tr.checkpoints, tr.regret, tr.pseudo_regret, full, tr.overflow_count,
        tr.observation_count, tr.max_occupancy, delta, violations,
    )


def _stderr(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


def summarize(cfg, C, T, results: list[RunResult], wall) -> SummaryStats:
    results = sorted(results, key=lambda r: r.index)
    ok = [r for r in results if not r.violations]
    nviol = len(results) - len(ok)
    if ok:
        cp = ok[0].checkpoints
        R = np.vstack([r.regret for r in ok])
        P = np.vstack([r.pseudo_regret for r in ok])
        F = np.vstack([r.full_at for r in ok]).sum(axis=0)
        final = R[:, -1]
        cp_mean = R.mean(axis=0)
        cp_se = np.array([_stderr(R[:, j]) for j in range(R.shape[1])])
        mean_regret, se, mean_pseudo = float(final.mean()), _stderr(final), float(P[:, -1].mean())
        overflow = float(np.mean([r.overflow_count / T for r in ok]))
        observed = float(np.mean([r.observation_count / T for r in ok]))
        max_occ = int(max(r.max_occupancy for r in ok))
    else:
        cp = np.asarray([T])
        cp_mean = cp_se = np.full(1, np.nan)
        F = np.zeros(1, dtype=np.int64)
        mean_regret = se = mean_pseudo = overflow = observed = float("nan")
        max_occ = 0
    delta = next((r.delta for r in results if r.delta is not None), None)
    pc = cfg.policy_config()
    return SummaryStats(
        experiment=cfg.name, config_hash=cfg.config_hash(C, T), algorithm=cfg.algorithm,
        regime=cfg.regime, policy=pc.policy if pc else "", rates=cfg.rate_policy(),
        capacity=C, horizon=T, seeds=len(results), mean_regret=mean_regret, stderr=se,
        mean_pseudo_regret=mean_pseudo, overflow_rate=overflow, observed_fraction=observed,
        max_occupancy=max_occ, violations=nviol, wall_clock=wall, checkpoints=cp,
        checkpoint_mean=cp_mean, checkpoint_stderr=cp_se, full_count=F, delta=delta,
    )


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out: str | Path | None = None,
                   write: bool = True) -> list[SummaryStats]:
    """Run every configuration of ``cfg``; results are ordered by (C, T) then seed index."""
    return run_experiments([cfg], threads=threads, out=out, write=write)


def run_experiments(cfgs, threads: int = 1, out=None, write: bool = True) -> list[SummaryStats]:
    stats = []
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for cfg in cfgs:
            outdir = Path(out or cfg.out)
            trace_dir = outdir if (cfg.trace and write) else None
            if write:
                outdir.mkdir(parents=True, exist_ok=True)
            for C, T in cfg.configurations():
                start = time.perf_counter()
                job = partial(run_one, cfg, C, T, trace_dir=trace_dir)
                idx = range(cfg.seeds)
                # map() preserves submission order, so the reduction is seed-ordered
                results = list(pool.map(job, idx, chunksize=max(1, cfg.seeds // (4 * threads)))) if pool else [job(i) for i in idx]
                s = summarize(cfg, C, T, results, time.perf_counter() - start)
                for r in results:
                    for v in r.violations:
                        log.error("[%s C=%s T=%s seed=%d] invariant violation: %s", cfg.name, C, T, r.index, v)
                stats.append(s)
    finally:
        if pool is not None:
            pool.shutdown()
    if write and cfgs:
        write_outputs(stats, Path(out or cfgs[0].out))
    return stats


def write_outputs(stats: list[SummaryStats], outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    with (outdir / "summary.csv").open("w") as fh:
        fh.write(SUMMARY_VERSION + "\n")
        fh.write(",".join(SUMMARY_FIELDS) + "\n")
        for s in stats:
            fh.write(",".join(_fmt(getattr(s, f)) for f in SUMMARY_FIELDS) + "\n")
    with (outdir / "checkpoints.csv").open("w") as fh:
        fh.write(CHECKPOINT_VERSION + "\n")
        fh.write(",".join(CHECKPOINT_FIELDS) + "\n")
        for s in stats:
            for j, c in enumerate(s.checkpoints):
                row = [s.experiment, s.config_hash, s.capacity, s.horizon, int(c), s.seeds,
                       s.checkpoint_mean[j], s.checkpoint_stderr[j], int(s.full_count[j]), s.delta]
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    with (outdir / "timing.csv").open("w") as fh:
        fh.write(TIMING_VERSION + "\n")
        fh.write("experiment,config_hash,wall_clock_s\n")
        for s in stats:
            fh.write(f"{s.experiment},{s.config_hash},{s.wall_clock:.3f}\n")
