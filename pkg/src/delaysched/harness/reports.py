"""Post-processing of results directories: regret scaling fits and overflow rates."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from statsmodels.stats.proportion import proportion_confint

log = logging.getLogger(__name__)


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    horizons: np.ndarray
    excluded: np.ndarray


def scaling_report(horizons, mean_regrets) -> ScalingFit:
    """Least-squares slope of log(mean regret) against log(T).

    Needs at least 4 horizons spanning a factor of 16 or more. Non-positive
    regrets are dropped from the fit with a warning.
    """
    T = np.asarray(horizons, dtype=np.float64)
    R = np.asarray(mean_regrets, dtype=np.float64)
    if T.shape != R.shape:
        raise ValueError("horizons and regrets must have the same length")
    if T.size < 4 or T.max() / T.min() < 16:
        raise ValueError("need >= 4 horizons spanning at least 16x")
    keep = np.isfinite(R) & (R > 0)
    if not keep.all():
        log.warning("excluding non-positive regrets at T = %s from the fit", T[~keep].astype(int).tolist())
    if keep.sum() < 2:
        raise ValueError("fewer than two positive regrets left to fit")
    slope, intercept = np.polyfit(np.log(T[keep]), np.log(R[keep]), 1)
    return ScalingFit(float(slope), float(intercept), T[keep], T[~keep])


@dataclass
class OverflowRow:
    checkpoint: int
    full: int
    runs: int
    rate: float
    lower: float
    upper: float
    flagged: bool


def overflow_report(full_counts, runs, delta, checkpoints, conf=0.95) -> list[OverflowRow]:
    """Empirical Pr(|S_t^0| = C) per checkpoint with Wilson intervals.

    A checkpoint is flagged when the interval's lower end exceeds ``delta``.
    """
    lo, hi = proportion_confint(np.asarray(full_counts), runs, alpha=1 - conf, method="wilson")
    out = []
    for c, k, l, h in zip(checkpoints, full_counts, np.atleast_1d(lo), np.atleast_1d(hi)):
        out.append(OverflowRow(int(c), int(k), int(runs), k / runs, float(l), float(h),
                               bool(delta is not None and l > delta)))
    return out


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def report_directory(results_dir, write=True):
    """Write ``scaling.csv`` and ``overflow.csv`` next to the run outputs.

    Returns (scaling rows, overflow rows, number of flagged checkpoints).
    """
    d = Path(results_dir)
    summary = _read(d / "summary.csv")
    checkpoints = _read(d / "checkpoints.csv")

    groups: dict[tuple, list] = {}
    for r in summary:
        key = (r["experiment"], r["algorithm"], r["regime"], r["policy"], r["rates"], r["capacity"])
        groups.setdefault(key, []).append((int(r["horizon"]), float(r["mean_regret"])))
    scaling = []
    for key, pts in groups.items():
        pts.sort()
        T = [p[0] for p in pts]
        if len(T) < 4 or T[-1] / T[0] < 16:
            continue
        fit = scaling_report(T, [p[1] for p in pts])
        scaling.append(dict(zip(("experiment", "algorithm", "regime", "policy", "rates", "capacity"), key),
                            slope=fit.slope, intercept=fit.intercept, horizons=len(fit.horizons)))

    overflow = []
    flagged = 0
    by_cfg: dict[tuple, list] = {}
    for r in checkpoints:
        if r["capacity"] == "" and r["delta"] == "":
            continue
        by_cfg.setdefault((r["experiment"], r["config_hash"], r["capacity"], r["horizon"]), []).append(r)
    for key, rows in by_cfg.items():
        delta = float(rows[0]["delta"]) if rows[0]["delta"] else None
        runs = int(rows[0]["seeds"])
        rep = overflow_report([int(r["full_count"]) for r in rows], runs, delta, [int(r["checkpoint"]) for r in rows])
        for o in rep:
            flagged += o.flagged
            overflow.append({
                "experiment": key[0], "config_hash": key[1], "capacity": key[2], "horizon": key[3],
                "checkpoint": o.checkpoint, "full": o.full, "runs": o.runs, "rate": o.rate,
                "wilson_lower": o.lower, "wilson_upper": o.upper,
                "delta": "" if delta is None else delta, "flagged": int(o.flagged),
            })
    if write:
        _write(d / "scaling.csv", "# delaysched scaling v1", scaling,
               ["experiment", "algorithm", "regime", "policy", "rates", "capacity", "slope", "intercept", "horizons"])
        _write(d / "overflow.csv", "# delaysched overflow v1", overflow,
               ["experiment", "config_hash", "capacity", "horizon", "checkpoint", "full", "runs", "rate",
                "wilson_lower", "wilson_upper", "delta", "flagged"])
    return scaling, overflow, flagged


def _write(path, version, rows, fields):
    with open(path, "w", newline="") as fh:
        fh.write(version + "\n")
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) and math.isfinite(v) else v) for k, v in r.items()})
