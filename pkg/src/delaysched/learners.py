"""Learner loops: unlimited-capacity delayed FTRL, batch partitioning and FTRL with a scheduler.

Every run derives two independent streams from its master seed: the
scheduler stream (admissions, batch representatives) and the learner stream
(action sampling, one uniform per played unit). Because schedulers never see
losses or actions, a run first computes its whole schedule and then plays
the learner against it; the result is the same as interleaving the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from delaysched import rng as rngmod
from delaysched.env import Instance, delay_stats
from delaysched.rates import (
    BANDIT,
    FULLINFO,
    RateTranscript,
    check_pairing,
    check_regime,
    fixed_p_parameters,
    make_rate_policy,
    mu_sequence,
)
from delaysched.schedulers import (
    EXPECTATION,
    FIXED_P,
    PROXY,
    InvariantViolation,
    PolicyConfig,
    normalizers,
    simulate_schedule,
)
from delaysched.simplex_ftrl import PROB_FLOOR, SolverError, _sample, solve_raw


class SimulationError(RuntimeError):
    """A run was aborted (non-finite estimates, failed solve)."""


def default_checkpoints(T: int) -> np.ndarray:
    """Powers of two up to T, and T itself."""
    pts = [1 << k for k in range(T.bit_length()) if (1 << k) <= T]
    if pts[-1] != T:
        pts.append(T)
    return np.asarray(pts, dtype=np.int64)


@dataclass
class BatchInfo:
    size: int
    representatives: np.ndarray
    batch_delay: np.ndarray
    delivered: np.ndarray
    occupancy_bound: int


@dataclass
class RegretTrace:
    """Outcome of one run.

    ``player_loss`` is the realized cumulative loss of the played actions,
    ``expected_loss`` the cumulative <x_t, l_t>, and ``best_loss`` the loss of
    the best fixed action over the same prefix, all sampled at
    ``checkpoints``. Per-round arrays have length T.
    """

    algorithm: str
    regime: str
    checkpoints: np.ndarray
    player_loss: np.ndarray
    expected_loss: np.ndarray
    best_loss: np.ndarray
    overflow_count: int
    observation_count: int
    max_occupancy: int
    capacity: int | None
    actions: np.ndarray
    played_prob: np.ndarray
    admitted: np.ndarray
    observed: np.ndarray
    prob: np.ndarray
    occupancy: np.ndarray
    cum_loss: np.ndarray
    rates: RateTranscript
    rate_delays: np.ndarray
    rate_observed: np.ndarray
    L_hat: np.ndarray
    delivery_log: tuple
    max_stored: int
    batch: BatchInfo | None = None
    expected_occupancy: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def regret(self) -> np.ndarray:
        return self.player_loss - self.best_loss

    @property
    def pseudo_regret(self) -> np.ndarray:
        return self.expected_loss - self.best_loss

    @property
    def final_regret(self) -> float:
        return float(self.regret[-1])

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def _streams(master_seed, scheduler_seed, learner_seed):
    s = master_seed if scheduler_seed is None else scheduler_seed
    l = master_seed if learner_seed is None else learner_seed
    return rngmod.stream(s, rngmod.SCHEDULER), rngmod.stream(l, rngmod.LEARNER)


def _solve(L, a, b, t):
    try:
        return solve_raw(L, a, b)
    except SolverError as exc:
        raise SimulationError(f"round {t}: {exc}") from None


def _loss_summary(inst, actions, exp_loss, checkpoints):
    T = inst.horizon
    realized = inst.losses[np.arange(T), actions]
    cum = np.cumsum(realized)
    cum_exp = np.cumsum(exp_loss)
    prefix = np.cumsum(inst.losses, axis=0)
    idx = checkpoints - 1
    return cum, cum[idx], cum_exp[idx], prefix[idx].min(axis=1)


def _delayed_ftrl(inst, regime, policy, admitted, arrival, src, p_src, drops, uniforms):
    """Core loop shared by the baseline and scheduled learners.

    ``arrival``/``src`` list deliveries sorted by arrival round then source;
    ``drops`` lists (round, source) pairs whose stored point can be discarded
    (preempted rounds). Feedback arriving at round t is added after round t
    is played.
    """
    T, K = inst.losses.shape
    losses = inst.losses
    bandit = regime == BANDIT
    L = np.zeros(K)
    actions = np.empty(T, dtype=np.int64)
    played = np.empty(T)
    exp_loss = np.empty(T)
    stored: dict[int, tuple[int, float]] = {}
    max_stored = 0
    log_src, log_val = [], []
    n_ev, j = len(arrival), 0
    drop_r, drop_s = drops
    n_drop, k = len(drop_r), 0
    for t in range(1, T + 1):
        a, b = policy.start(t)
        x = _solve(L, a, b, t)
        A = _sample(x, uniforms[t - 1])
        row = losses[t - 1]
        actions[t - 1] = A
        played[t - 1] = x[A]
        exp_loss[t - 1] = x @ row
        policy.issue(t)
        if admitted[t - 1]:
            stored[t] = (A, x[A])
            if len(stored) > max_stored:
                max_stored = len(stored)
        while j < n_ev and arrival[j] == t:
            s = int(src[j])
            As, xa = stored.pop(s)
            p = p_src[s - 1]
            if bandit:
                v = losses[s - 1, As] / (max(xa, PROB_FLOOR) * p)
                L[As] += v
                log_val.append(v)
            else:
                L += losses[s - 1] / p
            log_src.append(s)
            policy.deliver(s)
            j += 1
        while k < n_drop and drop_r[k] == t:
            stored.pop(int(drop_s[k]))
            k += 1
        if not np.isfinite(L).all():
            raise SimulationError(f"round {t}: cumulative loss estimate is not finite: {L.tolist()}")
    if j != n_ev:
        raise InvariantViolation("deliveries left unprocessed")
    return actions, played, exp_loss, L, (np.asarray(log_src, dtype=np.int64), np.asarray(log_val)), max_stored


def _trace(algorithm, regime, inst, checkpoints, actions, played, exp_loss, L, log, max_stored, policy, **kw):
    cum, pl, el, bl = _loss_summary(inst, actions, exp_loss, checkpoints)
    return RegretTrace(
        algorithm=algorithm, regime=regime, checkpoints=checkpoints, player_loss=pl,
        expected_loss=el, best_loss=bl, actions=actions, played_prob=played, cum_loss=cum,
        rates=policy.transcript, L_hat=L, delivery_log=log, max_stored=max_stored, **kw,
    )


def _checkpoints(T, checkpoints):
    if checkpoints is None:
        return default_checkpoints(T)
    cp = np.unique(np.asarray(checkpoints, dtype=np.int64))
    if cp.size == 0 or cp[0] < 1 or cp[-1] > T:
        raise ValueError(f"checkpoints must lie in [1, {T}]")
    return cp


def run_baseline(inst: Instance, regime: str, rates="baseline_seldin", master_seed=0, *,
                 learner_seed=None, checkpoints=None, rate_params=None) -> RegretTrace:
    """Delayed FTRL with unlimited capacity: every round is tracked.

    ``rates`` may be ``baseline_seldin`` (default), a ``batch_*`` policy
    (the batched learner with b = 1) or ``fixed_const``.
    """
    check_regime(regime)
    T, K = inst.losses.shape
    if not (rates == "baseline_seldin" or rates.startswith("batch_") or rates == "fixed_const"):
        raise ValueError(f"rate policy {rates} needs a scheduler; use run_scheduled")
    policy = make_rate_policy(rates, K, regime, **(rate_params or {})).bind(delays=inst.delays)
    _, lrng = _streams(master_seed, None, learner_seed)
    s = np.arange(1, T + 1)
    due = s + inst.delays
    observed = due <= T
    src = s[observed]
    arrival = due[observed]
    order = np.lexsort((src, arrival))
    arrival, src = arrival[order], src[order]
    ones = np.ones(T)
    admitted = np.ones(T, dtype=bool)
    empty = (np.empty(0, np.int64), np.empty(0, np.int64))
    out = _delayed_ftrl(inst, regime, policy, admitted, arrival, src, ones, empty, lrng.random(T))
    stats = delay_stats(inst)
    if out[5] > stats.sigma_max + 1:
        raise InvariantViolation(f"stored {out[5]} points, bound is sigma_max + 1 = {stats.sigma_max + 1}")
    return _trace(
        "baseline", regime, inst, _checkpoints(T, checkpoints), *out, policy,
        overflow_count=0, observation_count=int(observed.sum()), max_occupancy=int(stats.outstanding.max() + 1),
        capacity=None, admitted=admitted, observed=observed, prob=ones, occupancy=stats.outstanding,
        rate_delays=inst.delays, rate_observed=observed,
    )


def batch_size(d_max: int, C: int) -> int:
    """b = max{1, ceil(d_max / (C - 1))}."""
    if d_max == 0:
        return 1
    if C < 2:
        raise ValueError("batching with positive delays needs capacity C >= 2")
    return max(1, -(-d_max // (C - 1)))


def batch_delay(u, d_u, b):
    """ceil((u + d_u) / b) - ceil(u / b); works on arrays."""
    u = np.asarray(u, dtype=np.int64)
    return -(-(u + d_u) // b) - (-(-u // b))


def run_batched(inst: Instance, regime: str, C: int, b: int | None = None, master_seed=0, *,
                rates=None, scheduler_seed=None, learner_seed=None, checkpoints=None) -> RegretTrace:
    """Delayed FTRL over batches of b rounds, tracking one random representative per batch.

    The action drawn at the start of a batch is played for all its rounds.
    Feedback arriving inside a batch enters the estimate at the batch's end.
    """
    check_regime(regime)
    T, K = inst.losses.shape
    d = inst.delays
    d_max = int(d.max())
    if C < 1:
        raise ValueError("capacity must be >= 1")
    if d_max > 0 and C < 2:
        raise ValueError("batching with positive delays needs capacity C >= 2")
    if b is None:
        b = batch_size(d_max, C)
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if d_max > 0 and b * (C - 1) < d_max:
        raise ValueError(f"batch size {b} too small for d_max={d_max} and C={C} (need b >= d_max/(C-1))")
    rates = rates or f"batch_{regime}"
    policy = make_rate_policy(rates, K, regime)
    srng, lrng = _streams(master_seed, scheduler_seed, learner_seed)
    nb = -(-T // b)
    tau = np.arange(1, nb + 1)
    u = (tau - 1) * b + 1 + np.floor(srng.random(nb) * b).astype(np.int64)
    padded = u > T
    du = np.where(padded, 0, d[np.minimum(u, T) - 1])
    due = u + du
    delivered = padded | (due <= T)
    db = batch_delay(u, du, b)
    arrival_batch = tau + db

    # occupancy |S_t^0|: representative u is tracked from round u to the end of round u + d_u
    real = ~padded
    diff = np.zeros(T + 2, dtype=np.int64)
    np.add.at(diff, u[real] + 1, 1)
    np.add.at(diff, np.minimum(due[real], T) + 1, -1)
    occ0 = np.cumsum(diff)[1 : T + 1]
    is_rep = np.zeros(T, dtype=bool)
    is_rep[u[real] - 1] = True
    occ1 = occ0 + is_rep
    bound = 1 + (-(-d_max // b))
    if occ1.max() > min(bound, C):
        raise InvariantViolation(f"batched occupancy {occ1.max()} exceeds min(C, 1 + ceil(d_max/b)) = {min(bound, C)}")

    src = tau[delivered]
    arr = arrival_batch[delivered]
    order = np.lexsort((src, arr))
    src, arr = src[order], arr[order]
    uni = lrng.random(nb)
    losses = inst.losses
    bandit = regime == BANDIT
    L = np.zeros(K)
    actions = np.empty(T, dtype=np.int64)
    played = np.empty(T)
    exp_loss = np.empty(T)
    stored: dict[int, tuple[int, float]] = {}
    max_stored = 0
    log_src, log_val = [], []
    j, n_ev = 0, len(arr)
    for t_b in range(1, nb + 1):
        a, bb = policy.start(t_b)
        x = _solve(L, a, bb, t_b)
        A = _sample(x, uni[t_b - 1])
        lo, hi = (t_b - 1) * b, min(t_b * b, T)
        actions[lo:hi] = A
        played[lo:hi] = x[A]
        exp_loss[lo:hi] = losses[lo:hi] @ x
        policy.issue(t_b)
        stored[t_b] = (A, x[A])
        max_stored = max(max_stored, len(stored))
        while j < n_ev and arr[j] == t_b:
            s = int(src[j])
            As, xa = stored.pop(s)
            us = int(u[s - 1])
            lvec = losses[us - 1] if us <= T else np.zeros(K)
            if bandit:
                v = lvec[As] / max(xa, PROB_FLOOR)
                L[As] += v
                log_val.append(v)
            else:
                L += lvec
            log_src.append(s)
            policy.deliver(s)
            j += 1
        if not np.isfinite(L).all():
            raise SimulationError(f"batch {t_b}: cumulative loss estimate is not finite")
    if j != n_ev:
        raise InvariantViolation("batch deliveries left unprocessed")
    check_batch_conservation(db, nb)

    observed = np.zeros(T, dtype=bool)
    observed[u[real & delivered] - 1] = True
    info = BatchInfo(size=b, representatives=u, batch_delay=db, delivered=delivered, occupancy_bound=bound)
    log = (np.asarray(log_src, dtype=np.int64), np.asarray(log_val))
    return _trace(
        "batched", regime, inst, _checkpoints(T, checkpoints), actions, played, exp_loss, L, log, max_stored, policy,
        overflow_count=int(np.count_nonzero(occ0 >= C)), observation_count=int(observed.sum()),
        max_occupancy=int(occ1.max()), capacity=int(C), admitted=is_rep, observed=observed,
        prob=np.ones(T), occupancy=occ0, rate_delays=db, rate_observed=delivered, batch=info,
    )


def check_batch_conservation(db, nb):
    """sum_tau sigma^b_tau == sum_tau min(d^b_tau, T' - tau) over the batch horizon."""
    tau = np.arange(1, nb + 1)
    diff = np.zeros(nb + 2, dtype=np.int64)
    np.add.at(diff, tau + 1, 1)
    np.add.at(diff, np.minimum(tau + db, nb) + 1, -1)
    sigma = np.cumsum(diff)[1 : nb + 1]
    lhs = int(sigma.sum())
    rhs = int(np.minimum(db, nb - tau).sum())
    if lhs != rhs:
        raise InvariantViolation(f"batch delay conservation failed: {lhs} != {rhs}")
    return lhs


def _rate_setup(name, regime, inst, C, policy: PolicyConfig, rate_params):
    T, K = inst.losses.shape
    params = dict(rate_params or {})
    if name == "fixed_const" and not params:
        _, ia, ib = fixed_p_parameters(C, T, K, int(inst.delays.sum()), regime)
        params = {"inv_alpha": ia, "inv_beta": ib}
    elif name.startswith("cnp_"):
        params = {"C": C, "alpha": policy.alpha, "nu_multiplier": policy.multiplier(C)}
    elif name.startswith("ncp_"):
        d_max = policy.d_max if policy.d_max is not None else int(inst.delays.max())
        if d_max < int(inst.delays.max()):
            raise ValueError(f"declared d_max={d_max} is below the instance's maximum delay")
        params = {"C": C, "alpha": policy.alpha, "d_max": d_max, "nu_multiplier": policy.multiplier(C)}
    return make_rate_policy(name, K, regime, **params)


def run_scheduled(inst: Instance, regime: str, C: int, policy: PolicyConfig, rate_policy: str,
                  master_seed=0, *, scheduler_seed=None, learner_seed=None, checkpoints=None,
                  rate_params=None) -> RegretTrace:
    """FTRL with a precommitted scheduler under capacity C.

    Pairings: bernoulli/expectation-capacity with ``cnp_*``, pareto_proxy
    with ``ncp_*``, fixed_p with ``fixed_const``.
    """
    check_pairing(policy.policy, rate_policy, regime)
    T, K = inst.losses.shape
    policy = policy.resolved(C, T)
    srng, lrng = _streams(master_seed, scheduler_seed, learner_seed)
    sch = simulate_schedule(inst.delays, C, policy, rng=srng)
    rp = _rate_setup(rate_policy, regime, inst, C, policy, rate_params)
    if policy.policy != FIXED_P:
        nu = normalizers(T, policy.multiplier(C))
        rp.bind(delays=inst.delays, mu=mu_sequence(inst.delays, C, policy.alpha, nu))
    arrival, src = sch.deliveries(inst.delays)
    drops = sch.preemptions()
    out = _delayed_ftrl(inst, regime, rp, sch.admitted, arrival, src, sch.prob, drops, lrng.random(T))
    if out[5] > C:
        raise InvariantViolation(f"stored {out[5]} points with capacity {C}")
    prob = sch.prob.copy()
    if policy.policy == PROXY:
        prob[~sch.observed] = np.nan
    return _trace(
        "scheduled", regime, inst, _checkpoints(T, checkpoints), *out, rp,
        overflow_count=sch.overflow_count, observation_count=int(sch.observed.sum()),
        max_occupancy=sch.max_occupancy, capacity=int(C), admitted=sch.admitted,
        observed=sch.observed, prob=prob, occupancy=sch.occupancy0,
        rate_delays=inst.delays, rate_observed=sch.observed,
        extras={"policy": policy},
    )


def expectation_capacity(T: int, K: int, regime: str) -> int:
    """Hard capacity used under an expectation constraint.

    ceil(max{3, K} ln T) for bandits, ceil(max{3, ln K} ln T) with full information.
    """
    check_regime(regime)
    factor = max(3.0, K) if regime == BANDIT else max(3.0, math.log(K))
    return max(1, math.ceil(factor * math.log(T)))


def expectation_policy(T: int, C_E: float) -> PolicyConfig:
    return PolicyConfig(EXPECTATION, alpha=1.0, delta=T ** -0.5 if T > 1 else 0.5, expectation_capacity=C_E)


def run_expectation_capacity(inst: Instance, regime: str, C_E: float, master_seed=0, **kw) -> RegretTrace:
    """Bernoulli scheduling with the normalizer inflated by max{1, C / C_E}.

    ``expected_occupancy[t-1]`` is sum of p_s over rounds s <= t still
    pending at t, an upper bound on E|S_t^1|.
    """
    if not C_E > 0:
        raise ValueError("expectation capacity must be positive")
    T, K = inst.losses.shape
    C = expectation_capacity(T, K, regime)
    policy = expectation_policy(T, C_E)
    trace = run_scheduled(inst, regime, C, policy, f"cnp_{regime}", master_seed, **kw)
    s = np.arange(1, T + 1)
    diff = np.zeros(T + 2)
    np.add.at(diff, s, trace.prob)
    np.add.at(diff, np.minimum(s + inst.delays, T) + 1, -trace.prob)
    trace.expected_occupancy = np.cumsum(diff)[1 : T + 1]
    trace.algorithm = "expectation_capacity"
    return trace


def telescoping_check(inst: Instance, trace: RegretTrace) -> bool:
    """Recompute the final estimate from the delivery log, in delivery order."""
    K = inst.num_actions
    L = np.zeros(K)
    src, vals = trace.delivery_log
    if trace.regime == BANDIT:
        for s, v in zip(src, vals):
            first = (int(s) - 1) * trace.batch.size if trace.batch is not None else int(s) - 1
            L[int(trace.actions[first])] += v
    else:
        for s in src:
            if trace.batch is not None:
                r = int(trace.batch.representatives[s - 1])
                L += inst.losses[r - 1] if r <= inst.horizon else np.zeros(K)
            else:
                L += inst.losses[s - 1] / trace.prob[s - 1]
    return bool(np.array_equal(L, trace.L_hat))


def write_transcript_csv(trace: RegretTrace, path, comment=""):
    """Per-round transcript ``t,action,admitted,observed,p_t,alpha_inv,beta_inv,cum_loss``."""
    a, b = trace.rates.arrays()
    if trace.batch is not None:
        idx = (np.arange(trace.horizon) // trace.batch.size)
        a, b = a[idx], b[idx]
    with open(path, "w") as fh:
        fh.write(f"# transcript v1 {comment}".rstrip() + "\n")
        fh.write("t,action,admitted,observed,p_t,alpha_inv,beta_inv,cum_loss\n")
        for i in range(trace.horizon):
            p = trace.prob[i]
            ps = "" if np.isnan(p) else repr(float(p))
            fh.write(
                f"{i + 1},{int(trace.actions[i])},{int(trace.admitted[i])},{int(trace.observed[i])},"
                f"{ps},{a[i]!r},{b[i]!r},{float(trace.cum_loss[i])!r}\n"
            )


def check_rates(trace: RegretTrace):
    """Audit a finished run's learning rates (see :func:`delaysched.rates.rate_check`)."""
    from delaysched.rates import rate_check

    return rate_check(trace.rates, trace.rate_delays, trace.rate_observed)
