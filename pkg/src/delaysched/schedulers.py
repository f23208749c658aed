"""Tracking set and precommitted scheduling policies.

Two implementations of the same policies live here:

* stateful per-round objects (:class:`BernoulliScheduler`,
  :class:`ProxyDelayScheduler`, :class:`FixedPScheduler`) built on
  :class:`TrackingSet`, which follow the game protocol step by step;
* :func:`simulate_schedule`, a compiled whole-run kernel used by the
  learners and Monte-Carlo drivers.

Both consume exactly one uniform per round from the scheduler's own stream,
so for equal streams they produce identical admissions and observations.
A scheduler never sees losses or actions, which makes every schedule a
function of (scheduler stream, delays) only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from delaysched import rng as rngmod

BERNOULLI = "bernoulli_clairvoyant"
PROXY = "pareto_proxy"
FIXED_P = "fixed_p"
EXPECTATION = "expectation_capacity_variant"
POLICIES = (BERNOULLI, PROXY, FIXED_P, EXPECTATION)

_KIND = {BERNOULLI: 0, PROXY: 1, FIXED_P: 0, EXPECTATION: 0}
NEVER = np.iinfo(np.int64).max // 4


class InvariantViolation(RuntimeError):
    """A hard protocol invariant (capacity, single delivery) was broken."""


def harmonic(t: int) -> float:
    """H_t = 1 + 1/2 + ... + 1/t by forward summation."""
    if t < 1:
        raise ValueError("harmonic number needs t >= 1")
    h = 0.0
    for s in range(1, t + 1):
        h += 1.0 / s
    return h


def harmonic_sequence(T: int) -> np.ndarray:
    """H_1..H_T; ``np.cumsum`` accumulates left to right like :func:`harmonic`."""
    return np.cumsum(1.0 / np.arange(1, T + 1))


def normalizers(T: int, multiplier: float = 1.0) -> np.ndarray:
    """nu_t = 2 H_t * multiplier for t = 1..T."""
    return 2.0 * harmonic_sequence(T) * multiplier


def overflow_gap(alpha: float) -> float:
    """ln(1 + alpha) - alpha / (1 + alpha), increasing from 0 on alpha > 0."""
    return math.log1p(alpha) - alpha / (1.0 + alpha)


def overflow_condition_holds(alpha: float, delta: float, C: int) -> bool:
    return overflow_gap(alpha) >= math.log(1.0 / delta) / C


def chernoff_alpha(C: int, delta: float, rtol: float = 1e-10) -> float:
    """Smallest alpha > 0 with ln(1+alpha) - alpha/(1+alpha) >= ln(1/delta)/C.

    Bisection; the returned value is the upper end of the final bracket, so
    the overflow condition always holds for it.
    """
    if C < 1:
        raise ValueError("capacity must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    target = math.log(1.0 / delta) / C
    lo, hi = 0.0, 1.0
    while overflow_gap(hi) < target:
        lo, hi = hi, 2.0 * hi
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if overflow_gap(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def default_alpha(C: int, T: int) -> float:
    """Chernoff parameter valid for delta = T^-0.5 without tuning.

    alpha = 1 once C >= 3 ln T; otherwise e T^(0.5/C) - 1.
    """
    if C >= 3.0 * math.log(T):
        return 1.0
    return math.e * T ** (0.5 / C) - 1.0


def observation_probability(t, d, C, alpha, nu=None):
    """p_t = min{1, C / ((1 + alpha) nu_t (d + 1))}, with nu_t = 2 H_t by default."""
    if nu is None:
        nu = 2.0 * harmonic(t)
    return min(1.0, C / ((1.0 + alpha) * nu * (d + 1)))


def proxy_delay_from_uniform(scale, u):
    """floor(Pareto(scale, 1) - 1) by inverse CDF from ``u`` in [0, 1).

    Uses 1 - u so the Pareto draw ``scale / (1 - u)`` is finite. A result of
    -1 means the round is never tracked. Works elementwise on arrays.
    """
    v = np.floor(np.asarray(scale, dtype=np.float64) / (1.0 - np.asarray(u, dtype=np.float64)) - 1.0)
    out = np.minimum(v, float(NEVER)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def sample_proxy_delay(t, C, alpha, nu, rng):
    """Proxy delay for round ``t``; tail Pr(d >= k) = min{1, c/(k+1)}.

    ``nu=None`` uses the default normalizer 2 H_t.
    """
    if nu is None:
        nu = 2.0 * harmonic(t)
    return proxy_delay_from_uniform(C / ((1.0 + alpha) * nu), rng.random())


@dataclass(frozen=True)
class PolicyConfig:
    """Scheduling policy and its parameters.

    ``alpha`` defaults to ``chernoff_alpha(C, delta)``; ``delta`` defaults to
    T^-0.5. ``expectation_capacity`` inflates the normalizer by
    max{1, C / C_E}. ``nu_multiplier`` scales the default 2 H_t normalizer.
    """

    policy: str = BERNOULLI
    alpha: float | None = None
    delta: float | None = None
    p: float | None = None
    expectation_capacity: float | None = None
    nu_multiplier: float = 1.0
    d_max: int | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.policy == FIXED_P and (self.p is None or not 0.0 < self.p <= 1.0):
            raise ValueError("fixed_p needs p in (0, 1]")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("Chernoff parameter must be positive")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.expectation_capacity is not None and self.expectation_capacity <= 0:
            raise ValueError("expectation capacity must be positive")
        if self.nu_multiplier < 1.0:
            raise ValueError("normalizer must dominate 2 H_t (multiplier >= 1)")

    def resolved(self, C: int, T: int) -> "PolicyConfig":
        """Fill in delta and alpha, checking the overflow condition."""
        if self.policy == FIXED_P:
            return self
        delta = self.delta if self.delta is not None else T ** -0.5
        if delta >= 1.0:
            delta = 0.5
        alpha = self.alpha if self.alpha is not None else chernoff_alpha(C, delta)
        if not overflow_condition_holds(alpha, delta, C):
            raise ValueError(
                f"alpha={alpha} violates the overflow condition for C={C}, delta={delta}"
            )
        return replace(self, alpha=alpha, delta=delta)

    def multiplier(self, C: int) -> float:
        m = self.nu_multiplier
        if self.expectation_capacity is not None:
            m *= max(1.0, C / self.expectation_capacity)
        return m


# ---------------------------------------------------------------------------
# Reference per-round implementation
# ---------------------------------------------------------------------------


@dataclass
class SchedulerDecision:
    admit: bool
    p: float | None
    proxy_delay: int | None = None
    scale: float | None = None


@dataclass
class ObservationEvent:
    round: int
    delay: int
    p: float
    payload: object = None


class TrackingSet:
    """Rounds currently tracked, at most ``capacity`` of them.

    Entries map a round to its feedback round ``s + d_s`` and an optional
    proxy-expiry round. Preempted rounds are remembered and may never re-enter.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: dict[int, tuple[int, int | None]] = {}
        self.preempted: set[int] = set()
        self.delivered: set[int] = set()
        self.max_occupancy = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, s):
        return s in self.entries

    @property
    def full(self):
        return len(self.entries) >= self.capacity

    def add(self, s: int, expiry: int, proxy_expiry: int | None = None):
        if self.full:
            raise InvariantViolation(f"capacity {self.capacity} exceeded adding round {s}")
        if s in self.entries or s in self.preempted or s in self.delivered:
            raise InvariantViolation(f"round {s} cannot re-enter the tracking set")
        self.entries[s] = (expiry, proxy_expiry)
        self.max_occupancy = max(self.max_occupancy, len(self.entries))

    def expire(self, t: int) -> list[int]:
        """Remove and return rounds whose feedback arrives at ``t``."""
        done = sorted(s for s, (e, _) in self.entries.items() if e == t)
        for s in done:
            if s in self.delivered:
                raise InvariantViolation(f"round {s} delivered twice")
            del self.entries[s]
            self.delivered.add(s)
        return done

    def preempt_expired(self, t: int) -> list[int]:
        """Remove rounds whose proxy delay runs out at ``t``."""
        gone = sorted(s for s, (_, q) in self.entries.items() if q is not None and q == t)
        for s in gone:
            del self.entries[s]
            self.preempted.add(s)
        return gone


class _SchedulerBase:
    def __init__(self, capacity: int, rng: np.random.Generator):
        self.S = TrackingSet(capacity)
        self.rng = rng
        self.log: list[tuple[int, int, bool]] = []
        self._p: dict[int, float] = {}

    @property
    def capacity(self):
        return self.S.capacity

    def _record(self, t, admitted):
        self.log.append((t, len(self.S) - int(admitted), admitted))

    def tick(self, t: int) -> list[ObservationEvent]:
        """Deliver feedback due at ``t``, then apply preemptions."""
        events = []
        for s in self.S.expire(t):
            events.append(ObservationEvent(round=s, delay=t - s, p=self._prob_at_delivery(s, t - s)))
        self.preempted_now = self.S.preempt_expired(t)
        return events

    def _prob_at_delivery(self, s, d):
        return self._p[s]


class BernoulliScheduler(_SchedulerBase):
    """Clairvoyant, non-preemptive: track round t with probability p_t if |S| < C."""

    def __init__(self, capacity, alpha, rng, nu_multiplier=1.0):
        super().__init__(capacity, rng)
        self.alpha = alpha
        self.mult = nu_multiplier
        self._H = 0.0

    def step(self, t: int, delay: int) -> SchedulerDecision:
        self._H += 1.0 / t
        nu = 2.0 * self._H * self.mult
        p = min(1.0, self.capacity / ((1.0 + self.alpha) * nu * (delay + 1)))
        u = self.rng.random()
        admit = (not self.S.full) and u < p
        if admit:
            self.S.add(t, t + delay)
            self._p[t] = p
        self._record(t, admit)
        return SchedulerDecision(admit=admit, p=p)


class FixedPScheduler(_SchedulerBase):
    """Non-clairvoyant, non-preemptive, constant admission probability."""

    def __init__(self, capacity, p, rng):
        super().__init__(capacity, rng)
        if not 0.0 < p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        self.p = p

    def step(self, t: int, delay: int) -> SchedulerDecision:
        # delay is only recorded as the environment's delivery time
        u = self.rng.random()
        admit = (not self.S.full) and u < self.p
        if admit:
            self.S.add(t, t + delay)
            self._p[t] = self.p
        self._record(t, admit)
        return SchedulerDecision(admit=admit, p=self.p)


class ProxyDelayScheduler(_SchedulerBase):
    """Non-clairvoyant, preemptive, with Pareto proxy delays.

    The admission decision uses only the proxy draw and the set size; the
    true delay enters only as the environment's delivery time, and the
    quantifying probability is reconstructed when feedback arrives.
    """

    def __init__(self, capacity, alpha, rng, nu_multiplier=1.0):
        super().__init__(capacity, rng)
        self.alpha = alpha
        self.mult = nu_multiplier
        self._H = 0.0
        self._scale: dict[int, float] = {}

    def step(self, t: int, delay: int) -> SchedulerDecision:
        self._H += 1.0 / t
        nu = 2.0 * self._H * self.mult
        c = self.capacity / ((1.0 + self.alpha) * nu)
        dt = proxy_delay_from_uniform(c, self.rng.random())
        admit = (not self.S.full) and dt >= 0
        if admit:
            self.S.add(t, t + delay, t + dt if dt < delay else None)
            self._scale[t] = c
        self._record(t, admit)
        return SchedulerDecision(admit=admit, p=None, proxy_delay=dt, scale=c)

    def _prob_at_delivery(self, s, d):
        return min(1.0, self._scale[s] / (d + 1))


def make_scheduler(policy: PolicyConfig, C: int, T: int, rng):
    """Stateful scheduler for a resolved or unresolved policy."""
    policy = policy.resolved(C, T)
    if policy.policy == FIXED_P:
        return FixedPScheduler(C, policy.p, rng)
    cls = ProxyDelayScheduler if policy.policy == PROXY else BernoulliScheduler
    return cls(C, policy.alpha, rng, nu_multiplier=policy.multiplier(C))


# ---------------------------------------------------------------------------
# Whole-run kernel
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    """Outcome of one scheduler run over an instance (rounds are 1-based).

    ``prob[t-1]`` is the quantifying probability of round t (known to the
    learner at round t for clairvoyant/fixed policies, at delivery for the
    proxy policy). ``leave[t-1]`` is the round at whose end t left the set,
    ``NEVER`` if it was never admitted or stayed past the horizon.
    """

    capacity: int
    policy: PolicyConfig
    admitted: np.ndarray
    observed: np.ndarray
    prob: np.ndarray
    scale: np.ndarray
    proxy: np.ndarray
    leave: np.ndarray
    occupancy0: np.ndarray
    occupancy1: np.ndarray
    _by_arrival: tuple | None = field(default=None, repr=False)

    @property
    def horizon(self):
        return self.admitted.shape[0]

    @property
    def max_occupancy(self):
        return int(self.occupancy1.max()) if self.horizon else 0

    @property
    def overflow_count(self):
        return int(np.count_nonzero(self.occupancy0 >= self.capacity))

    def deliveries(self, delays):
        """(arrival round, source round) pairs sorted by arrival then source."""
        if self._by_arrival is None:
            s = np.flatnonzero(self.observed) + 1
            arrival = s + np.asarray(delays)[s - 1]
            order = np.lexsort((s, arrival))
            self._by_arrival = (arrival[order], s[order])
        return self._by_arrival

    def preemptions(self):
        """(preemption round, source round) for rounds dropped before feedback."""
        s = np.flatnonzero(self.admitted & ~self.observed & (self.leave != NEVER)) + 1
        r = self.leave[s - 1]
        order = np.lexsort((s, r))
        return r[order], s[order]


@numba.njit(cache=True)
def _schedule_kernel(kind, delays, C, prob, scale, uniforms, admitted, observed, proxy, leave, occ0, occ1):
    T = delays.shape[0]
    release = np.zeros(T + 2, dtype=np.int64)
    occ = 0
    for i in range(T):
        t = i + 1
        occ0[i] = occ
        d = delays[i]
        adm = False
        if kind == 1:
            v = math.floor(scale[i] / (1.0 - uniforms[i]) - 1.0)
            dt = NEVER if v >= NEVER else np.int64(v)
            proxy[i] = dt
            adm = occ < C and dt >= 0
        else:
            adm = occ < C and uniforms[i] < prob[i]
        admitted[i] = adm
        if adm:
            occ += 1
            if kind == 1 and proxy[i] < d:
                r = t + proxy[i]
                observed[i] = False
            else:
                r = t + d
                observed[i] = r <= T
            if r <= T:
                release[r] += 1
                leave[i] = r
            else:
                leave[i] = NEVER
        else:
            leave[i] = NEVER
        occ1[i] = occ
        if occ > C:
            return False
        occ -= release[t]
    return True


def schedule_parameters(policy: PolicyConfig, delays, C: int):
    """Per-round (prob, scale) arrays for a resolved policy."""
    delays = np.asarray(delays, dtype=np.int64)
    T = delays.shape[0]
    if policy.policy == FIXED_P:
        prob = np.full(T, float(policy.p))
        return prob, np.zeros(T)
    nu = normalizers(T, policy.multiplier(C))
    scale = C / ((1.0 + policy.alpha) * nu)
    prob = np.minimum(1.0, C / ((1.0 + policy.alpha) * nu * (delays + 1)))
    return prob, scale


def simulate_schedule(delays, C: int, policy: PolicyConfig, uniforms=None, rng=None, params=None) -> Schedule:
    """Run a policy over a whole delay sequence with one uniform per round.

    ``uniforms`` may be passed directly; otherwise they are drawn from ``rng``.
    ``params`` lets callers reuse :func:`schedule_parameters` across runs.
    """
    delays = np.ascontiguousarray(delays, dtype=np.int64)
    T = delays.shape[0]
    policy = policy.resolved(C, T)
    if uniforms is None:
        uniforms = rng.random(T)
    prob, scale = params if params is not None else schedule_parameters(policy, delays, C)
    admitted = np.zeros(T, dtype=np.bool_)
    observed = np.zeros(T, dtype=np.bool_)
    proxy = np.full(T, -1, dtype=np.int64)
    leave = np.empty(T, dtype=np.int64)
    occ0 = np.empty(T, dtype=np.int64)
    occ1 = np.empty(T, dtype=np.int64)
    ok = _schedule_kernel(
        _KIND[policy.policy], delays, int(C), prob, scale, np.ascontiguousarray(uniforms),
        admitted, observed, proxy, leave, occ0, occ1,
    )
    if not ok:
        raise InvariantViolation(f"tracking set exceeded capacity {C}")
    if policy.policy == PROXY:
        # quantifying probability Pr(proxy >= d_t); the learner reads it only on delivery
        prob = np.minimum(1.0, scale / (delays + 1))
    return Schedule(
        capacity=int(C), policy=policy, admitted=admitted, observed=observed, prob=prob,
        scale=scale, proxy=proxy, leave=leave, occupancy0=occ0, occupancy1=occ1,
    )


def monte_carlo_schedules(delays, C, policy: PolicyConfig, n_runs, base_seed, rounds):
    """Scheduler-only Monte Carlo over independent runs.

    Returns a dict of (n_runs x len(rounds)) matrices ``occupancy0``,
    ``occupancy1``, ``observed`` sampled at the given 1-based rounds, plus
    per-run ``max_occupancy`` and ``overflow_count``. Run ``i`` uses the
    scheduler stream of master seed ``run_seed(base_seed, i)``, the same
    stream a full learner run with that seed would use.
    """
    delays = np.ascontiguousarray(delays, dtype=np.int64)
    T = delays.shape[0]
    policy = policy.resolved(C, T)
    params = schedule_parameters(policy, delays, C)
    idx = np.asarray(rounds, dtype=np.int64) - 1
    out = {
        "occupancy0": np.empty((n_runs, idx.size), dtype=np.int64),
        "occupancy1": np.empty((n_runs, idx.size), dtype=np.int64),
        "observed": np.empty((n_runs, idx.size), dtype=np.bool_),
        "max_occupancy": np.empty(n_runs, dtype=np.int64),
        "overflow_count": np.empty(n_runs, dtype=np.int64),
    }
    for i in range(n_runs):
        gen = rngmod.stream(rngmod.run_seed(base_seed, i), rngmod.SCHEDULER)
        sch = simulate_schedule(delays, C, policy, uniforms=gen.random(T), params=params)
        out["occupancy0"][i] = sch.occupancy0[idx]
        out["occupancy1"][i] = sch.occupancy1[idx]
        out["observed"][i] = sch.observed[idx]
        out["max_occupancy"][i] = sch.max_occupancy
        out["overflow_count"][i] = sch.overflow_count
    return out


def write_schedule_csv(schedule: Schedule, delays, path, comment=""):
    """Trace ``t,occupancy,admitted,observed_round`` (observed_round = -1 if none)."""
    delays = np.asarray(delays)
    with open(path, "w") as fh:
        fh.write(f"# schedule-trace v1 {comment}".rstrip() + "\n")
        fh.write("t,occupancy,admitted,observed_round\n")
        for i in range(schedule.horizon):
            t = i + 1
            obs = t + int(delays[i]) if schedule.observed[i] else -1
            fh.write(f"{t},{int(schedule.occupancy0[i])},{int(schedule.admitted[i])},{obs}\n")
