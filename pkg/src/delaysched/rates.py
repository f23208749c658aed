"""Learning-rate schedules for delayed FTRL and their offline audit.

Rates are emitted as inverse values ``(inv_alpha, inv_beta)``, the weights of
the Tsallis and negative-entropy parts. Logarithms are natural. A policy is
driven by the learner through three calls per unit (a round, or a batch for
the batched learner):

* ``start(t)`` returns the rates used to play unit ``t``;
* ``issue(t)`` marks unit ``t`` as played;
* ``deliver(s)`` reports that feedback of unit ``s`` has arrived.

Clairvoyant quantities (delays, inverse probabilities) are bound up front via
``bind``. Every policy records what it emitted in a :class:`RateTranscript`,
which :func:`rate_check` audits by recomputing the rates from raw per-unit
data with vectorized code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from delaysched.schedulers import normalizers

BANDIT = "bandit"
FULLINFO = "fullinfo"
REGIMES = (BANDIT, FULLINFO)

POLICY_REGIME = {
    "batch_bandit": BANDIT,
    "batch_fullinfo": FULLINFO,
    "cnp_bandit": BANDIT,
    "cnp_fullinfo": FULLINFO,
    "ncp_bandit": BANDIT,
    "ncp_fullinfo": FULLINFO,
    "fixed_const": None,
    "baseline_seldin": None,
}

# which rate families each scheduling policy may be paired with
PAIRINGS = {
    "bernoulli_clairvoyant": ("cnp",),
    "expectation_capacity_variant": ("cnp",),
    "pareto_proxy": ("ncp",),
    "fixed_p": ("fixed_const",),
}


def check_regime(regime):
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")


def check_pairing(policy: str, rate_policy: str, regime: str):
    """Reject scheduler/rate combinations not covered by a regret guarantee."""
    check_regime(regime)
    if rate_policy not in POLICY_REGIME:
        raise ValueError(f"unknown rate policy {rate_policy!r}")
    want = POLICY_REGIME[rate_policy]
    if want is not None and want != regime:
        raise ValueError(f"rate policy {rate_policy} is for the {want} regime, not {regime}")
    allowed = PAIRINGS.get(policy)
    if allowed is None:
        raise ValueError(f"unknown scheduling policy {policy!r}")
    if not any(rate_policy == a or rate_policy.startswith(a + "_") for a in allowed):
        raise ValueError(f"scheduling policy {policy} cannot be paired with rates {rate_policy}")


def mu_sequence(delays, C, alpha, nu):
    """mu_t = max{1, (1 + alpha) nu_t (d_t + 1) / C}, the inverse observation probability."""
    return np.maximum(1.0, (1.0 + alpha) * nu * (np.asarray(delays) + 1) / C)


@dataclass
class RateTranscript:
    """Rates emitted online, plus the parameters needed to recompute them."""

    policy: str
    regime: str
    num_actions: int
    params: dict = field(default_factory=dict)
    inv_alpha: list = field(default_factory=list)
    inv_beta: list = field(default_factory=list)

    def arrays(self):
        return np.asarray(self.inv_alpha, dtype=np.float64), np.asarray(self.inv_beta, dtype=np.float64)


class RatePolicy:
    name = ""

    def __init__(self, num_actions: int, regime: str, **params):
        check_regime(regime)
        if num_actions < 2:
            raise ValueError("need K >= 2")
        self.K = num_actions
        self.regime = regime
        self.log_k = math.log(num_actions)
        self.transcript = RateTranscript(self.name, regime, num_actions, dict(params))
        self.issued = 0
        self.delivered = 0

    def bind(self, **arrays):
        """Attach per-unit quantities known to the learner in advance."""
        self.data = arrays
        return self

    def start(self, t: int):
        a, b = self._rates(t)
        self.transcript.inv_alpha.append(a)
        self.transcript.inv_beta.append(b)
        return a, b

    def issue(self, t: int):
        self.issued += 1

    def deliver(self, s: int):
        self.delivered += 1

    def _entropy(self, acc):
        # zero accumulator: drop the entropy part (bandit) or floor it at one
        # unit of mass (full-info, where nothing else regularizes)
        if acc > 0:
            return math.sqrt(acc / self.log_k)
        return 0.0 if self.regime == BANDIT else math.sqrt(1.0 / self.log_k)

    def _rates(self, t):
        raise NotImplementedError


class SeldinRates(RatePolicy):
    """Unlimited-capacity rates: inv_alpha = sqrt(t), inv_beta = sqrt(sum_{s<=t} d_s / ln K).

    Full information uses inv_beta = sqrt(sum_{s<=t} (1 + d_s) / ln K).
    """

    name = "baseline_seldin"

    def __init__(self, num_actions, regime, **params):
        super().__init__(num_actions, regime, **params)
        self.acc = 0

    def _rates(self, t):
        d = int(self.data["delays"][t - 1])
        if self.regime == BANDIT:
            self.acc += d
            return math.sqrt(t), self._entropy(self.acc)
        self.acc += 1 + d
        return 0.0, self._entropy(self.acc)


class BatchRates(RatePolicy):
    """inv_alpha = sqrt(tau), inv_beta = sqrt(D_tau / ln K) with D_tau the running pending count.

    Full information: inv_beta = sqrt((tau + D_tau) / ln K).
    """

    name = "batch"

    def __init__(self, num_actions, regime, **params):
        self.name = "batch_" + regime
        super().__init__(num_actions, regime, **params)
        self.D = 0

    def _rates(self, tau):
        self.D += self.issued - self.delivered
        if self.regime == BANDIT:
            return math.sqrt(tau), self._entropy(self.D)
        return 0.0, self._entropy(tau + self.D)


class CNPRates(RatePolicy):
    """Clairvoyant rates from sum_{s<=t} mu_s and sum_{s<=t} d_s."""

    name = "cnp"

    def __init__(self, num_actions, regime, **params):
        self.name = "cnp_" + regime
        super().__init__(num_actions, regime, **params)
        self.mu_sum = 0.0
        self.d_sum = 0
        self.acc = 0.0

    def _rates(self, t):
        mu = float(self.data["mu"][t - 1])
        d = int(self.data["delays"][t - 1])
        if self.regime == BANDIT:
            self.mu_sum += mu
            self.d_sum += d
            return math.sqrt(self.mu_sum), self._entropy(self.d_sum)
        self.acc += mu + d
        return 0.0, self._entropy(self.acc)


class NCPRates(RatePolicy):
    """Non-clairvoyant rates from delivered rounds plus the C * mu_max,t corrections."""

    name = "ncp"

    def __init__(self, num_actions, regime, *, C, alpha, d_max, nu_multiplier=1.0, **params):
        self.name = "ncp_" + regime
        super().__init__(
            num_actions, regime, C=C, alpha=alpha, d_max=d_max, nu_multiplier=nu_multiplier, **params
        )
        self.C = C
        self.alpha = alpha
        self.d_max = d_max
        self.mult = nu_multiplier
        self._H = 0.0
        self.zz = 0.0
        self.zd = 0.0
        self.zzd = 0.0

    def deliver(self, s):
        super().deliver(s)
        z = float(self.data["mu"][s - 1])
        d = int(self.data["delays"][s - 1])
        self.zz += z * z
        self.zd += z * d
        self.zzd += z * (z + d)

    def _rates(self, t):
        self._H += 1.0 / t
        nu = 2.0 * self._H * self.mult
        mm = max(1.0, (1.0 + self.alpha) * nu * (self.d_max + 1) / self.C)
        if self.regime == BANDIT:
            a = math.sqrt(self.zz + self.C * (mm * mm))
            return a, self._entropy(self.zd + self.C * mm * self.d_max)
        return 0.0, self._entropy(self.zzd + self.C * mm * (mm + self.d_max))


class FixedRates(RatePolicy):
    name = "fixed_const"

    def __init__(self, num_actions, regime, *, inv_alpha, inv_beta, **params):
        super().__init__(num_actions, regime, inv_alpha=inv_alpha, inv_beta=inv_beta, **params)
        self.a = float(inv_alpha) if regime == BANDIT else 0.0
        self.b = float(inv_beta)

    def _rates(self, t):
        return self.a, self.b


def fixed_p_parameters(C, T, K, D, regime):
    """(p, inv_alpha, inv_beta) for the fixed-probability scheduler with known T and D.

    Bandit: p = (C^2 T K / (D+T)^2)^(1/3), alpha = (C sqrt(K) / (T (D+T)))^(1/3),
    beta = sqrt(ln K / (D+T)). Full information: p = (C^2 T ln K / (D+T)^2)^(1/3),
    beta = (C ln^2 K / (T (D+T)))^(1/3). ``p`` is clipped to 1.
    """
    check_regime(regime)
    lk = math.log(K)
    if regime == BANDIT:
        p = (C * C * T * K / (D + T) ** 2) ** (1.0 / 3.0)
        alpha = (C * math.sqrt(K) / (T * (D + T))) ** (1.0 / 3.0)
        beta = math.sqrt(lk / (D + T))
        return min(1.0, p), 1.0 / alpha, 1.0 / beta
    p = (C * C * T * lk / (D + T) ** 2) ** (1.0 / 3.0)
    beta = (C * lk * lk / (T * (D + T))) ** (1.0 / 3.0)
    return min(1.0, p), 0.0, 1.0 / beta


def make_rate_policy(name: str, num_actions: int, regime: str, **params) -> RatePolicy:
    """Construct a rate policy by id.

    ``ncp_*`` needs ``C``, ``alpha``, ``d_max`` (and optionally
    ``nu_multiplier``); ``fixed_const`` needs ``inv_alpha`` and ``inv_beta``.
    """
    if name not in POLICY_REGIME:
        raise ValueError(f"unknown rate policy {name!r}")
    want = POLICY_REGIME[name]
    if want is not None and want != regime:
        raise ValueError(f"rate policy {name} is for the {want} regime, not {regime}")
    if name == "baseline_seldin":
        return SeldinRates(num_actions, regime, **params)
    if name.startswith("batch_"):
        return BatchRates(num_actions, regime, **params)
    if name.startswith("cnp_"):
        return CNPRates(num_actions, regime, **params)
    if name.startswith("ncp_"):
        return NCPRates(num_actions, regime, **params)
    return FixedRates(num_actions, regime, **params)


# ---------------------------------------------------------------------------
# Offline audit
# ---------------------------------------------------------------------------


@dataclass
class RateReport:
    ok: bool
    units: int
    first_mismatch: int | None = None
    first_decrease: int | None = None
    message: str = ""


def _entropy_vec(acc, log_k, regime):
    acc = np.asarray(acc, dtype=np.float64)
    floor = 0.0 if regime == BANDIT else math.sqrt(1.0 / log_k)
    out = np.full(acc.shape, floor)
    pos = acc > 0
    out[pos] = np.sqrt(acc[pos] / log_k)
    return out


def _delivered_prefix(values, src, arrival, n):
    """Running sums of ``values`` over units delivered strictly before unit t.

    Events are added in delivery order (arrival, then source), which is the
    order the online accumulators see them, so the sums agree bit for bit.
    """
    order = np.lexsort((src, arrival))
    csum = np.concatenate(([0.0], np.cumsum(np.asarray(values, dtype=np.float64)[order])))
    counts = np.searchsorted(arrival[order], np.arange(1, n + 1), side="left")
    return csum[counts], counts


def recompute_rates(transcript: RateTranscript, delays, observed):
    """Rates implied by the raw per-unit data (delays and delivery mask).

    ``observed[s-1]`` says whether feedback of unit s was delivered; its
    arrival unit is ``s + delays[s-1]``, counted from the next unit on.
    """
    p = transcript.params
    regime = transcript.regime
    log_k = math.log(transcript.num_actions)
    delays = np.asarray(delays, dtype=np.int64)
    observed = np.asarray(observed, dtype=bool)
    n = delays.shape[0]
    t = np.arange(1, n + 1)
    name = transcript.policy
    zero = np.zeros(n)

    if name == "fixed_const":
        a = np.full(n, float(p["inv_alpha"]) if regime == BANDIT else 0.0)
        return a, np.full(n, float(p["inv_beta"]))

    if name == "baseline_seldin":
        if regime == BANDIT:
            return np.sqrt(t.astype(np.float64)), _entropy_vec(np.cumsum(delays), log_k, regime)
        return zero, _entropy_vec(np.cumsum(1 + delays), log_k, regime)

    if name.startswith("batch_"):
        # sigma_tau = #{s < tau not yet delivered by the end of unit tau - 1}
        src = np.flatnonzero(observed) + 1
        arrival = src + delays[src - 1]
        delivered_before = np.searchsorted(np.sort(arrival), t, side="left")
        sigma = (t - 1) - delivered_before
        D = np.cumsum(sigma)
        if regime == BANDIT:
            return np.sqrt(t.astype(np.float64)), _entropy_vec(D, log_k, regime)
        return zero, _entropy_vec(t + D, log_k, regime)

    nu = normalizers(n, p.get("nu_multiplier", 1.0))
    if name.startswith("cnp_"):
        mu = mu_sequence(delays, p["C"], p["alpha"], nu)
        if regime == BANDIT:
            return np.sqrt(np.cumsum(mu)), _entropy_vec(np.cumsum(delays), log_k, regime)
        return zero, _entropy_vec(np.cumsum(mu + delays), log_k, regime)

    if name.startswith("ncp_"):
        C, alpha, d_max = p["C"], p["alpha"], p["d_max"]
        mu = mu_sequence(delays, C, alpha, nu)
        src = np.flatnonzero(observed) + 1
        arrival = src + delays[src - 1]
        z, d = mu[src - 1], delays[src - 1]
        mm = np.maximum(1.0, (1.0 + alpha) * nu * (d_max + 1) / C)
        if regime == BANDIT:
            zz, _ = _delivered_prefix(z * z, src, arrival, n)
            zd, _ = _delivered_prefix(z * d, src, arrival, n)
            return np.sqrt(zz + C * (mm * mm)), _entropy_vec(zd + C * mm * d_max, log_k, regime)
        zzd, _ = _delivered_prefix(z * (z + d), src, arrival, n)
        return zero, _entropy_vec(zzd + C * mm * (mm + d_max), log_k, regime)

    raise ValueError(f"unknown rate policy {name!r}")


def rate_check(transcript: RateTranscript, delays, observed) -> RateReport:
    """Compare online rates with an offline recomputation and check monotonicity.

    ``delays``/``observed`` are per unit (rounds, or batch delays for the
    batched learner). Equality is exact.
    """
    a_on, b_on = transcript.arrays()
    a_off, b_off = recompute_rates(transcript, delays, observed)
    n = a_on.shape[0]
    if a_off.shape[0] != n:
        return RateReport(False, n, 1, None, f"transcript has {n} units, data has {a_off.shape[0]}")
    bad = np.flatnonzero((a_on != a_off) | (b_on != b_off))
    dec = np.flatnonzero((np.diff(a_on) < 0) | (np.diff(b_on) < 0))
    mismatch = int(bad[0]) + 1 if bad.size else None
    decrease = int(dec[0]) + 2 if dec.size else None
    msg = []
    if mismatch is not None:
        i = mismatch - 1
        msg.append(
            f"unit {mismatch}: online ({a_on[i]!r}, {b_on[i]!r}) vs offline ({a_off[i]!r}, {b_off[i]!r})"
        )
    if decrease is not None:
        msg.append(f"inverse rate decreases at unit {decrease}")
    return RateReport(not msg, n, mismatch, decrease, "; ".join(msg))
