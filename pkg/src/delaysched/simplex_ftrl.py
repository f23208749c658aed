"""FTRL over the probability simplex with a hybrid 1/2-Tsallis + negative-entropy regularizer.

The per-round point is

    x = argmin_x <x, L> + inv_alpha * F_Ts(x) + inv_beta * F_NE(x),
    F_Ts(x) = -sum 2 sqrt(x_i),  F_NE(x) = sum x_i log x_i.

Stationarity gives f'(x_i) = lam - L_i with the strictly increasing
f'(x) = -inv_alpha / sqrt(x) + inv_beta (log x + 1). Each coordinate is
recovered by inverting f' in log space (u = log x), and ``lam`` by a
safeguarded Newton iteration on the increasing convex map
lam -> sum_i x_i(lam).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

OUTER_MAX_ITER = 200
INNER_MAX_ITER = 200
SUM_TOL = 1e-10
KKT_TOL = 1e-8
PROB_FLOOR = 1e-15

_OK = 0
_NO_CONVERGE = 1


class SolverError(RuntimeError):
    """The argmin could not be certified within the iteration budget."""


@dataclass(frozen=True)
class RegWeights:
    """Inverse learning rates. ``inv_alpha = 0`` disables the Tsallis part.

    ``inv_beta = 0`` is accepted only together with a positive ``inv_alpha``
    (the entropy part is switched off until its rate accumulator is positive).
    """

    inv_alpha: float
    inv_beta: float

    def __post_init__(self):
        a, b = self.inv_alpha, self.inv_beta
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError("inverse learning rates must be finite")
        if a < 0 or b < 0:
            raise ValueError("inverse learning rates must be non-negative")
        if a == 0 and b == 0:
            raise ValueError("at least one regularizer must be active")


@numba.njit(cache=True)
def _h(u, a, b):
    # f'(e^u)
    return -a * math.exp(-0.5 * u) + b * (u + 1.0)


@numba.njit(cache=True)
def _inv_fprime(y, a, b):
    """Return (u, status) with f'(e^u) = y."""
    if a == 0.0:
        return y / b - 1.0, _OK
    if b == 0.0:
        # pure Tsallis; callers keep y < 0
        return 2.0 * math.log(a / -y), _OK
    # certified lower bound on the root: the entropy-only root always lies
    # left of it, and so does min(Tsallis-only root, -1)
    u_ne = y / b - 1.0
    u_ts = 2.0 * math.log(a / -y) if y < 0.0 else math.inf
    u = max(u_ne, min(u_ts, -1.0))
    lo = u
    hi = math.inf
    # h is increasing and concave in u, so Newton from the left of the root
    # increases monotonically; the bracket only guards against rounding
    for _ in range(INNER_MAX_ITER):
        e = math.exp(-0.5 * u)
        r = -a * e + b * (u + 1.0) - y
        if r == 0.0:
            return u, _OK
        if r < 0.0:
            lo = u
        else:
            hi = u
        un = u - r / (0.5 * a * e + b)
        if un == u:
            return u, _OK
        if un <= lo or un >= hi:
            # only reachable after a rounding overshoot, when hi is finite
            un = 0.5 * (lo + hi)
        if abs(un - u) <= 4e-16 * max(1.0, abs(u)):
            return un, _OK
        u = un
    return u, _NO_CONVERGE


@numba.njit(cache=True)
def _solve_kernel(L, a, b, x, u):
    """Fill ``x`` (and log-probabilities ``u``); return (status, lam, iters)."""
    K = L.shape[0]
    lmin = L[0]
    for i in range(1, K):
        if L[i] < lmin:
            lmin = L[i]
    # shift so the leader has zero cumulative loss; the argmin is invariant
    # x_i(lam) <= x_leader(lam), so sum(x) is <= 1 at f'(1/K) and >= 1 at f'(1)
    lam_lo = _h(-math.log(K), a, b)
    lam_hi = _h(0.0, a, b)
    lam = lam_hi
    for it in range(OUTER_MAX_ITER):
        s = 0.0
        ds = 0.0
        for i in range(K):
            ui, st = _inv_fprime(lam - (L[i] - lmin), a, b)
            if st != _OK:
                return _NO_CONVERGE, lam, it
            u[i] = ui
            xi = math.exp(ui)
            x[i] = xi
            s += xi
            if xi > 0.0:
                ds += xi / (0.5 * a * math.exp(-0.5 * ui) + b)
        phi = s - 1.0
        if abs(phi) <= 1e-13:
            return _OK, lam + lmin, it
        if phi > 0.0:
            lam_hi = lam
        else:
            lam_lo = lam
        # sum x_i(lam) is convex increasing: Newton from the right stays right
        nl = lam - phi / ds if ds > 0.0 else lam_lo
        if not (lam_lo < nl < lam_hi):
            nl = 0.5 * (lam_lo + lam_hi)
        if nl == lam:
            break
        lam = nl
    s = 0.0
    for i in range(K):
        s += x[i]
    if abs(s - 1.0) <= SUM_TOL:
        return _OK, lam + lmin, OUTER_MAX_ITER
    return _NO_CONVERGE, lam + lmin, OUTER_MAX_ITER


def solve_raw(L, inv_alpha, inv_beta):
    """Fast path used inside simulation loops (no input validation)."""
    K = L.shape[0]
    x = np.empty(K)
    u = np.empty(K)
    status, _, _ = _solve_kernel(L, inv_alpha, inv_beta, x, u)
    if status != _OK:
        raise SolverError(
            f"FTRL argmin did not converge (inv_alpha={inv_alpha}, inv_beta={inv_beta}, L={L.tolist()})"
        )
    return x


def kkt_residual(x, L, inv_alpha, inv_beta):
    """Spread of f'(x_i) + L_i across coordinates (zero at the exact argmin).

    Coordinates that underflowed (zero or subnormal, where log x has lost
    most of its bits) are skipped.
    """
    x = np.asarray(x, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    pos = x >= np.finfo(np.float64).tiny
    xp = x[pos]
    g = -inv_alpha / np.sqrt(xp) + inv_beta * (np.log(xp) + 1.0) + L[pos]
    return float(g.max() - g.min())


def solve(L, weights: RegWeights, *, certify=True):
    """Minimize ``<x, L> + inv_alpha F_Ts(x) + inv_beta F_NE(x)`` over the simplex.

    Raises :class:`SolverError` if the iteration budget is exhausted or the
    result fails its certificate (simplex sum within 1e-10, KKT spread within
    1e-8 relative to the scale of ``L``).
    """
    L = np.ascontiguousarray(L, dtype=np.float64)
    if L.ndim != 1 or L.shape[0] < 2:
        raise ValueError("L must be a vector with K >= 2 entries")
    if not np.all(np.isfinite(L)):
        raise ValueError("cumulative loss estimate must be finite")
    a, b = float(weights.inv_alpha), float(weights.inv_beta)
    x = solve_raw(L, a, b)
    if certify:
        total = float(x.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise SolverError(f"simplex sum {total!r} off by more than {SUM_TOL}")
        scale = max(1.0, float(np.abs(L - L.min()).max()))
        res = kkt_residual(x, L, a, b)
        if res > KKT_TOL * scale:
            raise SolverError(f"KKT residual {res:.3e} exceeds {KKT_TOL * scale:.3e}")
    return x


def sample_action(x, rng_or_uniform):
    """Draw index ``i`` with probability ``x[i]``.

    Accepts a numpy Generator (one uniform is consumed) or a uniform in [0, 1)
    drawn by the caller.
    """
    v = rng_or_uniform.random() if hasattr(rng_or_uniform, "random") else float(rng_or_uniform)
    return _sample(np.asarray(x, dtype=np.float64), v)


@numba.njit(cache=True)
def _sample(x, v):
    target = v * x.sum()
    acc = 0.0
    K = x.shape[0]
    for i in range(K):
        acc += x[i]
        if target < acc:
            return i
    # rounding can leave target == acc at the top; return the last positive entry
    for i in range(K - 1, -1, -1):
        if x[i] > 0.0:
            return i
    return K - 1


def bandit_estimator(loss, action, x_at_play, p, num_actions=None):
    """Importance-weighted estimate ``loss / (x_a * p) * e_a``."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"observation probability must lie in (0, 1], got {p}")
    x_at_play = np.asarray(x_at_play, dtype=np.float64)
    K = x_at_play.shape[0] if num_actions is None else num_actions
    est = np.zeros(K)
    est[action] = loss / (max(float(x_at_play[action]), PROB_FLOOR) * p)
    return est


def fullinfo_estimator(loss_vec, p):
    if not 0.0 < p <= 1.0:
        raise ValueError(f"observation probability must lie in (0, 1], got {p}")
    return np.asarray(loss_vec, dtype=np.float64) / p
