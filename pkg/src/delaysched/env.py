"""Problem instances: oblivious loss matrices and delay sequences.

Rounds are 1-based in every public quantity (``sigma[t-1]`` is the number
of outstanding delays at round ``t``); arrays are plain 0-based numpy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from delaysched import rng as rngmod

DELAY_KINDS = ("fixed_delay", "iid_delay", "explicit_delay")
LOSS_KINDS = ("stochastic_gap_loss", "adversarial_drift_loss", "explicit_loss")
IID_DISTRIBUTIONS = ("geometric", "uniform")


@dataclass(frozen=True, eq=False)
class Instance:
    """Pre-committed adversary: ``losses`` is T x K in [0, 1], ``delays`` has length T."""

    losses: np.ndarray
    delays: np.ndarray

    def __post_init__(self):
        losses = np.array(self.losses, dtype=np.float64, order="C")
        delays = np.array(self.delays, dtype=np.int64)
        if losses.ndim != 2:
            raise ValueError("losses must be a T x K matrix")
        T, K = losses.shape
        if T < 1:
            raise ValueError("horizon T must be >= 1")
        if K < 2:
            raise ValueError("need at least K = 2 actions")
        if delays.shape != (T,):
            raise ValueError(f"expected {T} delays, got shape {delays.shape}")
        if not np.all(np.isfinite(losses)) or losses.min() < 0.0 or losses.max() > 1.0:
            raise ValueError("losses must lie in [0, 1]")
        if delays.min() < 0 or delays.max() > T:
            raise ValueError("delays must lie in [0, T]")
        losses.setflags(write=False)
        delays.setflags(write=False)
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "delays", delays)

    @property
    def horizon(self) -> int:
        return self.losses.shape[0]

    @property
    def num_actions(self) -> int:
        return self.losses.shape[1]


@dataclass(frozen=True)
class DelayStats:
    total_delay: int
    outstanding: np.ndarray
    sigma_max: int
    d_max: int


@dataclass(frozen=True)
class InstanceSpec:
    """Recipe for an :class:`Instance`; ``generate(spec)`` is a pure function of it.

    Delay parameters: ``delay`` for ``fixed_delay``; ``delay_distribution``
    (geometric with mean ``delay_mean``, or uniform on ``0..delay_high``) for
    ``iid_delay``; ``explicit_delays`` otherwise. Loss parameters: ``gap``,
    ``best_arm`` and ``base_mean`` for ``stochastic_gap_loss``; additionally
    ``drift_period`` for ``adversarial_drift_loss``; ``explicit_losses``
    otherwise.
    """

    horizon: int
    num_actions: int
    delay_kind: str = "fixed_delay"
    loss_kind: str = "stochastic_gap_loss"
    seed: int = 0
    delay: int = 0
    delay_distribution: str = "geometric"
    delay_mean: float = 0.0
    delay_high: int = 0
    explicit_delays: tuple | None = None
    gap: float = 0.25
    best_arm: int = 0
    base_mean: float = 0.25
    drift_period: int = 100
    explicit_losses: tuple | None = field(default=None, repr=False)


def _check_spec(spec: InstanceSpec):
    T, K = spec.horizon, spec.num_actions
    if spec.delay_kind not in DELAY_KINDS:
        raise ValueError(f"unknown delay kind {spec.delay_kind!r}")
    if spec.loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {spec.loss_kind!r}")
    if spec.loss_kind != "explicit_loss":
        if T < 1:
            raise ValueError("horizon T must be >= 1")
        if K < 2:
            raise ValueError("need at least K = 2 actions")
    if spec.delay_kind == "fixed_delay" and not 0 <= spec.delay <= T:
        raise ValueError(f"fixed delay d={spec.delay} must satisfy 0 <= d <= T={T}")
    if spec.delay_kind == "iid_delay":
        if spec.delay_distribution not in IID_DISTRIBUTIONS:
            raise ValueError(f"unknown delay distribution {spec.delay_distribution!r}")
        if spec.delay_distribution == "geometric" and spec.delay_mean < 0:
            raise ValueError("delay_mean must be non-negative")
        if spec.delay_distribution == "uniform" and not 0 <= spec.delay_high <= T:
            raise ValueError("delay_high must lie in [0, T]")
    if spec.loss_kind in ("stochastic_gap_loss", "adversarial_drift_loss"):
        if not 0.0 < spec.gap < 1.0:
            raise ValueError(f"gap must lie in (0, 1), got {spec.gap}")
        if not 0.0 <= spec.base_mean <= 1.0 - spec.gap:
            raise ValueError("base_mean + gap must not exceed 1")
        if not 0 <= spec.best_arm < K:
            raise ValueError(f"best_arm must be in [0, {K})")
    if spec.loss_kind == "adversarial_drift_loss" and spec.drift_period < 1:
        raise ValueError("drift_period must be >= 1")


def _delays(spec: InstanceSpec, gen: np.random.Generator) -> np.ndarray:
    T = spec.horizon
    if spec.delay_kind == "fixed_delay":
        return np.full(T, spec.delay, dtype=np.int64)
    if spec.delay_kind == "explicit_delay":
        if spec.explicit_delays is None:
            raise ValueError("explicit_delay needs explicit_delays")
        return np.asarray(spec.explicit_delays, dtype=np.int64)
    if spec.delay_distribution == "geometric":
        d = gen.geometric(1.0 / (spec.delay_mean + 1.0), size=T) - 1
    else:
        d = gen.integers(0, spec.delay_high, size=T, endpoint=True)
    # d_max <= T without loss of generality: such feedback is never delivered anyway
    return np.minimum(d, T).astype(np.int64)


def _losses(spec: InstanceSpec, gen: np.random.Generator) -> np.ndarray:
    T, K = spec.horizon, spec.num_actions
    if spec.loss_kind == "explicit_loss":
        if spec.explicit_losses is None:
            raise ValueError("explicit_loss needs explicit_losses")
        return np.asarray(spec.explicit_losses, dtype=np.float64)
    if spec.loss_kind == "stochastic_gap_loss":
        means = np.full(K, spec.base_mean + spec.gap)
        means[spec.best_arm] = spec.base_mean
        return (gen.random((T, K)) < means).astype(np.float64)
    # adversarial drift: the best arm rotates every drift_period rounds,
    # starting from best_arm; losses are deterministic
    phase = (np.arange(T) // spec.drift_period + spec.best_arm) % K
    losses = np.full((T, K), spec.base_mean + spec.gap)
    losses[np.arange(T), phase] = spec.base_mean
    return losses


def generate(spec: InstanceSpec) -> Instance:
    """Build the instance described by ``spec``.

    Identical specs give bit-identical instances.

    >>> inst = generate(InstanceSpec(horizon=10, num_actions=2, delay=3))
    >>> inst.delays.tolist()
    [3, 3, 3, 3, 3, 3, 3, 3, 3, 3]
    """
    _check_spec(spec)
    gen = rngmod.stream(spec.seed, rngmod.INSTANCE)
    delays = _delays(spec, gen)
    losses = _losses(spec, gen)
    inst = Instance(losses=losses, delays=delays)
    if spec.loss_kind != "explicit_loss" and inst.horizon != spec.horizon:
        raise ValueError("explicit delays do not match the horizon")
    return inst


def delay_stats(inst: Instance) -> DelayStats:
    """Total delay, outstanding-delay counts ``sigma_t`` and their maxima.

    ``sigma_t`` counts rounds ``s < t`` with ``s + d_s >= t``. Each round ``s``
    is pending during rounds ``s+1 .. min(s+d_s, T)``, so the counts follow
    from a difference array.
    """
    T = inst.horizon
    d = inst.delays
    s = np.arange(1, T + 1)
    diff = np.zeros(T + 2, dtype=np.int64)
    np.add.at(diff, s + 1, 1)
    np.add.at(diff, np.minimum(s + d, T) + 1, -1)
    # rounds with d_s = 0 add +1 and -1 at the same slot and never count
    sigma = np.cumsum(diff)[1 : T + 1]
    return DelayStats(
        total_delay=int(d.sum()),
        outstanding=sigma,
        sigma_max=int(sigma.max()),
        d_max=int(d.max()),
    )


def best_fixed_action(inst: Instance) -> tuple[int, float]:
    """Best single action in hindsight; ties go to the smallest index."""
    totals = inst.losses.sum(axis=0)
    i = int(np.argmin(totals))
    return i, float(totals[i])


def load_instance_csv(path) -> Instance:
    """Read an instance from CSV with header ``t,d,l_1,...,l_K`` (t is 1-based)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    if header[:2] != ["t", "d"] or any(h != f"l_{i}" for i, h in enumerate(header[2:], 1)):
        raise ValueError(f"{path}: expected header t,d,l_1,...,l_K, got {','.join(header)}")
    t = [int(r[0]) for r in body]
    if t != list(range(1, len(body) + 1)):
        raise ValueError(f"{path}: rounds must be listed as 1..T in order")
    delays = [int(r[1]) for r in body]
    losses = [[float(v) for v in r[2:]] for r in body]
    return Instance(losses=np.array(losses), delays=np.array(delays))


def save_instance_csv(inst: Instance, path):
    path = Path(path)
    K = inst.num_actions
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "d"] + [f"l_{i}" for i in range(1, K + 1)])
        for t in range(inst.horizon):
            w.writerow([t + 1, int(inst.delays[t])] + [repr(float(v)) for v in inst.losses[t]])
