"""Experiment configuration files.

One INI section per experiment. Keys (all optional except ``algorithm``)::

    [fixed-delay-sweep]
    algorithm = scheduled          ; baseline | batched | scheduled | expectation_capacity
    regime = bandit                ; bandit | fullinfo
    policy = bernoulli_clairvoyant ; scheduled runs only
    rates = cnp_bandit             ; defaults per algorithm
    capacities = 2, 4, 8           ; ignored by baseline
    horizons = 1024, 4096
    seeds = 20
    base_seed = 0
    num_actions = 4
    delay_kind = fixed_delay       ; fixed_delay | iid_delay | explicit_delay
    delay = 50
    loss_kind = stochastic_gap_loss
    gap = 0.25

Other instance keys: ``delay_distribution``, ``delay_mean``, ``delay_high``,
``best_arm``, ``base_mean``, ``drift_period``, ``instance_csv``. Policy keys:
``alpha``, ``delta``, ``p``, ``expectation_capacity``, ``nu_multiplier``,
``d_max``, ``batch_size``. Output keys: ``out``, ``trace``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from delaysched.env import DELAY_KINDS, LOSS_KINDS, InstanceSpec
from delaysched.rates import POLICY_REGIME, REGIMES, check_pairing
from delaysched.schedulers import FIXED_P, POLICIES, PolicyConfig

ALGORITHMS = ("baseline", "batched", "scheduled", "expectation_capacity")

_INT = {"seeds", "base_seed", "num_actions", "delay", "delay_high", "best_arm", "drift_period", "d_max", "batch_size"}
_FLOAT = {"alpha", "delta", "p", "expectation_capacity", "nu_multiplier", "delay_mean", "gap", "base_mean"}
_STR = {"algorithm", "regime", "policy", "rates", "delay_kind", "loss_kind", "delay_distribution", "out", "instance_csv"}
_LIST = {"capacities", "horizons"}
_BOOL = {"trace"}
KNOWN = _INT | _FLOAT | _STR | _LIST | _BOOL


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    algorithm: str
    regime: str = "bandit"
    policy: str | None = None
    rates: str | None = None
    capacities: tuple = (None,)
    horizons: tuple = (1000,)
    seeds: int = 10
    base_seed: int = 0
    num_actions: int = 2
    instance: dict = field(default_factory=dict)
    policy_params: dict = field(default_factory=dict)
    batch_size: int | None = None
    out: str = "results"
    trace: bool = False
    instance_csv: str | None = None

    def rate_policy(self) -> str:
        if self.rates:
            return self.rates
        return {
            "baseline": "baseline_seldin",
            "batched": f"batch_{self.regime}",
            "expectation_capacity": f"cnp_{self.regime}",
        }.get(self.algorithm) or _default_scheduled_rates(self.policy, self.regime)

    def policy_config(self) -> PolicyConfig | None:
        if self.algorithm != "scheduled":
            return None
        return PolicyConfig(self.policy, **self.policy_params)

    def instance_spec(self, T: int, seed: int) -> InstanceSpec:
        return InstanceSpec(horizon=T, num_actions=self.num_actions, seed=seed, **self.instance)

    def configurations(self):
        """(C, T) pairs of the sweep, C-major."""
        caps = (None,) if self.algorithm == "baseline" else self.capacities
        return [(C, T) for C in caps for T in self.horizons]

    def config_hash(self, C, T) -> str:
        """Short digest of everything that determines one configuration's results."""
        d = asdict(self)
        d.pop("out")
        d.pop("trace")
        d["capacities"] = C
        d["horizons"] = T
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _default_scheduled_rates(policy, regime):
    if policy == FIXED_P:
        return "fixed_const"
    if policy == "pareto_proxy":
        return f"ncp_{regime}"
    return f"cnp_{regime}"


def _key_line(path: Path, section: str, key: str) -> int | None:
    # configparser drops line numbers; recover them for diagnostics
    try:
        lines = path.read_text().splitlines()
    except OSError:
        return None
    current = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return i
    return None


def _convert(key, raw):
    raw = raw.strip()
    if key in _INT:
        return int(raw)
    if key in _FLOAT:
        return float(raw)
    if key in _BOOL:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if key in _LIST:
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(int(v) for v in items)
    return raw


def parse_section(name: str, items: dict, where=lambda key: "") -> ExperimentConfig:
    vals = {}
    for key, raw in items.items():
        if key not in KNOWN:
            raise ConfigError(f"{where(key)}unknown key {key!r} in section [{name}]")
        try:
            vals[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{where(key)}bad value for {key!r} in section [{name}]: {exc}") from None
    if "algorithm" not in vals:
        raise ConfigError(f"section [{name}]: missing required key 'algorithm'")
    inst_keys = ("delay_kind", "loss_kind", "delay", "delay_distribution", "delay_mean", "delay_high",
                 "gap", "best_arm", "base_mean", "drift_period")
    pol_keys = ("alpha", "delta", "p", "expectation_capacity", "nu_multiplier", "d_max")
    cfg = ExperimentConfig(
        name=name,
        algorithm=vals["algorithm"],
        regime=vals.get("regime", "bandit"),
        policy=vals.get("policy"),
        rates=vals.get("rates"),
        capacities=vals.get("capacities", (None,)),
        horizons=vals.get("horizons", (1000,)),
        seeds=vals.get("seeds", 10),
        base_seed=vals.get("base_seed", 0),
        num_actions=vals.get("num_actions", 2),
        instance={k: vals[k] for k in inst_keys if k in vals},
        policy_params={k: vals[k] for k in pol_keys if k in vals},
        batch_size=vals.get("batch_size"),
        out=vals.get("out", "results"),
        trace=vals.get("trace", False),
        instance_csv=vals.get("instance_csv"),
    )
    validate(cfg, where)
    return cfg


def validate(cfg: ExperimentConfig, where=lambda key: ""):
    """Reject inconsistent settings before any run starts."""
    n = cfg.name
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"{where('algorithm')}[{n}] algorithm must be one of {ALGORITHMS}")
    if cfg.regime not in REGIMES:
        raise ConfigError(f"{where('regime')}[{n}] regime must be one of {REGIMES}")
    if cfg.instance.get("delay_kind", "fixed_delay") not in DELAY_KINDS:
        raise ConfigError(f"{where('delay_kind')}[{n}] delay_kind must be one of {DELAY_KINDS}")
    if cfg.instance.get("loss_kind", "stochastic_gap_loss") not in LOSS_KINDS:
        raise ConfigError(f"{where('loss_kind')}[{n}] loss_kind must be one of {LOSS_KINDS}")
    if cfg.seeds < 1:
        raise ConfigError(f"{where('seeds')}[{n}] seeds must be >= 1")
    if any(T < 1 for T in cfg.horizons):
        raise ConfigError(f"{where('horizons')}[{n}] horizons must be >= 1")
    if cfg.algorithm != "baseline" and cfg.capacities == (None,) and cfg.algorithm != "expectation_capacity":
        raise ConfigError(f"{where('capacities')}[{n}] {cfg.algorithm} needs 'capacities'")
    if cfg.algorithm == "expectation_capacity" and "expectation_capacity" not in cfg.policy_params:
        raise ConfigError(f"{where('expectation_capacity')}[{n}] expectation_capacity runs need 'expectation_capacity'")
    rates = cfg.rate_policy()
    if rates not in POLICY_REGIME:
        raise ConfigError(f"{where('rates')}[{n}] unknown rate policy {rates!r}")
    try:
        if cfg.algorithm == "scheduled":
            if cfg.policy not in POLICIES:
                raise ValueError(f"policy must be one of {POLICIES}")
            check_pairing(cfg.policy, rates, cfg.regime)
            cfg.policy_config()
        elif cfg.algorithm == "batched" and not rates.startswith("batch_"):
            raise ValueError(f"batched runs use batch_* rates, got {rates}")
        elif cfg.algorithm == "baseline" and not (rates == "baseline_seldin" or rates.startswith("batch_")):
            raise ValueError(f"baseline runs use baseline_seldin or batch_* rates, got {rates}")
        want = POLICY_REGIME[rates]
        if want is not None and want != cfg.regime:
            raise ValueError(f"rate policy {rates} is for the {want} regime")
    except ValueError as exc:
        key = "policy" if "policy" in str(exc) and "rate" not in str(exc) else "rates"
        raise ConfigError(f"{where(key)}[{n}] {exc}") from None


def load_config(path) -> list[ExperimentConfig]:
    """Parse every section of an INI file; diagnostics carry file, line and key."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    out = []
    for sec in cp.sections():
        def where(key, sec=sec):
            line = _key_line(path, sec, key)
            return f"{path}:{line}: " if line else f"{path}: "
        out.append(parse_section(sec, dict(cp[sec]), where))
    if not out:
        raise ConfigError(f"{path}: no experiment sections")
    return out


def with_overrides(cfg: ExperimentConfig, seeds=None, out=None, trace=None) -> ExperimentConfig:
    kw = {}
    if seeds is not None:
        kw["seeds"] = seeds
    if out is not None:
        kw["out"] = out
    if trace:
        kw["trace"] = True
    return replace(cfg, **kw) if kw else cfg
