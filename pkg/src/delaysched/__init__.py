"""Online learning with delayed feedback under a tracking-capacity constraint."""

from delaysched.env import (
    DelayStats,
    Instance,
    InstanceSpec,
    best_fixed_action,
    delay_stats,
    generate,
    load_instance_csv,
    save_instance_csv,
)
from delaysched.simplex_ftrl import (
    RegWeights,
    SolverError,
    bandit_estimator,
    fullinfo_estimator,
    kkt_residual,
    sample_action,
    solve,
)
from delaysched.schedulers import (
    PolicyConfig,
    chernoff_alpha,
    harmonic,
    observation_probability,
    sample_proxy_delay,
    simulate_schedule,
)
from delaysched.learners import (
    RegretTrace,
    run_baseline,
    run_batched,
    run_expectation_capacity,
    run_scheduled,
)
from delaysched.rates import make_rate_policy, rate_check

__version__ = "0.1.0"
