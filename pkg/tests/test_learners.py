import math

import numpy as np
import pytest

from delaysched.env import Instance, InstanceSpec, delay_stats, generate
from delaysched.learners import (
    batch_delay,
    batch_size,
    check_rates,
    default_checkpoints,
    expectation_capacity,
    run_baseline,
    run_batched,
    run_expectation_capacity,
    run_scheduled,
    telescoping_check,
    write_transcript_csv,
)
from delaysched.schedulers import BERNOULLI, EXPECTATION, FIXED_P, PROXY, PolicyConfig
from oracles import batch_delay_bruteforce


def inst_fixed(T=400, K=3, d=10, seed=0, **kw):
    return generate(InstanceSpec(horizon=T, num_actions=K, delay=d, seed=seed, **kw))


def inst_iid(T=400, K=3, mean=8.0, seed=0):
    return generate(InstanceSpec(horizon=T, num_actions=K, delay_kind="iid_delay", delay_mean=mean, seed=seed))


def test_default_checkpoints():
    assert default_checkpoints(1).tolist() == [1]
    assert default_checkpoints(8).tolist() == [1, 2, 4, 8]
    assert default_checkpoints(10).tolist() == [1, 2, 4, 8, 10]


def test_batch_delay_example():
    assert batch_delay(2, 4, 3) == 1 == batch_delay_bruteforce(2, 4, 3)
    for u in range(1, 30):
        for d in range(0, 20):
            for b in (1, 2, 5, 7):
                assert batch_delay(u, d, b) == batch_delay_bruteforce(u, d, b)
    assert np.array_equal(batch_delay(np.arange(1, 6), np.full(5, 3), 1), np.full(5, 3))


def test_batch_size_rule():
    assert batch_size(50, 2) == 50
    assert batch_size(50, 3) == 25
    assert batch_size(0, 1) == 1
    assert batch_size(4, 100) == 1
    with pytest.raises(ValueError):
        batch_size(5, 1)


@pytest.mark.parametrize("regime", ["bandit", "fullinfo"])
def test_batched_b1_matches_baseline(regime):
    inst = inst_iid(T=300, mean=4.0, seed=3)
    d_max = int(inst.delays.max())
    bt = run_batched(inst, regime, C=d_max + 1, b=1, master_seed=5, learner_seed=11)
    assert np.array_equal(bt.batch.representatives, np.arange(1, 301))
    base = run_baseline(inst, regime, rates=f"batch_{regime}", learner_seed=11)
    assert np.array_equal(bt.actions, base.actions)
    assert np.array_equal(bt.rates.arrays()[1], base.rates.arrays()[1])
    assert np.array_equal(bt.L_hat, base.L_hat)


@pytest.mark.parametrize("regime", ["bandit", "fullinfo"])
def test_transparent_scheduler_matches_baseline(regime):
    T = 200
    inst = inst_fixed(T=T, d=0, seed=2)
    sch = run_scheduled(inst, regime, T, PolicyConfig(BERNOULLI), f"cnp_{regime}", 9, learner_seed=4)
    assert np.all(sch.prob == 1.0) and sch.admitted.all()
    base = run_baseline(inst, regime, learner_seed=4)
    assert np.array_equal(sch.actions, base.actions)
    assert np.array_equal(sch.L_hat, base.L_hat)


def test_batched_fixed_delay_occupancy():
    inst = inst_fixed(T=2000, K=4, d=50, seed=1)
    tr = run_batched(inst, "bandit", C=2, master_seed=3)
    assert tr.batch.size == 50 and tr.batch.occupancy_bound == 2
    assert tr.max_occupancy <= 2
    assert telescoping_check(inst, tr) and check_rates(tr).ok


def test_batched_padding_and_rejections():
    inst = inst_fixed(T=103, K=2, d=7, seed=1)
    tr = run_batched(inst, "fullinfo", C=3, b=4, master_seed=2)
    assert tr.batch.representatives.size == 26 and tr.horizon == 103
    assert telescoping_check(inst, tr) and check_rates(tr).ok
    # actions are constant within each batch
    assert all(len(set(tr.actions[i:i + 4])) == 1 for i in range(0, 103, 4))
    with pytest.raises(ValueError):
        run_batched(inst, "bandit", C=1)
    with pytest.raises(ValueError):
        run_batched(inst, "bandit", C=3, b=3)
    run_batched(inst_fixed(T=20, d=0), "bandit", C=1)


def test_baseline_single_round():
    inst = inst_fixed(T=1, K=5, d=0)
    tr = run_baseline(inst, "bandit")
    assert tr.played_prob[0] == pytest.approx(0.2, abs=1e-12)
    assert tr.final_regret <= 1.0


def test_baseline_identical_columns():
    g = np.random.default_rng(0)
    col = g.random(500)
    inst = Instance(losses=np.stack([col, col], axis=1), delays=np.minimum(g.integers(0, 9, 500), 500 - np.arange(500)))
    for regime in ("bandit", "fullinfo"):
        tr = run_baseline(inst, regime, master_seed=1)
        assert np.allclose(tr.regret, 0.0, atol=1e-9)


def test_baseline_zero_delay_fullinfo_bound():
    T = 10_000
    inst = generate(InstanceSpec(horizon=T, num_actions=2, delay=0, gap=0.3, seed=5))
    tr = run_baseline(inst, "fullinfo", master_seed=5)
    assert tr.pseudo_regret[-1] <= 2 * math.sqrt(T * math.log(2))


@pytest.mark.parametrize("regime", ["bandit", "fullinfo"])
def test_baseline_memory_and_audits(regime):
    inst = inst_iid(T=600, mean=12.0, seed=4)
    tr = run_baseline(inst, regime, master_seed=8)
    assert tr.max_stored <= delay_stats(inst).sigma_max + 1
    assert telescoping_check(inst, tr) and check_rates(tr).ok


@pytest.mark.parametrize("regime", ["bandit", "fullinfo"])
@pytest.mark.parametrize("policy,rates", [
    (PolicyConfig(BERNOULLI), "cnp"),
    (PolicyConfig(PROXY), "ncp"),
    (PolicyConfig(FIXED_P, p=0.4), "fixed_const"),
    (PolicyConfig(EXPECTATION, expectation_capacity=2.0), "cnp"),
])
def test_scheduled_audits(regime, policy, rates):
    inst = inst_iid(T=800, mean=15.0, seed=6)
    name = rates if rates == "fixed_const" else f"{rates}_{regime}"
    C = 6
    tr = run_scheduled(inst, regime, C, policy, name, master_seed=12)
    assert tr.max_stored <= C and tr.max_occupancy <= C
    assert telescoping_check(inst, tr)
    rep = check_rates(tr)
    assert rep.ok, rep.message
    assert np.all(np.diff(tr.cum_loss) >= 0)


def test_scheduled_rejects_bad_pairing():
    inst = inst_fixed(T=50, d=3)
    with pytest.raises(ValueError):
        run_scheduled(inst, "bandit", 4, PolicyConfig(PROXY), "cnp_bandit")
    with pytest.raises(ValueError):
        run_scheduled(inst, "bandit", 4, PolicyConfig(BERNOULLI), "cnp_fullinfo")
    with pytest.raises(ValueError):
        run_scheduled(inst, "bandit", 4, PolicyConfig(PROXY, d_max=1), "ncp_bandit")


def test_observation_independence():
    inst = inst_iid(T=600, mean=10.0, seed=7)
    pol = PolicyConfig(BERNOULLI)
    a = run_scheduled(inst, "bandit", 5, pol, "cnp_bandit", scheduler_seed=1, learner_seed=2)
    b = run_scheduled(inst, "bandit", 5, pol, "cnp_bandit", scheduler_seed=1, learner_seed=3)
    assert np.array_equal(a.observed, b.observed) and np.array_equal(a.admitted, b.admitted)
    assert not np.array_equal(a.actions, b.actions)
    c = run_scheduled(inst, "bandit", 5, pol, "cnp_bandit", scheduler_seed=9, learner_seed=2)
    # first round at which the delivered feedback differs
    arr_a = np.where(a.observed, np.arange(1, 601) + inst.delays, 0)
    arr_c = np.where(c.observed, np.arange(1, 601) + inst.delays, 0)
    first = min(int(r) for r in np.concatenate([arr_a[arr_a != arr_c], arr_c[arr_a != arr_c]]) if r > 0)
    assert first < 600
    assert np.array_equal(a.actions[:first], c.actions[:first])


def test_schedule_does_not_depend_on_losses():
    a = inst_fixed(T=300, d=9, seed=1)
    b = Instance(losses=1.0 - a.losses, delays=a.delays)
    for pol, rates in ((PolicyConfig(BERNOULLI), "cnp_bandit"), (PolicyConfig(PROXY), "ncp_bandit")):
        x = run_scheduled(a, "bandit", 4, pol, rates, master_seed=3)
        y = run_scheduled(b, "bandit", 4, pol, rates, master_seed=3)
        assert np.array_equal(x.admitted, y.admitted) and np.array_equal(x.observed, y.observed)


def test_expectation_capacity_recipe():
    assert expectation_capacity(10**4, 2, "bandit") == 28
    assert expectation_capacity(10**4, 5, "bandit") == math.ceil(5 * math.log(10**4))
    assert expectation_capacity(10**4, 4, "fullinfo") == 28


def test_expectation_capacity_large_budget_matches_scheduled():
    T = 500
    inst = inst_fixed(T=T, d=20, seed=3)
    C = expectation_capacity(T, 3, "bandit")
    e = run_expectation_capacity(inst, "bandit", C_E=C + 5.0, master_seed=4)
    s = run_scheduled(inst, "bandit", C, PolicyConfig(BERNOULLI, alpha=1.0, delta=T ** -0.5), "cnp_bandit", 4)
    assert np.array_equal(e.actions, s.actions) and np.array_equal(e.observed, s.observed)
    assert e.expected_occupancy.shape == (T,)


def test_expectation_capacity_admission_example():
    T = 10**4
    inst = generate(InstanceSpec(horizon=T, num_actions=2, delay_kind="iid_delay", delay_mean=5.0, seed=1))
    tr = run_expectation_capacity(inst, "bandit", 0.5, master_seed=1, checkpoints=[T])
    assert tr.capacity == 28
    d1 = int(inst.delays[0])
    assert tr.prob[0] == pytest.approx(min(1.0, 0.125 / (d1 + 1)), rel=1e-12)
    with pytest.raises(ValueError):
        run_expectation_capacity(inst, "bandit", 0.0)


def test_transcript_csv(tmp_path):
    inst = inst_fixed(T=30, d=2)
    tr = run_scheduled(inst, "bandit", 3, PolicyConfig(PROXY), "ncp_bandit", master_seed=1)
    path = tmp_path / "t.csv"
    write_transcript_csv(tr, path, comment="cfg=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# transcript v1 cfg=abc"
    assert lines[1] == "t,action,admitted,observed,p_t,alpha_inv,beta_inv,cum_loss"
    assert len(lines) == 32
    rows = [l.split(",") for l in lines[2:]]
    for i, r in enumerate(rows):
        assert (r[4] == "") == (not tr.observed[i])
