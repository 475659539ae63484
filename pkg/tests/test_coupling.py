import numpy as np
import pytest

from conftest import make_instance
from cqbandit.coupling import (AGREE_00, AGREE_11, DISAGREE, NONE, OPTIMAL, PsiSample, QueueRunner,
                               Trace, bad_round_bound, check_elliptical_potential,
                               count_bad_rounds, coverage_run, estimate_regret, psi_sample,
                               psi_samples, run_coupled, run_policy_switch, run_queue)
from cqbandit.env import InstanceConfig, RoundRecord, generate_instance
from cqbandit.policies import PolicyConfig

LEARNERS = ["CQB_EPS", "CQB_OPT", "RANDOM", "CQB_EPS_OPT", "CQB_TS", "Q_UCB", "Q_THS"]


def policy(name):
    return PolicyConfig(name, tau=20, tau_mode="EXPLICIT", eps_rate=0.05)


def test_optimal_against_itself_is_identical(small_instance):
    alg, opt = run_coupled(OPTIMAL, small_instance, 300, seed=1)
    assert alg.same_path(opt)


def test_no_arrivals_means_empty_queues(small_instance):
    small_instance.lam = 0.0
    alg, opt = run_coupled(PolicyConfig("CQB_OPT"), small_instance, 200, seed=1)
    assert alg.final_q == opt.final_q == 0
    assert max(alg.q) == 0
    assert count_bad_rounds(alg, small_instance.slack) == 0


@pytest.mark.parametrize("name", LEARNERS)
def test_switch_boundaries(name, small_instance):
    T = 120
    for seed in range(3):
        alg = run_queue(policy(name), small_instance, T, seed)
        opt = run_queue(OPTIMAL, small_instance, T, seed)
        assert run_policy_switch(policy(name), small_instance, T, 0, seed).same_path(opt)
        assert run_policy_switch(policy(name), small_instance, T, T - 1, seed).same_path(alg)


def test_switch_state_matches_algorithm_before_switch(small_instance):
    T, t1 = 150, 70
    seed = 4
    cfg = policy("CQB_OPT").resolve(small_instance, T)
    from cqbandit.coupling import _setup
    stream, arr = _setup(small_instance, seed)
    a = QueueRunner(cfg, small_instance, stream, arr).run(1, t1)
    stream2, arr2 = _setup(small_instance, seed)
    b = QueueRunner(cfg, small_instance, stream2, arr2, switch_round=t1).run(1, t1)
    assert a.queue.same_as(b.queue)
    sw = run_policy_switch(policy("CQB_OPT"), small_instance, T, t1, seed)
    full = run_queue(policy("CQB_OPT"), small_instance, T, seed)
    assert sw.q[: t1 + 1] == full.q[: t1 + 1]


def test_switch_round_range(small_instance):
    with pytest.raises(ValueError):
        run_policy_switch(policy("RANDOM"), small_instance, 50, 50, 0)


def test_telescoping_on_one_path(small_instance):
    T, seed = 40, 9
    q = [run_policy_switch(policy("RANDOM"), small_instance, T, t1, seed).final_q for t1 in range(T)]
    alg, opt = run_coupled(policy("RANDOM"), small_instance, T, seed)
    assert q[0] == opt.final_q and q[-1] == alg.final_q
    diffs = [q[t] - q[t - 1] for t in range(1, T)]
    assert alg.final_q - opt.final_q == sum(diffs)
    assert set(diffs) <= {-1, 0, 1}


def test_psi_sample_matches_two_switch_runs(small_instance):
    T = 80
    for name in ("RANDOM", "CQB_OPT", "Q_THS"):
        for t in (1, 17, 40, 79):
            s = psi_sample(policy(name), small_instance, T, t, seed=5)
            plus = run_policy_switch(policy(name), small_instance, T, t, 5).final_q
            minus = run_policy_switch(policy(name), small_instance, T, t - 1, 5).final_q
            assert s.value == plus - minus
            assert not s.violations()


def test_psi_for_optimal_is_zero(small_instance):
    out = psi_samples(OPTIMAL, small_instance, 100, range(1, 100), seed=2)
    assert all(s.value == 0 for s in out)


def test_psi_range_on_random_small_instances():
    rng = np.random.default_rng(0)
    n = 0
    for i in range(30):
        d, K = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        inst = generate_instance(InstanceConfig(d=d, K=K, lam=float(rng.uniform(0.2, 0.6)), slack=0.05,
                                                normalize=True, n_validation=1000), i)
        T = int(rng.integers(10, 100))
        name = LEARNERS[i % len(LEARNERS)]
        for s in psi_samples(policy(name), inst, T, rng.choice(np.arange(1, T), 5, replace=False), i):
            assert not s.violations(), (name, s)
            n += 1
    assert n == 150


def test_psi_positive_mass_under_disagreement_near_capacity():
    inst = generate_instance(InstanceConfig(d=2, K=2, lam=0.6, slack=0.05, normalize=True,
                                            n_validation=2000), 3)
    hits = 0
    for seed in range(40):
        for s in psi_samples(PolicyConfig("RANDOM"), inst, 150, range(1, 150, 7), seed):
            hits += s.divergence_event == DISAGREE and s.value == 1
    assert hits > 0


def test_psi_sample_violation_rules():
    assert PsiSample(1, 5, 0, 2, AGREE_00).violations()
    assert PsiSample(1, 5, 0, -1, DISAGREE).violations()
    assert PsiSample(1, 5, 0, 1, AGREE_11).violations()
    assert PsiSample(1, 5, 0, 1, NONE).violations()
    assert not PsiSample(1, 5, 0, -1, AGREE_11).violations()
    assert not PsiSample(1, 5, 0, 1, DISAGREE).violations()


def test_regret_of_optimal_is_exactly_zero(small_instance):
    est = estimate_regret(OPTIMAL, small_instance, 200, 4, seed=1)
    assert est.mean == 0.0 and est.std == 0.0 and not est.degenerate
    one = estimate_regret(PolicyConfig("RANDOM"), small_instance, 200, 1, seed=1)
    assert one.std == 0.0 and one.degenerate
    rows = list(one.report_rows("RANDOM"))
    assert len(rows) == 200 and rows[0] == ("RANDOM", 0, 1, 0, 0)


def test_random_policy_falls_behind(reference_instance):
    est = estimate_regret(PolicyConfig("RANDOM"), reference_instance, 1500, 3, seed=0)
    assert est.mean > 0
    assert est.curve.shape == (1500,) and est.curve[0] == 0


def test_bad_round_count_hand_built():
    recs = [RoundRecord(t, False, None, 1, 1, np.zeros(1), 0, False, False, False, "UCB", u, 1.0)
            for t, u in enumerate((0.5, 0.01, 0.5), start=1)]
    tr = Trace("x", 4, 0, recs, [0, 1, 1, 1])
    # threshold slack / (4 beta) = 0.4 / 4 = 0.1
    assert count_bad_rounds(tr, 0.4) == 2


@pytest.mark.parametrize("normalize", [True, False])
def test_deterministic_inequalities_on_a_cqb_opt_trace(normalize):
    inst = generate_instance(InstanceConfig(normalize=normalize), 11)
    T = 800
    cfg = PolicyConfig("CQB_OPT").resolve(inst, T)
    alg, _ = run_coupled(cfg, inst, T, seed=3)
    lhs, rhs, ok = check_elliptical_potential(alg, inst)
    assert ok and 0 < lhs <= rhs
    assert count_bad_rounds(alg, inst.slack) <= bad_round_bound(inst, T, cfg.delta)


def test_unit_radius_bound_needs_unit_features():
    # features outside the unit ball can beat the L = 1 bound early on
    inst = generate_instance(InstanceConfig(normalize=False), 11)
    alg, _ = run_coupled(PolicyConfig("CQB_OPT"), inst, 200, seed=3)
    assert not check_elliptical_potential(alg, inst, radius=1.0)[2]
    assert check_elliptical_potential(alg, inst)[2]


def test_dummy_rounds_never_reach_estimators(small_instance):
    small_instance.lam = 0.2
    cfg = PolicyConfig("CQB_OPT").resolve(small_instance, 300)
    from cqbandit.coupling import _setup
    stream, arr = _setup(small_instance, 0)
    r = QueueRunner(cfg, small_instance, stream, arr).run(1, 299)
    served = sum(not rec.dummy_served for rec in r.trace.records)
    assert sum(e.n_obs for e in r.state.estimators) == served
    assert any(rec.dummy_served for rec in r.trace.records)


def test_coverage_run_on_short_horizon(reference_instance):
    assert coverage_run(PolicyConfig("CQB_OPT", delta=0.05), reference_instance, 400, seed=0) == 0
    with pytest.raises(ValueError):
        coverage_run(PolicyConfig("RANDOM"), reference_instance, 50, seed=0)
