import math
import warnings
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ScriptedArrivals, make_instance
from cqbandit.contexts import ContextSourceError, SyntheticContexts, load_contexts_csv
from cqbandit.env import (ArrivalProcess, InfeasibleInstanceError, InstanceConfig, Job, QueueState,
                          generate_instance, logistic, sample_arrival, service_draw, step)
from cqbandit.streams import Channel, RandomnessStream


# --- logistic ---------------------------------------------------------------

def test_logistic_reference_values():
    assert logistic(0.0) == 0.5
    assert logistic(3.7) + logistic(-3.7) == pytest.approx(1.0, abs=1e-15)
    getcontext().prec = 40
    ref = 1 / (1 + (-Decimal(1)).exp())
    assert abs(logistic(1.0) - float(ref)) < 1e-16


def test_logistic_is_stable_at_extremes():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        hi, lo = logistic(700.0), logistic(-700.0)
    assert hi == 1.0 and 0.0 <= lo < 1e-300


# --- arrivals and service ---------------------------------------------------

def test_arrival_extremes():
    s = RandomnessStream(1)
    src = SyntheticContexts(3)
    assert all(sample_arrival(s, t, src, 0.0) == (False, None) for t in range(1, 500))
    for t in range(1, 500):
        arrived, x = sample_arrival(s, t, src, 1.0)
        assert arrived and x.shape == (3,)


def test_arrival_rate_law_of_large_numbers():
    s = RandomnessStream(99)
    src = SyntheticContexts(2)
    n = 100_000
    hits = sum(sample_arrival(s, t, src, 0.7)[0] for t in range(1, n + 1))
    assert abs(hits / n - 0.7) <= 0.01


def test_arrival_requires_positive_round():
    with pytest.raises(ValueError):
        sample_arrival(RandomnessStream(0), 0, SyntheticContexts(2), 0.5)


def test_conditioned_arrivals_meet_the_slack_and_match_scalar_draws(reference_instance):
    s = RandomnessStream(4)
    accept = reference_instance.accept_filter()
    src = reference_instance.contexts
    for t in range(1, 300):
        arrived, x = sample_arrival(s, t, src, 1.0, accept)
        assert reference_instance.rates(x).max() >= reference_instance.lam + reference_instance.slack - 1e-12
        # batched attempts give the same context as the one-at-a-time loop
        a = 0
        while not accept(src.draw(s, t, a)):
            a += 1
        assert np.array_equal(src.draw(s, t, a), x)


def test_service_certain_success_and_identical_pairs():
    inst = make_instance([[60.0]])
    s = RandomnessStream(3)
    x = np.array([1.0])
    assert all(service_draw(x, 0, inst, s, t) for t in range(1, 2000))
    with pytest.raises(IndexError):
        service_draw(x, 1, inst, s, 1)


def test_monotone_service_coupling_over_uniform_grid():
    # two servers with rates exactly 0.3 and 0.8 on x = 1
    inst = make_instance([[math.log(0.3 / 0.7)], [math.log(0.8 / 0.2)]])
    x = np.array([1.0])
    mu = inst.rates(x)
    assert mu[0] < mu[1]
    for u in np.linspace(0.0, 1.0, 10_001):
        assert (u <= mu[0]) <= (u <= mu[1])
    s = RandomnessStream(8)
    for t in range(1, 5000):
        assert service_draw(x, 0, inst, s, t) <= service_draw(x, 1, inst, s, t)


# --- step ---------------------------------------------------------------------

def _find_round(stream, pred, start=1):
    t = start
    while not pred(stream.uniform(t, Channel.SERVICE_COIN)):
        t += 1
    return t


def test_step_empty_queue_without_arrival():
    inst = make_instance([[1.0]])
    s = RandomnessStream(0)
    q = QueueState()
    rec = step(q, None, inst, s, 5, arrivals=ScriptedArrivals(inst, s, {}))
    assert len(q) == 0 and rec.dummy_served and not rec.departed and rec.mode == "DUMMY"


def test_step_empty_queue_with_arrival():
    inst = make_instance([[1.0]])
    s = RandomnessStream(0)
    q = QueueState()
    rec = step(q, None, inst, s, 5, arrivals=ScriptedArrivals(inst, s, {5: [0.2]}))
    assert len(q) == 1 and rec.dummy_served and q.jobs[0].entry_round == 6


def test_step_serve_and_arrive_keeps_length():
    inst = make_instance([[60.0]])  # rate ~1 on x = 1
    s = RandomnessStream(0)
    q = QueueState([Job(np.array([1.0]), 1), Job(np.array([1.0]), 2), Job(np.array([1.0]), 3)])
    rec = step(q, (1, 0), inst, s, 4, arrivals=ScriptedArrivals(inst, s, {4: [0.5]}))
    assert rec.departed and len(q) == 3
    assert [j.entry_round for j in q.jobs] == [1, 3, 5]


def test_step_failed_service_keeps_the_job():
    inst = make_instance([[0.0]])  # rate 1/2
    s = RandomnessStream(0)
    t = _find_round(s, lambda u: u > 0.5)
    q = QueueState([Job(np.array([1.0]), 1)])
    rec = step(q, (0, 0), inst, s, t, arrivals=ScriptedArrivals(inst, s, {}))
    assert not rec.departed and len(q) == 1


def test_step_rejects_bad_actions():
    inst = make_instance([[1.0]])
    s = RandomnessStream(0)
    arr = ScriptedArrivals(inst, s, {})
    q = QueueState([Job(np.array([1.0]), 1)])
    with pytest.raises(IndexError):
        step(q, (1, 0), inst, s, 2, arrivals=arr)
    with pytest.raises(IndexError):
        step(q, (0, 3), inst, s, 2, arrivals=arr)
    with pytest.raises(ValueError):
        step(q, None, inst, s, 2, arrivals=arr)
    with pytest.raises(ValueError):
        step(QueueState(), (0, 0), inst, s, 2, arrivals=arr)


@given(st.integers(0, 2**32), st.floats(0.05, 0.95), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_queue_dynamics_and_fifo(seed, lam, K):
    rng = np.random.default_rng(seed)
    inst = make_instance(rng.uniform(-1, 1, size=(K, 2)), lam=lam)
    s = RandomnessStream(seed)
    arrivals = ArrivalProcess(inst, s)
    q = QueueState()
    for t in range(1, 150):
        before = [j.entry_round for j in q.jobs]
        action = None
        if len(q):
            action = (int(rng.integers(len(q))), int(rng.integers(K)))
        rec = step(q, action, inst, s, t, arrivals=arrivals)
        assert len(q) == max(0, rec.queue_len + rec.arrived - rec.departed)
        assert rec.departed <= (not rec.dummy_served)
        assert (not rec.dummy_served) or rec.queue_len == 0
        survivors = [e for i, e in enumerate(before) if not (rec.departed and i == action[0])]
        assert [j.entry_round for j in q.jobs][:len(survivors)] == survivors
        q.check()


# --- instance generation ------------------------------------------------------

def test_easy_instance_accepts_at_once():
    # x in [-1,1], theta in [-1,1]: mu >= logistic(-1) = 0.27 > 0.02 everywhere
    inst = generate_instance(InstanceConfig(d=1, K=1, lam=0.01, slack=0.01, slack_mode="raw"), 0)
    assert inst.certificate["attempts"] == 1
    assert inst.certificate["min_slack"] >= 0.01


def test_impossible_slack_exhausts_the_budget():
    with pytest.raises(InfeasibleInstanceError):
        generate_instance(InstanceConfig(lam=0.99, slack=0.1, max_attempts=50, n_validation=500), 0)


def test_reference_config_instance(reference_instance):
    inst = reference_instance
    assert inst.theta_star.shape == (5, 5)
    assert np.all(np.abs(inst.theta_star) <= 1.0)
    assert np.linalg.norm(inst.theta_star, axis=1).max() <= inst.S
    assert inst.S == pytest.approx(math.ceil(np.linalg.norm(inst.theta_star, axis=1).max() * 10) / 10)
    assert inst.certificate["acceptance_rate"] >= 0.05
    assert inst.sigma0_sq > 0
    assert np.array_equal(inst.dummy_job, np.zeros(5))


def test_instance_generation_is_deterministic():
    a = generate_instance(InstanceConfig(d=3, K=2), 5)
    b = generate_instance(InstanceConfig(d=3, K=2), 5)
    assert np.array_equal(a.theta_star, b.theta_star)


def test_user_radius_below_norm_is_rejected():
    with pytest.raises(ValueError):
        generate_instance(InstanceConfig(S=0.01), 3)


# --- CSV contexts -------------------------------------------------------------

def test_csv_minimal_ingestion(tmp_path):
    p = tmp_path / "ctx.csv"
    p.write_text("a,b\n1,2\n3,4\n5,6\n")
    src = load_contexts_csv(p)
    assert src.rows.shape == (3, 2)
    s = RandomnessStream(0)
    draws = {tuple(src.draw(s, t)) for t in range(1, 200)}
    assert draws == {(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)}


def test_csv_standardize_and_normalize(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(3.0, 5.0, size=(200, 4))
    p = tmp_path / "ctx.csv"
    p.write_text("a,b,c,d\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in X) + "\n")
    Z = load_contexts_csv(p, standardize=True).rows
    assert np.abs(Z.mean(axis=0)).max() <= 1e-10
    assert np.abs(Z.std(axis=0) - 1).max() <= 1e-10
    N = load_contexts_csv(p, standardize=True, normalize=True).rows
    assert np.linalg.norm(N, axis=1).max() <= 1 + 1e-12


@pytest.mark.parametrize("body", ["", "a,b\n1,2\n3\n", "a,b\n1,x\n", "a,b\n"])
def test_csv_errors(tmp_path, body):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ContextSourceError):
        load_contexts_csv(p)


def test_csv_without_replacement_exhausts(tmp_path):
    p = tmp_path / "ctx.csv"
    p.write_text("a\n1\n2\n")
    src = load_contexts_csv(p, replace=False)
    s = RandomnessStream(0)
    assert src.draw(s, 1)[0] == 1.0 and src.draw(s, 2)[0] == 2.0
    with pytest.raises(ContextSourceError):
        src.draw(s, 3)


def test_csv_contexts_drive_an_instance(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "ctx.csv"
    p.write_text("a,b,c\n" + "\n".join(",".join(f"{v:.6f}" for v in r)
                                        for r in rng.uniform(-1, 1, (300, 3))) + "\n")
    inst = generate_instance(InstanceConfig(d=3, K=2, context=str(p), n_validation=1000), 2)
    assert inst.contexts.kind == "csv"
    arrived, x = sample_arrival(RandomnessStream(0), 1, inst.contexts, 1.0, inst.accept_filter())
    assert any(np.array_equal(x, r) for r in inst.contexts.rows)
