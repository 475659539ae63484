"""Coupled queues on shared randomness.

All queues built from the same ``(instance, seed)`` read the same arrival
and service uniforms, so differences between their sample paths come only
from their decisions.  A *switching* queue follows a learned policy up to
``switch_round`` and the optimal oracle afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .env import ArrivalProcess, Instance, QueueState, RoundRecord, step
from .estimation import confidence_radius
from .policies import (LEARNED, Decision, PolicyConfig, PolicyKind, beta_horizon, end_round,
                       init_state, pair_diagnostics, select, select_optimal, update)
from .streams import RandomnessStream, derive_seed

OPTIMAL = PolicyConfig(PolicyKind.OPTIMAL)


@dataclass
class Trace:
    policy: str
    T: int
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    q: list[int] = field(default_factory=lambda: [0])  # q[t-1] = Q(t)

    @property
    def final_q(self) -> int:
        return self.q[-1]

    def keys(self) -> list[tuple]:
        return [r.key() for r in self.records]

    def same_path(self, other: "Trace") -> bool:
        return self.q == other.q and self.keys() == other.keys()


class QueueRunner:
    """One queue driven by a policy; ``switch_round`` hands control to the oracle."""

    def __init__(self, policy: PolicyConfig, inst: Instance, stream: RandomnessStream,
                 arrivals: Optional[ArrivalProcess] = None, switch_round: Optional[int] = None,
                 record: bool = True):
        self.policy = policy
        self.inst = inst
        self.stream = stream
        self.arrivals = arrivals if arrivals is not None else ArrivalProcess(inst, stream)
        self.switch_round = switch_round
        self.queue = QueueState()
        self.state = init_state(policy, inst)
        self.record = record
        self.trace = Trace(policy.name, 0, stream.master_seed)
        self.last: Optional[RoundRecord] = None

    def learned_at(self, t: int) -> bool:
        return self.switch_round is None or t <= self.switch_round

    def step(self, t: int) -> RoundRecord:
        inst = self.inst
        learned = self.learned_at(t) and self.policy.kind is not PolicyKind.OPTIMAL
        decision: Optional[Decision] = None
        unc = beta = None
        bad = False
        if self.queue.jobs:
            if learned:
                decision = select(self.policy, self.state, self.queue, t, self.stream, inst)
                if self.state.estimators is not None:
                    x = self.queue.jobs[decision.job_index].feature
                    unc, beta = pair_diagnostics(self.state, x, decision.server)
                    bad = unc > inst.slack / (4.0 * beta)
            else:
                decision = select_optimal(self.queue, inst)
        chosen_x = None if decision is None else self.queue.jobs[decision.job_index].feature
        rec = step(self.queue, None if decision is None else decision.action, inst, self.stream, t,
                   arrivals=self.arrivals,
                   mode="" if decision is None else decision.mode,
                   explored=False if decision is None else decision.explored)
        rec.uncertainty, rec.beta, rec.bad_round = unc, beta, bad
        if learned:
            if decision is not None:
                update(self.policy, self.state, decision, chosen_x, rec.departed)
            end_round(self.policy, self.state, t, self.stream)
        if self.record:
            self.trace.records.append(rec)
        self.trace.q.append(len(self.queue))
        self.trace.T = t + 1
        self.last = rec
        return rec

    def run(self, t_from: int, t_to: int) -> "QueueRunner":
        for t in range(t_from, t_to + 1):
            self.step(t)
        return self

    def fork(self, switch_round: Optional[int], keep_policy_state: bool = True) -> "QueueRunner":
        new = QueueRunner.__new__(QueueRunner)
        new.policy = self.policy
        new.inst = self.inst
        new.stream = self.stream
        new.arrivals = self.arrivals
        new.switch_round = switch_round
        new.queue = self.queue.copy()
        new.state = self.state.copy() if keep_policy_state else self.state
        new.record = self.record
        new.trace = Trace(self.trace.policy, self.trace.T, self.trace.seed,
                          list(self.trace.records), list(self.trace.q))
        new.last = self.last
        return new


def _setup(inst: Instance, seed: int):
    stream = RandomnessStream(seed)
    return stream, ArrivalProcess(inst, stream)


def run_queue(policy: PolicyConfig, inst: Instance, T: int, seed: int,
              switch_round: Optional[int] = None, arrivals=None, record: bool = True) -> Trace:
    if T < 1:
        raise ValueError("T must be at least 1")
    policy = policy.resolve(inst, T)
    if arrivals is None:
        stream, arrivals = _setup(inst, seed)
    else:
        stream = arrivals.stream
    runner = QueueRunner(policy, inst, stream, arrivals, switch_round, record)
    runner.run(1, T - 1)
    runner.trace.T = T
    return runner.trace


def run_coupled(policy: PolicyConfig, inst: Instance, T: int, seed: int,
                record: bool = True) -> tuple[Trace, Trace]:
    """Algorithm queue and fully optimal queue on one stream, round by round."""
    if T < 1:
        raise ValueError("T must be at least 1")
    policy = policy.resolve(inst, T)
    stream, arrivals = _setup(inst, seed)
    alg = QueueRunner(policy, inst, stream, arrivals, record=record)
    opt = QueueRunner(OPTIMAL, inst, stream, arrivals, record=record)
    for t in range(1, T):
        alg.step(t)
        opt.step(t)
    alg.trace.T = opt.trace.T = T
    return alg.trace, opt.trace


def run_policy_switch(policy: PolicyConfig, inst: Instance, T: int, t1: int, seed: int) -> Trace:
    """Learned policy for rounds 1..t1, optimal oracle for t1+1..T-1."""
    if not 0 <= t1 <= max(T - 1, 0):
        raise ValueError("switch round must lie in [0, T-1]")
    return run_queue(policy, inst, T, seed, switch_round=t1)


# ---------------------------------------------------------------------------
# psi diagnostic


AGREE_00 = "AGREE_00"
AGREE_11 = "AGREE_11"
DISAGREE = "DISAGREE_PLUS0_MINUS1"
NONE = "NONE"


@dataclass(frozen=True)
class PsiSample:
    t: int
    T: int
    seed: int
    value: int
    divergence_event: str
    policy: str = ""

    def violations(self) -> list[str]:
        out = []
        if self.value not in (-1, 0, 1):
            out.append("psi outside {-1,0,1}")
        if self.divergence_event == DISAGREE and self.value not in (0, 1):
            out.append("disagreement with psi outside {0,1}")
        if self.divergence_event in (AGREE_00, AGREE_11) and self.value not in (-1, 0):
            out.append("agreement with psi outside {-1,0}")
        if self.divergence_event == NONE and self.value != 0:
            out.append("empty-queue round with nonzero psi")
        return out


class CouplingAssertionError(AssertionError):
    pass


def psi_samples(policy: PolicyConfig, inst: Instance, T: int, ts: Iterable[int], seed: int,
                check_estimators: bool = False) -> list[PsiSample]:
    """psi(t, T) for several switch rounds on one sample path.

    The learned queue is run once; at each requested ``t`` it is forked just
    before round ``t`` (the minus queue, optimal from ``t``) and just after
    it (the plus queue, optimal from ``t+1``).  Both forks then run the
    oracle to ``T``.
    """
    wanted = sorted(set(int(t) for t in ts))
    if wanted and not (1 <= wanted[0] and wanted[-1] <= T - 1):
        raise ValueError("switch rounds must lie in [1, T-1]")
    policy = policy.resolve(inst, T)
    stream, arrivals = _setup(inst, seed)
    learned = QueueRunner(policy, inst, stream, arrivals, record=False)
    out = []
    want = set(wanted)
    last = wanted[-1] if wanted else 0
    for t in range(1, last + 1):
        if t in want:
            minus = learned.fork(switch_round=t - 1, keep_policy_state=check_estimators)
            if check_estimators:
                _check_same_estimators(learned, minus)
        learned.step(t)
        if t not in want:
            continue
        plus = learned.fork(switch_round=t, keep_policy_state=False)
        rec_plus = learned.last
        rec_minus = minus.step(t)
        if rec_plus.queue_len == 0:
            event = NONE
        elif rec_plus.departed and not rec_minus.departed:
            raise CouplingAssertionError(f"D+ > D- at round {t} (seed {seed})")
        elif rec_plus.departed:
            event = AGREE_11
        elif rec_minus.departed:
            event = DISAGREE
        else:
            event = AGREE_00
        for s in range(t + 1, T):
            plus.step(s)
            minus.step(s)
        out.append(PsiSample(t, T, seed, len(plus.queue) - len(minus.queue), event, policy.name))
    return out


def _check_same_estimators(a: QueueRunner, b: QueueRunner) -> None:
    if a.state.estimators is None:
        return
    for ea, eb in zip(a.state.estimators, b.state.estimators):
        if not (np.array_equal(ea.theta_hat, eb.theta_hat) and np.array_equal(ea.V, eb.V)):
            raise CouplingAssertionError("coupled estimators diverged before the switch round")


def psi_sample(policy: PolicyConfig, inst: Instance, T: int, t: int, seed: int) -> PsiSample:
    if not 1 <= t <= T - 1:
        raise ValueError("need 1 <= t <= T-1")
    return psi_samples(policy, inst, T, [t], seed, check_estimators=True)[0]


# ---------------------------------------------------------------------------
# regret and trace diagnostics


@dataclass
class RegretEstimate:
    mean: float
    std: float
    degenerate: bool
    final_q: np.ndarray
    final_q_star: np.ndarray
    curve: np.ndarray  # mean Q(t), t = 1..T
    curve_star: np.ndarray
    curves: np.ndarray  # (n_reps, T)
    curves_star: np.ndarray

    def report_rows(self, policy: str):
        """Rows of the regret report: (policy, rep, t, Q, Q_star)."""
        for rep, (q, qs) in enumerate(zip(self.curves, self.curves_star)):
            for t in range(len(q)):
                yield policy, rep, t + 1, int(q[t]), int(qs[t])


def rep_seed(master: int, rep: int) -> int:
    return derive_seed(master, "rep", rep)


def estimate_regret(policy: PolicyConfig, inst: Instance, T: int, n_reps: int, seed: int) -> RegretEstimate:
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    qs, qstars, curves, curves_star = [], [], [], []
    for rep in range(n_reps):
        alg, opt = run_coupled(policy, inst, T, rep_seed(seed, rep), record=False)
        qs.append(alg.final_q)
        qstars.append(opt.final_q)
        curves.append(alg.q)
        curves_star.append(opt.q)
    diff = np.asarray(qs, float) - np.asarray(qstars, float)
    std = float(diff.std(ddof=1)) if n_reps > 1 else 0.0
    curves, curves_star = np.asarray(curves), np.asarray(curves_star)
    return RegretEstimate(float(diff.mean()), std, n_reps == 1, np.asarray(qs), np.asarray(qstars),
                          curves.mean(axis=0), curves_star.mean(axis=0), curves, curves_star)


def elliptical_potential(trace: Trace, inst: Instance,
                         radius: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Running sum of ``min(1, ||x_t||^2_{V^{-1}})`` and its deterministic bound, per round.

    The bound ``2Kd log(1 + t L^2 / (dK kappa lambda0))`` assumes ``||x_t|| <= L``.
    ``L`` defaults to 1 when every served feature lies in the unit ball and to
    the largest served norm otherwise.
    """
    K, d = inst.K, inst.d
    terms = np.array([0.0 if r.uncertainty is None else min(1.0, r.uncertainty ** 2)
                      for r in trace.records])
    if radius is None:
        norms = [float(np.linalg.norm(r.chosen_feature)) for r in trace.records
                 if r.uncertainty is not None]
        radius = max([1.0] + norms)
    lhs = np.cumsum(terms)
    t = np.arange(1, len(terms) + 1, dtype=float)
    rhs = 2.0 * K * d * np.log1p(t * radius ** 2 / (d * K * inst.kappa * inst.lambda0))
    return lhs, rhs


def check_elliptical_potential(trace: Trace, inst: Instance,
                               radius: Optional[float] = None) -> tuple[float, float, bool]:
    lhs, rhs = elliptical_potential(trace, inst, radius)
    if len(lhs) == 0:
        return 0.0, 0.0, True
    return float(lhs[-1]), float(rhs[-1]), bool(np.all(lhs <= rhs + 1e-9))


def count_bad_rounds(trace: Trace, slack: float) -> int:
    """Rounds whose chosen pair has ``||x||_{V^{-1}} > slack / (4 beta)``."""
    n = 0
    for r in trace.records:
        if r.uncertainty is not None and r.uncertainty > slack / (4.0 * r.beta):
            n += 1
    return n


def bad_round_bound(inst: Instance, T: int, delta: float) -> float:
    bT = beta_horizon(T, inst, delta)
    K, d = inst.K, inst.d
    return 32.0 * bT ** 2 * K * d * math.log1p(T / (d * K * inst.kappa * inst.lambda0)) / inst.slack ** 2


def confidence_violations(estimators, inst: Instance, X: np.ndarray) -> int:
    """Count (x, k) pairs where the prediction error exceeds ``beta_k ||x||_{V_k^{-1}}``."""
    from scipy.special import expit
    n = 0
    for k, est in enumerate(estimators):
        err = np.abs(expit(X @ est.theta_hat) - expit(X @ inst.theta_star[k]))
        n += int(np.sum(err > est.beta * est.factor.inv_norms(X)))
    return n


def coverage_run(policy: PolicyConfig, inst: Instance, T: int, seed: int, check_every: int = 50,
                 n_contexts: int = 20) -> int:
    """Run one queue and count confidence-bound violations at sampled rounds.

    At every ``check_every``-th round the current estimators are tested on
    ``n_contexts`` fresh contexts (and the chosen job of that round) for
    every server.
    """
    policy = policy.resolve(inst, T)
    if policy.kind not in LEARNED:
        raise ValueError("coverage needs a learned policy")
    stream, arrivals = _setup(inst, seed)
    runner = QueueRunner(policy, inst, stream, arrivals, record=False)
    rng = np.random.default_rng(derive_seed(seed, "coverage"))
    accept = inst.accept_filter()
    violations = 0
    for t in range(1, T):
        if t % check_every == 0:
            X = inst.contexts.sample(rng, 4 * n_contexts)
            if accept is not None:
                X = X[[accept(x) for x in X]]
            X = X[:n_contexts]
            if runner.queue.jobs:
                X = np.vstack([X, runner.queue.features()])
            violations += confidence_violations(runner.state.estimators, inst, X)
        runner.step(t)
    return violations
