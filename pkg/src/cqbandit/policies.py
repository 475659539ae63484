"""Job-server selection rules.

Every ``select_*`` function is a pure function of (policy state, queue,
round, stream): it reads the shared uniforms but never mutates anything.
State transitions (estimator refits, the round-robin pointer, bandit
counts, the next exploration coin) happen in :func:`update` and
:func:`end_round`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import betaincinv, expit, ndtri

from .env import Instance, QueueState
from .estimation import ServerEstimator, confidence_radius
from .streams import Channel, RandomnessStream


class PolicyKind(str, Enum):
    CQB_EPS = "CQB_EPS"
    CQB_OPT = "CQB_OPT"
    OPTIMAL = "OPTIMAL"
    RANDOM = "RANDOM"
    CQB_EPS_OPT = "CQB_EPS_OPT"
    CQB_TS = "CQB_TS"
    Q_UCB = "Q_UCB"
    Q_THS = "Q_THS"


LEARNED = {PolicyKind.CQB_EPS, PolicyKind.CQB_OPT, PolicyKind.CQB_EPS_OPT, PolicyKind.CQB_TS}
MAB = {PolicyKind.Q_UCB, PolicyKind.Q_THS}


class TauMode(str, Enum):
    THEORETICAL = "THEORETICAL"
    PRACTICAL = "PRACTICAL"
    EXPLICIT = "EXPLICIT"


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    eps_rate: Optional[float] = None  # None: T^{-1/2}
    tau: Optional[int] = None
    tau_mode: TauMode = TauMode.PRACTICAL
    tau_C: float = 3e-4
    C3: float = 1.0
    ts_R: float = 0.25
    delta: Optional[float] = None  # None: T^{-2} for CQB_EPS, T^{-1} otherwise
    beta_scale: float = 1.0  # multiplies every confidence radius; 1.0 = as derived

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "tau_mode", TauMode(self.tau_mode))
        if self.eps_rate is not None and not 0.0 <= self.eps_rate < 1.0 + 1e-15:
            raise ValueError("eps_rate must lie in [0, 1]")
        if self.beta_scale <= 0:
            raise ValueError("beta_scale must be positive")

    @property
    def name(self) -> str:
        return self.kind.value

    def resolve(self, inst: Instance, T: int) -> "PolicyConfig":
        """Fill in horizon-dependent defaults."""
        eps = self.eps_rate if self.eps_rate is not None else T ** -0.5
        delta = self.delta
        if delta is None:
            delta = T ** -2.0 if self.kind is PolicyKind.CQB_EPS else T ** -1.0
            delta = min(delta, 0.5)
        tau = self.tau
        if self.kind is PolicyKind.CQB_EPS:
            tau = compute_tau(self.tau_mode, replace(self, eps_rate=eps, delta=delta), inst, T)
        return replace(self, eps_rate=eps, delta=delta, tau=tau)


def beta_horizon(T: int, inst: Instance, delta: float) -> float:
    """Radius after ``T`` observations on one server; bounds every per-server radius."""
    return confidence_radius(T, inst.kappa, inst.lambda0, inst.d, inst.K, delta, inst.S)


def compute_tau(mode, cfg: PolicyConfig, inst: Instance, T: int) -> int:
    """Length of the pure-exploration phase, rounded up and clamped to [0, T-1]."""
    mode = TauMode(mode)
    if mode is TauMode.EXPLICIT:
        if cfg.tau is None:
            raise ValueError("EXPLICIT tau mode needs cfg.tau")
        raw = float(cfg.tau)
    else:
        eps = cfg.eps_rate if cfg.eps_rate is not None else T ** -0.5
        gap = inst.slack - 2.0 * eps
        if gap <= 0:
            raise ValueError(f"slack {inst.slack} must exceed twice the exploration rate {eps}")
        d, K, lam = inst.d, inst.K, inst.lam
        if mode is TauMode.PRACTICAL:
            raw = cfg.tau_C * d ** 3 * math.log(T) * K / lam / gap ** 2
        else:
            delta = cfg.delta if cfg.delta is not None else T ** -2.0
            s2 = inst.sigma0_sq
            bT = beta_horizon(T, inst, delta)
            raw = (2.0 * cfg.C3 * K / lam) * ((d + math.log(K / delta)) / s2 ** 2
                                              + 16.0 * bT ** 2 / (s2 * gap ** 2)) \
                + math.log(1.0 / delta) / (2.0 * lam ** 2)
    return int(min(max(math.ceil(raw - 1e-12), 0), max(T - 1, 0)))


@dataclass
class PolicyState:
    K: int
    p: int = 0
    estimators: Optional[list[ServerEstimator]] = None
    explore_prev: bool = False
    successes: Optional[np.ndarray] = None
    pulls: Optional[np.ndarray] = None

    def copy(self) -> "PolicyState":
        return PolicyState(
            K=self.K, p=self.p,
            estimators=None if self.estimators is None else [e.copy() for e in self.estimators],
            explore_prev=self.explore_prev,
            successes=None if self.successes is None else self.successes.copy(),
            pulls=None if self.pulls is None else self.pulls.copy(),
        )


def init_state(cfg: PolicyConfig, inst: Instance) -> PolicyState:
    st = PolicyState(K=inst.K)
    if cfg.kind in LEARNED:
        st.estimators = [ServerEstimator(k, inst.d, inst.K, inst.kappa, inst.lambda0, inst.S, cfg.delta,
                                         radius_scale=cfg.beta_scale)
                         for k in range(inst.K)]
    elif cfg.kind in MAB:
        st.successes = np.zeros(inst.K)
        st.pulls = np.zeros(inst.K)
    return st


@dataclass(frozen=True)
class Decision:
    job_index: int
    server: int
    mode: str
    explored: bool = False

    @property
    def action(self):
        return (self.job_index, self.server)


# ---------------------------------------------------------------------------
# scores


def ucb_scores(estimators: list[ServerEstimator], F: np.ndarray) -> np.ndarray:
    """``mu(x.theta_k) + beta_k ||x||_{V_k^{-1}}`` for every (row of F, server)."""
    F = np.atleast_2d(F)
    out = np.empty((F.shape[0], len(estimators)))
    for k, est in enumerate(estimators):
        out[:, k] = expit(F @ est.theta_hat) + est.beta * est.factor.inv_norms(F)
    return out


def _first_argmax(scores: np.ndarray) -> tuple[int, int]:
    # row-major first maximum = earliest entry round, then lowest server
    flat = int(np.argmax(scores))
    return divmod(flat, scores.shape[1])


def _random_pair(queue: QueueState, K: int, stream: RandomnessStream, t: int) -> tuple[int, int]:
    u = stream.uniforms(t, Channel.SERVER_PICK, 2)
    return min(int(u[0] * len(queue)), len(queue) - 1), min(int(u[1] * K), K - 1)


def arrived_last_round(queue: QueueState, t: int) -> bool:
    return bool(queue.jobs) and queue.jobs[-1].entry_round == t


# ---------------------------------------------------------------------------
# selection rules


def select_cqb_opt(state: PolicyState, queue: QueueState, t: int) -> Decision:
    i, k = _first_argmax(ucb_scores(state.estimators, queue.features()))
    return Decision(i, k, "UCB")


def select_cqb_eps(state: PolicyState, queue: QueueState, t: int, tau: int,
                   stream: RandomnessStream) -> Decision:
    fresh = arrived_last_round(queue, t)
    if t <= tau and fresh:
        return Decision(len(queue) - 1, state.p, "PURE_EXPLORE", explored=True)
    if t > tau and state.explore_prev and fresh:
        u = stream.uniform(t, Channel.SERVER_PICK, lane=1)
        return Decision(len(queue) - 1, min(int(u * state.K), state.K - 1), "EPS_EXPLORE", explored=True)
    return select_cqb_opt(state, queue, t)


def select_optimal(queue: QueueState, inst: Instance) -> Decision:
    best_i, best_rate, best_k = -1, -1.0, -1
    for i, job in enumerate(queue.jobs):
        rate, k = job.best_rate, job.best_server
        if k < 0 or rate != rate:
            rates = inst.rates(job.feature)
            k = int(np.argmax(rates))
            rate = float(rates[k])
        if rate > best_rate:  # strict: earlier job wins ties
            best_i, best_rate, best_k = i, rate, k
    return Decision(best_i, best_k, "OPTIMAL")


def select_random(queue: QueueState, K: int, stream: RandomnessStream, t: int) -> Decision:
    i, k = _random_pair(queue, K, stream, t)
    return Decision(i, k, "RANDOM", explored=True)


def select_cqb_eps_opt(state: PolicyState, queue: QueueState, t: int, stream: RandomnessStream,
                       eps: float) -> Decision:
    if stream.uniform(t, Channel.EXPLORE_COIN) <= eps:
        i, k = _random_pair(queue, state.K, stream, t)
        return Decision(i, k, "EPS_EXPLORE", explored=True)
    return select_cqb_opt(state, queue, t)


def ts_draws(state: PolicyState, F: np.ndarray, stream: RandomnessStream, t: int,
             ts_R: float) -> np.ndarray:
    """Gaussian reward samples, one per (job, server); lane = job * K + server."""
    F = np.atleast_2d(F)
    K = state.K
    z = ndtri(stream.uniforms(t, Channel.SERVER_PICK, F.shape[0] * K)).reshape(F.shape[0], K)
    out = np.empty_like(z)
    for k, est in enumerate(state.estimators):
        mean = F @ est.theta_hat
        var = est.beta * est.factor.inv_norms(F) ** 2 / ts_R ** 2
        out[:, k] = mean + np.sqrt(var) * z[:, k]
    return out


def select_cqb_ts(state: PolicyState, queue: QueueState, t: int, stream: RandomnessStream,
                  ts_R: float) -> Decision:
    i, k = _first_argmax(ts_draws(state, queue.features(), stream, t, ts_R))
    return Decision(i, k, "TS")


def mab_explore_prob(t: int, K: int) -> float:
    return min(1.0, 3.0 * K * math.log(t) ** 2 / t)


def mab_means(state: PolicyState) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(state.pulls > 0, state.successes / np.maximum(state.pulls, 1), 0.0)


def select_q_ucb(state: PolicyState, queue: QueueState, t: int, stream: RandomnessStream) -> Decision:
    K = state.K
    if stream.uniform(t, Channel.EXPLORE_COIN) <= mab_explore_prob(t, K):
        u = stream.uniform(t, Channel.SERVER_PICK)
        return Decision(0, min(int(u * K), K - 1), "MAB_EXPLORE", explored=True)
    bonus = np.full(K, np.inf)
    pulled = state.pulls > 0
    bonus[pulled] = np.sqrt(math.log(t) ** 2 / (2.0 * state.pulls[pulled]))
    index = mab_means(state) + bonus
    return Decision(0, int(np.argmax(index)), "MAB_EXPLOIT")


def ths_parameters(state: PolicyState) -> tuple[np.ndarray, np.ndarray]:
    # mu_hat * T + 1 = successes + 1 and (1 - mu_hat) * T + 1 = failures + 1
    return state.successes + 1.0, state.pulls - state.successes + 1.0


def select_q_ths(state: PolicyState, queue: QueueState, t: int, stream: RandomnessStream) -> Decision:
    K = state.K
    if stream.uniform(t, Channel.EXPLORE_COIN) <= mab_explore_prob(t, K):
        u = stream.uniform(t, Channel.SERVER_PICK)
        return Decision(0, min(int(u * K), K - 1), "MAB_EXPLORE", explored=True)
    a, b = ths_parameters(state)
    draws = betaincinv(a, b, stream.uniforms(t, Channel.SERVER_PICK, K))
    return Decision(0, int(np.argmax(draws)), "MAB_EXPLOIT")


def sample_explore_flag(stream: RandomnessStream, t: int, eps: float) -> bool:
    return stream.uniform(t, Channel.EXPLORE_COIN) <= eps


def select(cfg: PolicyConfig, state: PolicyState, queue: QueueState, t: int,
           stream: RandomnessStream, inst: Instance) -> Decision:
    """Dispatch on ``cfg.kind``; ``cfg`` must be resolved and ``queue`` non-empty."""
    kind = cfg.kind
    if kind is PolicyKind.OPTIMAL:
        return select_optimal(queue, inst)
    if kind is PolicyKind.CQB_OPT:
        return select_cqb_opt(state, queue, t)
    if kind is PolicyKind.CQB_EPS:
        return select_cqb_eps(state, queue, t, cfg.tau, stream)
    if kind is PolicyKind.RANDOM:
        return select_random(queue, inst.K, stream, t)
    if kind is PolicyKind.CQB_EPS_OPT:
        return select_cqb_eps_opt(state, queue, t, stream, cfg.eps_rate)
    if kind is PolicyKind.CQB_TS:
        return select_cqb_ts(state, queue, t, stream, cfg.ts_R)
    if kind is PolicyKind.Q_UCB:
        return select_q_ucb(state, queue, t, stream)
    if kind is PolicyKind.Q_THS:
        return select_q_ths(state, queue, t, stream)
    raise ValueError(f"unknown policy {kind}")


def pair_diagnostics(state: PolicyState, x: np.ndarray, k: int) -> tuple[float, float]:
    """(``||x||_{V_{k}^{-1}}``, ``beta_k``) before the round's update."""
    est = state.estimators[k]
    return float(est.factor.inv_norms(x)[0]), est.beta


def update(cfg: PolicyConfig, state: PolicyState, decision: Decision, x: np.ndarray,
           departed: bool) -> None:
    """Feed back the outcome of a real (non-dummy) service."""
    if decision.mode == "PURE_EXPLORE":
        state.p = (state.p + 1) % state.K
    if state.estimators is not None:
        state.estimators[decision.server].observe(x, int(departed))
    elif state.pulls is not None:
        state.pulls[decision.server] += 1
        state.successes[decision.server] += int(departed)


def end_round(cfg: PolicyConfig, state: PolicyState, t: int, stream: RandomnessStream) -> None:
    if cfg.kind is PolicyKind.CQB_EPS:
        state.explore_prev = sample_explore_flag(stream, t, cfg.eps_rate)
