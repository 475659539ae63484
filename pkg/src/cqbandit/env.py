"""Discrete-time single-queue environment with logistic service.

Round ``t`` starts with ``Q(t)`` jobs.  The agent serves one job on one
server; the job leaves iff the shared service uniform falls below its
logistic rate.  An arrival in round ``t`` joins the queue for round ``t+1``.
When the queue is empty a dummy job is nominally served and the outcome is
thrown away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .contexts import MatrixContexts, SyntheticContexts
from .streams import Channel, RandomnessStream, derive_seed


class InfeasibleInstanceError(RuntimeError):
    pass


class ContextRejectionError(RuntimeError):
    pass


def logistic(z):
    """``1 / (1 + exp(-z))``, evaluated without overflow for large ``|z|``."""
    return expit(z)


class Job:
    __slots__ = ("feature", "entry_round", "best_rate", "best_server")

    def __init__(self, feature: np.ndarray, entry_round: int,
                 best_rate: float = math.nan, best_server: int = -1):
        self.feature = feature
        self.entry_round = entry_round
        # true optimal (rate, server) cached at arrival; used by the oracle policy
        self.best_rate = best_rate
        self.best_server = best_server

    def __repr__(self):
        return f"Job(entry_round={self.entry_round}, feature={np.round(self.feature, 4).tolist()})"

    def same_as(self, other: "Job") -> bool:
        return (self.entry_round == other.entry_round
                and np.array_equal(self.feature, other.feature))


class QueueState:
    """FIFO list of pending jobs.  ``step`` mutates it; use ``copy`` to fork."""

    __slots__ = ("jobs",)

    def __init__(self, jobs: Optional[list[Job]] = None):
        self.jobs = list(jobs) if jobs else []

    def __len__(self):
        return len(self.jobs)

    def copy(self) -> "QueueState":
        # jobs are never mutated after creation, sharing them is safe
        return QueueState(self.jobs)

    def features(self) -> np.ndarray:
        return np.array([j.feature for j in self.jobs])

    def same_as(self, other: "QueueState") -> bool:
        return len(self) == len(other) and all(a.same_as(b) for a, b in zip(self.jobs, other.jobs))

    def check(self) -> None:
        rounds = [j.entry_round for j in self.jobs]
        assert all(a <= b for a, b in zip(rounds, rounds[1:])), "FIFO order broken"


@dataclass
class Instance:
    d: int
    K: int
    lam: float
    theta_star: np.ndarray  # (K, d)
    slack: float
    kappa: float = 10.0
    S: float = 1.0
    lambda0: float = 1.0
    R: float = 0.25
    sigma0_sq: float = 1.0 / 3.0
    dummy_job: np.ndarray = None
    contexts: object = None
    # "conditioned": arriving contexts are drawn from the source restricted to
    # max_k mu(x.theta_k) >= lam + slack; "raw": the source is used as is
    slack_mode: str = "conditioned"
    certificate: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=float).reshape(self.K, self.d)
        if self.dummy_job is None:
            self.dummy_job = np.zeros(self.d)

    def rates(self, x: np.ndarray) -> np.ndarray:
        """True service rates of feature(s) ``x`` on every server."""
        return logistic(x @ self.theta_star.T)

    def rate(self, x: np.ndarray, k: int) -> float:
        # same evaluation path as ``rates`` so cached optima compare exactly
        return float(self.rates(x)[k])

    def meets_slack(self, x: np.ndarray) -> bool:
        return float(np.max(x @ self.theta_star.T)) >= self._slack_logit

    @property
    def _slack_logit(self) -> float:
        return _logit(self.lam + self.slack)

    def accept_filter(self) -> Optional[Callable[[np.ndarray], bool]]:
        return self.meets_slack if self.slack_mode == "conditioned" else None


def _logit(p: float) -> float:
    if p >= 1.0:
        return math.inf
    if p <= 0.0:
        return -math.inf
    return math.log(p / (1.0 - p))


@dataclass
class RoundRecord:
    t: int
    arrived: bool
    arrival_feature: Optional[np.ndarray]
    queue_len: int
    chosen_entry: Optional[int]
    chosen_feature: Optional[np.ndarray]
    chosen_server: Optional[int]
    departed: bool
    explored: bool
    dummy_served: bool
    mode: str
    uncertainty: Optional[float] = None
    beta: Optional[float] = None
    bad_round: bool = False

    def key(self) -> tuple:
        """Hashable summary used for exact trace comparisons."""
        feat = None if self.chosen_feature is None else self.chosen_feature.tobytes()
        arr = None if self.arrival_feature is None else self.arrival_feature.tobytes()
        return (self.t, self.arrived, arr, self.queue_len, self.chosen_entry, feat,
                self.chosen_server, self.departed, self.dummy_served)


MAX_CONTEXT_ATTEMPTS = 100_000


def sample_arrival(stream: RandomnessStream, t: int, ctx_source, lam: float,
                   accept: Optional[Callable[[np.ndarray], bool]] = None):
    """Return ``(arrived, feature)`` for round ``t``.

    With ``accept`` given, context draws are repeated (attempt lanes
    0, 1, ...) until one passes, which samples the source conditioned on the
    predicate.
    """
    if t < 1:
        raise ValueError("rounds start at 1")
    if not stream.uniform(t, Channel.ARRIVAL_COIN) <= lam:
        return False, None
    if accept is None:
        return True, ctx_source.draw(stream, t, 0)
    batch = getattr(ctx_source, "draw_batch", None)
    attempt = 0
    while attempt < MAX_CONTEXT_ATTEMPTS:
        if batch is not None:
            xs = batch(stream, t, attempt, 16)
            for x in xs:
                if accept(x):
                    return True, x
            attempt += 16
        else:
            x = ctx_source.draw(stream, t, attempt)
            if accept(x):
                return True, x
            attempt += 1
    raise ContextRejectionError(f"no admissible context after {MAX_CONTEXT_ATTEMPTS} draws at round {t}")


class ArrivalProcess:
    """Memoised arrivals for one (instance, stream); shared by coupled queues."""

    def __init__(self, inst: Instance, stream: RandomnessStream):
        self.inst = inst
        self.stream = stream
        self._accept = inst.accept_filter()
        self._memo: dict[int, Optional[Job]] = {}

    def job(self, t: int) -> Optional[Job]:
        if t in self._memo:
            return self._memo[t]
        arrived, x = sample_arrival(self.stream, t, self.inst.contexts, self.inst.lam, self._accept)
        job = None
        if arrived:
            rates = self.inst.rates(x)
            k = int(np.argmax(rates))
            job = Job(x, t + 1, float(rates[k]), k)
        self._memo[t] = job
        return job


def service_draw(x: np.ndarray, k: int, inst: Instance, stream: RandomnessStream, t: int) -> bool:
    if not 0 <= k < inst.K:
        raise IndexError(f"server {k} out of range for K={inst.K}")
    return stream.uniform(t, Channel.SERVICE_COIN) <= inst.rate(x, k)


def step(state: QueueState, action, inst: Instance, stream: RandomnessStream, t: int,
         arrivals: Optional[ArrivalProcess] = None, mode: str = "", explored: bool = False):
    """Advance ``state`` through round ``t`` in place and return the round record.

    ``action`` is ``(job_index, server)`` or ``None`` for an empty queue.
    """
    q = len(state)
    u = stream.uniform(t, Channel.SERVICE_COIN)  # drawn every round, dummy or not
    if q == 0:
        if action is not None:
            raise ValueError("empty queue takes no action (dummy convention)")
        chosen = None
        departed = False
        k = None
    else:
        if action is None:
            raise ValueError("non-empty queue needs an action")
        idx, k = action
        if not 0 <= idx < q:
            raise IndexError(f"job index {idx} out of range for Q={q}")
        if not 0 <= k < inst.K:
            raise IndexError(f"server {k} out of range for K={inst.K}")
        chosen = state.jobs[idx]
        if k == chosen.best_server:
            rate = chosen.best_rate
        else:
            rate = inst.rate(chosen.feature, k)
        departed = u <= rate
        if departed:
            del state.jobs[idx]

    if arrivals is not None:
        new = arrivals.job(t)
    else:
        arrived, x = sample_arrival(stream, t, inst.contexts, inst.lam, inst.accept_filter())
        new = None
        if arrived:
            rates = inst.rates(x)
            kb = int(np.argmax(rates))
            new = Job(x, t + 1, float(rates[kb]), kb)
    if new is not None:
        state.jobs.append(new)

    return RoundRecord(
        t=t,
        arrived=new is not None,
        arrival_feature=None if new is None else new.feature,
        queue_len=q,
        chosen_entry=None if chosen is None else chosen.entry_round,
        chosen_feature=None if chosen is None else chosen.feature,
        chosen_server=k,
        departed=departed,
        explored=explored,
        dummy_served=q == 0,
        mode=mode if q else "DUMMY",
    )


@dataclass
class InstanceConfig:
    d: int = 5
    K: int = 5
    lam: float = 0.7
    slack: float = 0.1
    kappa: float = 10.0
    lambda0: float = 1.0
    R: float = 0.25
    S: Optional[float] = None  # None: max_k ||theta_k|| rounded up to 0.1
    sigma0_sq: Optional[float] = None  # None: estimated from the validation sample
    context: str = "synthetic"  # "synthetic" or a CSV path
    normalize: Optional[bool] = None  # None: off for synthetic, as in the reference runs
    standardize: bool = False
    slack_mode: str = "conditioned"
    n_validation: int = 10_000
    min_acceptance: float = 0.05
    max_attempts: int = 1000

    def make_contexts(self):
        if self.context == "synthetic":
            return SyntheticContexts(self.d, normalize=bool(self.normalize))
        from .contexts import load_contexts_csv
        src = load_contexts_csv(self.context, standardize=self.standardize,
                                normalize=bool(self.normalize))
        if src.d != self.d:
            raise ValueError(f"{self.context}: file has {src.d} columns but d={self.d}")
        return src


def generate_instance(cfg: InstanceConfig, seed: int, contexts=None) -> Instance:
    """Sample server parameters componentwise from Unif(-1, 1) until the slack
    certificate passes on ``cfg.n_validation`` validation contexts.

    In "raw" mode every validation context must satisfy
    ``max_k mu(x.theta_k) >= lam + slack``.  In "conditioned" mode arrivals are
    restricted to such contexts, so the certificate instead requires that a
    fraction ``cfg.min_acceptance`` of raw contexts qualifies (the conditioned
    sampler would otherwise stall); the accepted validation contexts then
    satisfy the slack bound by construction, which is re-checked.
    """
    if cfg.slack_mode not in ("conditioned", "raw"):
        raise ValueError(f"unknown slack_mode {cfg.slack_mode!r}")
    if contexts is None:
        contexts = cfg.make_contexts()
    rng = np.random.default_rng(derive_seed(seed, "instance"))
    val_rng = np.random.default_rng(derive_seed(seed, "validation"))
    X = contexts.sample(val_rng, cfg.n_validation)
    threshold = cfg.lam + cfg.slack
    z_min = _logit(threshold)
    for attempt in range(1, cfg.max_attempts + 1):
        theta = rng.uniform(-1.0, 1.0, size=(cfg.K, cfg.d))
        zmax = (X @ theta.T).max(axis=1)
        ok = zmax >= z_min
        frac = float(ok.mean())
        if cfg.slack_mode == "raw":
            passed = bool(ok.all())
        else:
            passed = frac >= cfg.min_acceptance and frac > 0
        if not passed:
            continue
        accepted = X[ok]
        min_slack = float(logistic(zmax[ok]).min() - cfg.lam)
        assert min_slack >= cfg.slack - 1e-12
        norms = np.linalg.norm(theta, axis=1)
        S = cfg.S if cfg.S is not None else math.ceil(norms.max() * 10.0 - 1e-9) / 10.0
        if norms.max() > S:
            raise ValueError(f"S={S} is below max_k ||theta_k|| = {norms.max():.4f}")
        if cfg.sigma0_sq is not None:
            sigma0_sq = cfg.sigma0_sq
        else:
            sigma0_sq = float(np.linalg.eigvalsh(accepted.T @ accepted / len(accepted)).min())
        return Instance(
            d=cfg.d, K=cfg.K, lam=cfg.lam, theta_star=theta, slack=cfg.slack,
            kappa=cfg.kappa, S=S, lambda0=cfg.lambda0, R=cfg.R, sigma0_sq=sigma0_sq,
            contexts=contexts, slack_mode=cfg.slack_mode,
            certificate={"attempts": attempt, "acceptance_rate": frac,
                         "min_slack": min_slack, "n_validation": cfg.n_validation},
        )
    raise InfeasibleInstanceError(
        f"slack certificate failed {cfg.max_attempts} times for "
        f"lam={cfg.lam}, slack={cfg.slack}, d={cfg.d}, K={cfg.K}")
