"""Contextual queueing bandits: a single queue served by K logistic servers,
learned schedulers, and coupled runs that measure queue-length regret."""

from .coupling import (PsiSample, RegretEstimate, Trace, count_bad_rounds, estimate_regret,
                       psi_sample, psi_samples, run_coupled, run_policy_switch, run_queue)
from .env import (Instance, InstanceConfig, Job, QueueState, RoundRecord, generate_instance,
                  logistic, sample_arrival, service_draw, step)
from .estimation import (ServerEstimator, confidence_radius, fit_mle, project, rank_one_update,
                         uncertainty)
from .harness import ExperimentConfig, build_config, psi_check, run_experiment, run_sweep
from .policies import PolicyConfig, PolicyKind, TauMode, compute_tau
from .streams import Channel, RandomnessStream, derive_seed

__version__ = "0.1.0"
