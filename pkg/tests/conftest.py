import numpy as np
import pytest

from cqbandit.contexts import SyntheticContexts
from cqbandit.env import Instance, InstanceConfig, generate_instance


class ScriptedArrivals:
    """Arrival stub: ``plan[t]`` is a feature vector (arrival) or None."""

    def __init__(self, inst, stream, plan):
        from cqbandit.env import Job
        self.inst = inst
        self.stream = stream
        self._jobs = {}
        for t, x in plan.items():
            if x is not None:
                x = np.asarray(x, float)
                rates = inst.rates(x)
                k = int(np.argmax(rates))
                self._jobs[t] = Job(x, t + 1, float(rates[k]), k)

    def job(self, t):
        return self._jobs.get(t)


def make_instance(theta, lam=0.5, slack=0.1, kappa=10.0, S=None, slack_mode="raw", normalize=False):
    theta = np.atleast_2d(np.asarray(theta, float))
    K, d = theta.shape
    if S is None:
        S = float(np.linalg.norm(theta, axis=1).max()) + 1.0
    return Instance(d=d, K=K, lam=lam, theta_star=theta, slack=slack, kappa=kappa, S=S,
                    contexts=SyntheticContexts(d, normalize=normalize), slack_mode=slack_mode)


@pytest.fixture
def small_instance():
    return generate_instance(InstanceConfig(d=2, K=2, lam=0.5, slack=0.1, n_validation=2000), 7)


@pytest.fixture(scope="session")
def reference_instance():
    return generate_instance(InstanceConfig(), 11)
