"""Per-server logistic estimation.

Each server keeps its own history of (feature, outcome) pairs, a regularised
maximum-likelihood fit, a projection of that fit onto the ball ``||theta|| <= S``
measured in the design-matrix norm, and a Cholesky factor of the design
matrix ``V = kappa * lambda0 * I + sum x x^T`` that is updated in O(d^2) per
observation.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit

COND_LIMIT = 1e12


class ConvergenceError(RuntimeError):
    pass


class SingularDesignError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# regularised MLE


def mle_objective(theta, X, r, reg):
    """Regularised log-likelihood (to be maximised)."""
    z = X @ theta
    # r log mu(z) + (1 - r) log(1 - mu(z)), with log(1 - mu(z)) = log mu(-z)
    ll = np.sum(r * log_expit(z) + (1.0 - r) * log_expit(-z))
    return float(ll - 0.5 * reg * theta @ theta)


def mle_gradient(theta, X, r, reg):
    return X.T @ (r - expit(X @ theta)) - reg * theta


def fit_mle(X, r, reg: float, theta0=None, tol: float = 1e-8, max_iter: int = 100):
    """Damped Newton ascent on the regularised cross-entropy objective.

    Returns the unique maximiser; raises ``ConvergenceError`` if the gradient
    norm is still above ``tol`` after ``max_iter`` Newton steps.
    """
    if reg <= 0:
        raise ValueError("regularisation weight must be positive")
    X = np.asarray(X, dtype=float)
    d = X.shape[1] if X.ndim == 2 else len(theta0)
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    if X.shape[0] == 0:
        return np.zeros(d)
    r = np.asarray(r, dtype=float)
    eye = np.eye(d)
    obj = mle_objective(theta, X, r, reg)
    for _ in range(max_iter):
        p = expit(X @ theta)
        g = X.T @ (r - p) - reg * theta
        if math.sqrt(g @ g) <= tol:
            return theta
        w = p * (1.0 - p)
        H = (X.T * w) @ X + reg * eye
        direction = np.linalg.solve(H, g)
        slope = g @ direction
        s = 1.0
        while True:
            cand = theta + s * direction
            cand_obj = mle_objective(cand, X, r, reg)
            # slack of a few ulps: near the optimum the change drowns in roundoff
            if cand_obj >= obj + 1e-4 * s * slope - 1e-13 * abs(obj) or s < 1e-10:
                break
            s *= 0.5
        theta, obj = cand, cand_obj
    g = mle_gradient(theta, X, r, reg)
    if math.sqrt(g @ g) <= tol:
        return theta
    raise ConvergenceError(f"Newton stopped with |grad| = {math.sqrt(g @ g):.3e}")


# ---------------------------------------------------------------------------
# design matrix


class DesignFactor:
    """``V`` with its lower Cholesky factor ``L`` and ``L^{-1}``.

    ``L`` follows each rank-one update in O(d^2); ``L^{-1}`` is refreshed from
    ``L`` after each update so that queries are plain matrix products.
    """

    __slots__ = ("V", "L", "Linv")

    def __init__(self, d: int, scale: float):
        self.V = scale * np.eye(d)
        self.L = math.sqrt(scale) * np.eye(d)
        self.Linv = np.eye(d) / math.sqrt(scale)

    @classmethod
    def from_matrix(cls, V):
        obj = cls.__new__(cls)
        obj.V = np.array(V, dtype=float)
        obj.L = np.linalg.cholesky(obj.V)
        obj._refresh_inverse()
        return obj

    def _refresh_inverse(self):
        self.Linv = solve_triangular(self.L, np.eye(len(self.L)), lower=True, check_finite=False)

    def copy(self) -> "DesignFactor":
        obj = DesignFactor.__new__(DesignFactor)
        obj.V = self.V.copy()
        obj.L = self.L.copy()
        obj.Linv = self.Linv.copy()
        return obj

    def rank_one_update(self, x) -> None:
        x = np.array(x, dtype=float)
        self.V += np.outer(x, x)
        L = self.L
        d = len(x)
        for k in range(d):
            lkk = L[k, k]
            rr = math.hypot(lkk, x[k])
            c = rr / lkk
            s = x[k] / lkk
            L[k, k] = rr
            if k + 1 < d:
                L[k + 1:, k] = (L[k + 1:, k] + s * x[k + 1:]) / c
                x[k + 1:] = c * x[k + 1:] - s * L[k + 1:, k]
        self._refresh_inverse()

    def condition_estimate(self) -> float:
        diag = np.abs(np.diag(self.L))
        return float((diag.max() / diag.min()) ** 2)

    def solve(self, b):
        """``V^{-1} b``."""
        return self.Linv.T @ (self.Linv @ b)

    def inverse(self) -> np.ndarray:
        return self.Linv.T @ self.Linv

    def inv_norms(self, F) -> np.ndarray:
        """``sqrt(x^T V^{-1} x)`` for each row ``x`` of ``F``."""
        Y = np.atleast_2d(F) @ self.Linv.T
        return np.sqrt(np.einsum("ij,ij->i", Y, Y))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def rank_one_update(V: DesignFactor, x) -> DesignFactor:
    """Return a new factor for ``V + x x^T``; the input is left untouched."""
    out = V.copy()
    out.rank_one_update(x)
    return out


def uncertainty(x, V: DesignFactor) -> float:
    """``||x||_{V^{-1}}`` via the maintained Cholesky factor."""
    if V.condition_estimate() > COND_LIMIT:
        raise SingularDesignError("design matrix is numerically singular")
    return float(V.inv_norms(np.asarray(x, dtype=float))[0])


# ---------------------------------------------------------------------------
# projection onto the parameter ball


def projection_objective(theta, theta1, X, V: DesignFactor) -> float:
    """``|| sum_i [mu(x_i.theta) - mu(x_i.theta1)] x_i ||_{V^{-1}}``."""
    g = X.T @ (expit(X @ theta) - expit(X @ theta1))
    return float(math.sqrt(max(g @ V.solve(g), 0.0)))


def _ball(theta, S):
    n = math.sqrt(theta @ theta)
    return theta if n <= S else theta * (S / n)


def project(theta1, X, V: DesignFactor, S: float, start=None, tol: float = 1e-12,
            max_iter: int = 10_000):
    """Minimise the weighted prediction gap over ``||theta|| <= S``.

    Projected gradient on half the squared gap, Barzilai-Borwein step sizes
    safeguarded by backtracking.  ``start`` (e.g. the previous estimate) is
    used when it beats the radial projection of ``theta1``.
    """
    theta1 = np.asarray(theta1, dtype=float)
    n1 = math.sqrt(theta1 @ theta1)
    if n1 <= S:
        return theta1.copy()
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return theta1 * (S / n1)
    m1 = expit(X @ theta1)
    Vinv = V.inverse()

    def value(th):
        g = X.T @ (expit(X @ th) - m1)
        return 0.5 * float(g @ Vinv @ g)

    def gradient(th):
        p = expit(X @ th)
        w = Vinv @ (X.T @ (p - m1))
        return (X.T * (p * (1.0 - p))) @ (X @ w)

    theta = theta1 * (S / n1)
    h = value(theta)
    if start is not None:
        cand = _ball(np.asarray(start, dtype=float), S)
        hc = value(cand)
        if hc < h:
            theta, h = cand, hc
    grad = gradient(theta)
    step = 1.0 / max(float(np.trace(V.V)), 1.0)
    for _ in range(max_iter):
        while True:
            cand = _ball(theta - step * grad, S)
            diff = cand - theta
            hc = value(cand)
            if hc <= h - 1e-4 * (diff @ diff) / step or step < 1e-16:
                break
            step *= 0.5
        moved = math.sqrt(diff @ diff)
        if hc > h:
            return theta
        new_grad = gradient(cand)
        decrease = h - hc
        theta, h = cand, hc
        if moved <= 1e-12 or (decrease <= tol * max(h, 1e-300) and moved <= 1e-9):
            return theta
        y = new_grad - grad
        sy = float(diff @ y)
        grad = new_grad
        step = (diff @ diff) / sy if sy > 0 else step * 2.0
        step = min(max(step, 1e-12), 1e12)
    raise ConvergenceError("projected gradient budget exhausted")


# ---------------------------------------------------------------------------
# confidence radius


def confidence_radius(n_obs: int, kappa: float, lambda0: float, d: int, K: int,
                      delta: float, S: float) -> float:
    if n_obs < 0:
        raise ValueError("n_obs must be non-negative")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    inner = 2.0 * d * math.log1p(n_obs / (kappa * lambda0 * d)) + math.log(K / delta)
    return 0.5 * kappa * math.sqrt(inner) + 0.5 * kappa * S * math.sqrt(lambda0)


# ---------------------------------------------------------------------------


class ServerEstimator:
    """Learning state of one server."""

    def __init__(self, k: int, d: int, K: int, kappa: float, lambda0: float, S: float,
                 delta: float, reg: float | None = None, radius_scale: float = 1.0):
        self.k = k
        self.d = d
        self.K = K
        self.kappa = kappa
        self.lambda0 = lambda0
        self.S = S
        self.delta = delta
        # the loss regulariser is lambda0, not the arrival rate
        self.reg = lambda0 if reg is None else reg
        # 1.0 keeps the radius exactly as derived; smaller values are a tuning knob
        self.radius_scale = radius_scale
        self._X = np.empty((16, d))
        self._r = np.empty(16)
        self.n_obs = 0
        self.factor = DesignFactor(d, kappa * lambda0)
        self.theta1 = np.zeros(d)
        self.theta_hat = np.zeros(d)
        self.beta = radius_scale * confidence_radius(0, kappa, lambda0, d, K, delta, S)

    @property
    def X(self) -> np.ndarray:
        return self._X[: self.n_obs]

    @property
    def r(self) -> np.ndarray:
        return self._r[: self.n_obs]

    @property
    def V(self) -> np.ndarray:
        return self.factor.V

    def copy(self) -> "ServerEstimator":
        new = ServerEstimator.__new__(ServerEstimator)
        new.__dict__.update(self.__dict__)
        new._X = self._X.copy()
        new._r = self._r.copy()
        new.factor = self.factor.copy()
        new.theta1 = self.theta1.copy()
        new.theta_hat = self.theta_hat.copy()
        return new

    def observe(self, x, r) -> None:
        if r not in (0, 1, True, False):
            raise ValueError("outcome must be binary")
        if self.n_obs == self._X.shape[0]:
            self._X = np.concatenate([self._X, np.empty_like(self._X)])
            self._r = np.concatenate([self._r, np.empty_like(self._r)])
        self._X[self.n_obs] = x
        self._r[self.n_obs] = float(r)
        self.n_obs += 1
        self.factor.rank_one_update(x)
        self.theta1 = fit_mle(self.X, self.r, self.reg, theta0=self.theta1)
        self.theta_hat = project(self.theta1, self.X, self.factor, self.S, start=self.theta_hat)
        self.beta = self.radius_scale * confidence_radius(
            self.n_obs, self.kappa, self.lambda0, self.d, self.K, self.delta, self.S)

    def uncertainty(self, F) -> np.ndarray:
        return self.factor.inv_norms(F)

    def snapshot(self) -> dict:
        iu = np.triu_indices(self.d)
        return {"k": self.k, "n_obs": self.n_obs, "theta_hat": self.theta_hat.copy(),
                "beta": self.beta, "V_upper": self.factor.V[iu].copy()}


SNAPSHOT_FMT = "%.17g"


def snapshot_to_row(snap: dict) -> list[str]:
    """Flat text row: k, n_obs, theta_hat..., beta, V upper triangle (row-major)."""
    vals = [str(snap["k"]), str(snap["n_obs"])]
    vals += [SNAPSHOT_FMT % v for v in snap["theta_hat"]]
    vals.append(SNAPSHOT_FMT % snap["beta"])
    vals += [SNAPSHOT_FMT % v for v in snap["V_upper"]]
    return vals


def snapshot_from_row(row, d: int) -> dict:
    k, n = int(row[0]), int(row[1])
    theta = np.array([float(v) for v in row[2: 2 + d]])
    beta = float(row[2 + d])
    upper = np.array([float(v) for v in row[3 + d:]])
    if len(upper) != d * (d + 1) // 2:
        raise ValueError("snapshot row has the wrong length")
    V = np.zeros((d, d))
    V[np.triu_indices(d)] = upper
    V = V + np.triu(V, 1).T
    return {"k": k, "n_obs": n, "theta_hat": theta, "beta": beta, "V_upper": upper, "V": V}
