"""Exact Gaussian-process regression of the bias map.

Two independent zero-mean GPs (one per bias component) share a single RBF
kernel ``k(x, x') = sf2 * exp(-|x - x'|^2 / (2 l^2))`` and noise variance
``sn2``. Both outputs share one Cholesky factor of ``K + sn2 I`` since their
inputs are identical, and therefore also share one posterior variance.

Returned variances are for the latent function (no observation noise), so
far from data they revert to ``sf2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.spatial.distance import cdist

DUPLICATE_TOL = 1e-9
MAX_JITTER_REL = 1e-6
VARIANCE_FLOOR = 1e-12


class GpNumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    lengthscale: float = 10.0
    signal_variance: float = 4.0
    noise_variance: float = 0.01

    def __post_init__(self):
        for name in ("lengthscale", "signal_variance", "noise_variance"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")

    def to_log(self) -> np.ndarray:
        return np.log([self.lengthscale, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, theta) -> "Hyperparams":
        ell, sf2, sn2 = np.exp(np.asarray(theta, dtype=float))
        return cls(float(ell), float(sf2), float(sn2))


DEFAULT_BOUNDS = {
    "lengthscale": (1.0, 200.0),
    "signal_variance": (1e-4, 100.0),
    "noise_variance": (1e-6, 10.0),
}


def rbf(x1, x2, h: Hyperparams):
    """Kernel value for two points, or the cross-covariance matrix for two point sets."""
    a = np.asarray(x1, dtype=float)
    b = np.asarray(x2, dtype=float)
    if a.ndim == 1 and b.ndim == 1:
        d2 = float(np.sum((a - b) ** 2))
        return h.signal_variance * math.exp(-d2 / (2.0 * h.lengthscale ** 2))
    return _kernel(np.atleast_2d(a), np.atleast_2d(b), h)


def _kernel(a: np.ndarray, b: np.ndarray, h: Hyperparams) -> np.ndarray:
    d2 = cdist(a, b, "sqeuclidean")
    return h.signal_variance * np.exp(-d2 / (2.0 * h.lengthscale ** 2))


def dedupe(inputs: np.ndarray, targets: np.ndarray, tol: float = DUPLICATE_TOL):
    """Average targets of inputs closer than ``tol`` (first occurrence keeps its position)."""
    n = len(inputs)
    if n < 2:
        return inputs, targets
    order = np.lexsort((inputs[:, 1], inputs[:, 0]))
    group = np.arange(n)
    # sorted by x, so only earlier points within tol in x can be duplicates
    for pos in range(1, n):
        i = order[pos]
        for back in range(pos - 1, -1, -1):
            j = order[back]
            if inputs[i, 0] - inputs[j, 0] > tol:
                break
            if np.hypot(*(inputs[i] - inputs[j])) < tol:
                group[i] = group[j]
                break
    reps, inv = np.unique(group, return_inverse=True)
    if len(reps) == n:
        return inputs, targets
    sums = np.zeros((len(reps), targets.shape[1]))
    np.add.at(sums, inv, targets)
    counts = np.bincount(inv)
    return inputs[reps], sums / counts[:, None]


class GpModel:
    """Fitted two-output GP. Immutable after construction."""

    def __init__(self, inputs, targets, hyperparams: Hyperparams, chol=None, alpha=None, jitter=0.0):
        self.train_inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
        self.train_targets = np.asarray(targets, dtype=float).reshape(-1, 2)
        self.hyperparams = hyperparams
        self.chol = chol
        self.alpha = alpha
        self.jitter = jitter
        for arr in (self.train_inputs, self.train_targets, self.chol, self.alpha):
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def prior(cls, hyperparams: Hyperparams | None = None) -> "GpModel":
        """Model with no data: zero mean, variance ``sf2`` everywhere."""
        return cls(np.empty((0, 2)), np.empty((0, 2)), hyperparams or Hyperparams())

    @property
    def n_train(self) -> int:
        return len(self.train_inputs)

    def kernel(self, a, b) -> np.ndarray:
        return _kernel(np.atleast_2d(a), np.atleast_2d(b), self.hyperparams)

    def whiten(self, points) -> np.ndarray:
        """``L^-1 k(X_train, points)``, shape ``(n_train, len(points))``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.n_train == 0:
            return np.empty((0, len(pts)))
        return scipy.linalg.solve_triangular(self.chol, self.kernel(self.train_inputs, pts),
                                             lower=True, check_finite=False)

    def predict_mean(self, queries) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if self.n_train == 0:
            return np.zeros((len(q), 2))
        return self.kernel(q, self.train_inputs) @ self.alpha

    def predict(self, queries):
        """Posterior means ``(Q, 2)`` and shared latent variances ``(Q,)``."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        sf2 = self.hyperparams.signal_variance
        if self.n_train == 0:
            return np.zeros((len(q), 2)), np.full(len(q), sf2)
        ks = self.kernel(q, self.train_inputs)
        mean = ks @ self.alpha
        v = scipy.linalg.solve_triangular(self.chol, ks.T, lower=True, check_finite=False)
        var = sf2 - np.einsum("ij,ij->j", v, v)
        return mean, np.clip(var, VARIANCE_FLOOR * sf2, sf2)

    def posterior_cov(self, a, b) -> np.ndarray:
        ka = self.whiten(a)
        kb = self.whiten(b)
        return self.kernel(a, b) - ka.T @ kb


def fit(inputs, targets, h: Hyperparams | None = None) -> GpModel:
    """Factorize ``K + sn2 I`` for the (deduplicated) training set.

    Jitter is escalated from ``1e-10 sf2`` up to ``1e-6 sf2`` if the plain
    factorization fails.
    """
    h = h or Hyperparams()
    x = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} targets")
    if len(x) == 0:
        return GpModel.prior(h)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    x, y = dedupe(x, y)
    chol, jitter = _cholesky(_kernel(x, x, h), h)
    alpha = scipy.linalg.cho_solve((chol, True), y, check_finite=False)
    return GpModel(x, y, h, chol, alpha, jitter)


def _cholesky(gram: np.ndarray, h: Hyperparams):
    base = gram + h.noise_variance * np.eye(len(gram))
    jitter = 0.0
    while True:
        try:
            chol = scipy.linalg.cholesky(base + jitter * np.eye(len(gram)), lower=True, check_finite=False)
            return chol, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 * h.signal_variance if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER_REL * h.signal_variance * (1 + 1e-9):
                raise GpNumericalError(
                    f"Gram matrix of {len(gram)} points not factorizable with jitter up to "
                    f"{MAX_JITTER_REL:g} * signal_variance"
                ) from None


def log_marginal_likelihood(inputs, targets, h: Hyperparams, grad: bool = False):
    """Sum over both outputs of the log marginal likelihood.

    With ``grad=True`` also returns the gradient w.r.t. the log hyperparameters
    ``(log l, log sf2, log sn2)``.
    """
    x = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float).reshape(-1, 2)
    n, d = y.shape
    d2 = cdist(x, x, "sqeuclidean")
    kf = h.signal_variance * np.exp(-d2 / (2.0 * h.lengthscale ** 2))
    chol, _ = _cholesky(kf, h)
    alpha = scipy.linalg.cho_solve((chol, True), y, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    lml = -0.5 * float(np.sum(y * alpha)) - 0.5 * d * logdet - 0.5 * n * d * math.log(2 * math.pi)
    if not grad:
        return lml
    kinv = scipy.linalg.cho_solve((chol, True), np.eye(n), check_finite=False)
    # dL/dtheta = 0.5 * sum_outputs tr((a a^T - K^-1) dK/dtheta)
    w = alpha @ alpha.T - d * kinv
    dk_dlogl = kf * d2 / h.lengthscale ** 2
    g = np.array([
        0.5 * np.sum(w * dk_dlogl),
        0.5 * np.sum(w * kf),
        0.5 * h.noise_variance * np.trace(w),
    ])
    return lml, g


class HyperparamResult(NamedTuple):
    hyperparams: Hyperparams
    log_likelihood: float
    improved: bool


def optimize_hyperparams(inputs, targets, init: Hyperparams | None = None, bounds: dict | None = None,
                         n_restarts: int = 4, seed: int = 0) -> HyperparamResult:
    """Maximize the summed log marginal likelihood over log-hyperparameters.

    L-BFGS-B from ``init`` plus ``n_restarts`` seeded random starts inside
    ``bounds``. If nothing beats ``init``, ``init`` is returned with
    ``improved=False`` and a warning.
    """
    x = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(x) < 3:
        raise ValueError("hyperparameter optimization needs at least 3 training points")
    x, y = dedupe(x, y)
    init = init or Hyperparams()
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    log_bounds = [tuple(np.log(bounds[k])) for k in ("lengthscale", "signal_variance", "noise_variance")]
    lo = np.array([b[0] for b in log_bounds])
    hi = np.array([b[1] for b in log_bounds])

    def neg(theta):
        try:
            lml, g = log_marginal_likelihood(x, y, Hyperparams.from_log(theta), grad=True)
        except GpNumericalError:
            return 1e25, np.zeros(3)
        return -lml, -g

    try:
        best_val = log_marginal_likelihood(x, y, init)
    except GpNumericalError:
        best_val = -math.inf
    best = init
    start_val = best_val
    rng = np.random.default_rng(seed)
    starts = [np.clip(init.to_log(), lo, hi)] + [rng.uniform(lo, hi) for _ in range(n_restarts)]
    for theta0 in starts:
        res = scipy.optimize.minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=log_bounds)
        if np.all(np.isfinite(res.x)) and -res.fun > best_val:
            best_val = float(-res.fun)
            best = Hyperparams.from_log(res.x)
    improved = best_val > start_val
    if not improved:
        warnings.warn("hyperparameter optimization did not improve on the initial values", RuntimeWarning)
    return HyperparamResult(best, best_val, improved)


def with_hyperparams(model: GpModel, h: Hyperparams) -> GpModel:
    return fit(model.train_inputs, model.train_targets, h)

