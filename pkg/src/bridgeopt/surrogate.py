"""Gaussian-process surrogate over binary subset vectors.

The kernel is Matern-5/2 on the Euclidean distance between membership
vectors (on binary inputs that distance is the square root of the Hamming
distance). Targets are standardized internally; hyperparameters are fitted
by maximizing the log marginal likelihood with a deterministic grid-seeded
coordinate descent, so a fit is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .pool import SubsetVector

SQRT5 = math.sqrt(5.0)

# Hyperparameter box, standardized target units. Lengthscale bounds scale
# with sqrt(m) because that is the diameter of the binary cube.
LENGTHSCALE_BOUNDS = (0.1, 10.0)  # multiples of sqrt(m)
SIGNAL_VAR_BOUNDS = (1e-2, 1e2)
NOISE_VAR_BOUNDS = (1e-6, 1.0)

_N_GRID_STARTS = 32
_MAX_STEPS_PER_START = 200
_BASE_JITTER = 1e-8
_MAX_JITTER = 1e-4


@dataclass(frozen=True)
class KernelParams:
    """Matern-5/2 hyperparameters: lengthscale, signal variance, noise variance."""

    lengthscale: float
    signal_var: float
    noise_var: float

    def __post_init__(self) -> None:
        if not (self.lengthscale > 0 and self.signal_var > 0 and self.noise_var >= 0):
            raise ValueError("kernel parameters must be positive (noise_var may be 0)")


def _matern52(scaled: np.ndarray | float):
    """Matern-5/2 profile at r = d / lengthscale."""
    s = SQRT5 * np.asarray(scaled, dtype=np.float64)
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def kernel(e1: SubsetVector | np.ndarray, e2: SubsetVector | np.ndarray, params: KernelParams) -> float:
    """Covariance between two subsets."""
    a = e1.to_numpy() if isinstance(e1, SubsetVector) else np.asarray(e1, dtype=np.float64)
    b = e2.to_numpy() if isinstance(e2, SubsetVector) else np.asarray(e2, dtype=np.float64)
    d = float(np.linalg.norm(a - b))
    return float(params.signal_var * _matern52(d / params.lengthscale))


def _cross_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances; exact for binary inputs."""
    aa = np.sum(A * A, axis=1)[:, None]
    bb = np.sum(B * B, axis=1)[None, :]
    sq = aa + bb - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def _kernel_matrix(dists: np.ndarray, params: KernelParams) -> np.ndarray:
    return params.signal_var * _matern52(dists / params.lengthscale)


class GPModel:
    """A fitted GP: training set, hyperparameters, and cached factorization."""

    def __init__(
        self,
        inputs: np.ndarray,
        targets: np.ndarray,
        params: KernelParams,
        target_mean: float,
        target_std: float,
        m: int,
    ):
        self.inputs = inputs  # (t, m) float64, rows are membership vectors
        self.targets = targets  # raw target values, shape (t,)
        self.params = params
        self.target_mean = target_mean
        self.target_std = target_std
        self.m = m
        t = inputs.shape[0]
        self.targets_std = (targets - target_mean) / target_std if t else np.zeros(0)
        if t:
            dists = _cross_distances(inputs, inputs)
            K = _kernel_matrix(dists, params)
            self._cho, self.jitter = _factorize(K, params)
            self.alpha = cho_solve(self._cho, self.targets_std)
        else:
            self._cho = None
            self.jitter = 0.0
            self.alpha = np.zeros(0)

    @classmethod
    def prior(cls, params: KernelParams, m: int, target_mean: float = 0.0, target_std: float = 1.0) -> "GPModel":
        """Model with no observations: posterior equals the prior."""
        return cls(np.zeros((0, m)), np.zeros(0), params, target_mean, target_std, m)

    @property
    def n_train(self) -> int:
        return self.inputs.shape[0]

    def _query_matrix(self, e) -> np.ndarray:
        if isinstance(e, SubsetVector):
            return e.to_numpy()[None, :]
        arr = np.asarray(e, dtype=np.float64)
        return arr[None, :] if arr.ndim == 1 else arr

    def posterior_internal(self, e) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean/variance in standardized target units, vectorized."""
        X = self._query_matrix(e)
        p = self.params
        if self.n_train == 0:
            n = X.shape[0]
            return np.zeros(n), np.full(n, p.signal_var)
        kq = _kernel_matrix(_cross_distances(X, self.inputs), p)  # (n, t)
        mean = kq @ self.alpha
        v = cho_solve(self._cho, kq.T)  # (t, n)
        var = p.signal_var - np.sum(kq * v.T, axis=1)
        return mean, var

    def posterior(self, e) -> tuple[float, float]:
        """Posterior mean/variance of one subset in raw target units."""
        mean, var = self.posterior_internal(e)
        s = self.target_std
        return self.target_mean + s * float(mean[0]), s * s * float(var[0])

    def posterior_gradient(self, e) -> np.ndarray:
        """Gradient of the posterior mean at e, raw target units.

        The Matern-5/2 gradient is smooth everywhere:
        d k(e, x) / d e = -(5/3)(sv/l^2) (1 + sqrt5 d/l) exp(-sqrt5 d/l) (e - x).
        """
        x = e.to_numpy() if isinstance(e, SubsetVector) else np.asarray(e, dtype=np.float64)
        if self.n_train == 0:
            return np.zeros(self.m)
        p = self.params
        diffs = x[None, :] - self.inputs  # (t, m)
        d = np.linalg.norm(diffs, axis=1)
        s = SQRT5 * d / p.lengthscale
        w = -(5.0 / 3.0) * (p.signal_var / p.lengthscale**2) * (1.0 + s) * np.exp(-s)
        grad_std = (self.alpha * w) @ diffs
        return self.target_std * grad_std

    def log_marginal(self) -> float:
        """Log marginal likelihood of the standardized targets."""
        t = self.n_train
        if t == 0:
            return 0.0
        L = self._cho[0]
        return float(
            -0.5 * self.targets_std @ self.alpha
            - np.sum(np.log(np.diag(L)))
            - 0.5 * t * math.log(2.0 * math.pi)
        )


def _factorize(K: np.ndarray, params: KernelParams):
    """Cholesky of K + noise + jitter, doubling the jitter on failure."""
    t = K.shape[0]
    eye = np.eye(t)
    jitter = _BASE_JITTER * params.signal_var
    cap = _MAX_JITTER * params.signal_var
    while True:
        try:
            return cho_factor(K + (params.noise_var + jitter) * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
            if jitter > cap:
                raise np.linalg.LinAlgError(
                    f"kernel matrix not positive definite at maximum jitter {cap:g}"
                )


def _standardize(targets: np.ndarray) -> tuple[float, float]:
    """Target mean/std for internal standardization; std clamps to 1 when degenerate.

    Degeneracy is judged relative to the target magnitude: identical targets
    produce a rounding-level variance, not an exact zero.
    """
    mean = float(np.mean(targets))
    if targets.shape[0] >= 2:
        std = math.sqrt(float(np.var(targets)))
        if std > 1e-12 * max(1.0, abs(mean)):
            return mean, std
    return mean, 1.0


def _as_input_matrix(inputs: Sequence[SubsetVector] | np.ndarray) -> np.ndarray:
    if isinstance(inputs, np.ndarray):
        return np.asarray(inputs, dtype=np.float64)
    return np.asarray([s.to_numpy() for s in inputs], dtype=np.float64)


def _nll_factory(X: np.ndarray, y: np.ndarray):
    """Negative log marginal likelihood over log-parameters, distances cached."""
    t = X.shape[0]
    dists = _cross_distances(X, X)
    eye = np.eye(t)
    log2pi = math.log(2.0 * math.pi)

    def nll(logp: np.ndarray) -> float:
        ell, sv, nv = np.exp(logp)
        K = sv * _matern52(dists / ell) + (nv + _BASE_JITTER * sv) * eye
        try:
            c = cho_factor(K, lower=True)
        except np.linalg.LinAlgError:
            return math.inf
        alpha = cho_solve(c, y)
        return float(0.5 * y @ alpha + np.sum(np.log(np.diag(c[0]))) + 0.5 * t * log2pi)

    return nll


def _fit_hyperparameters(X: np.ndarray, y: np.ndarray, m: int) -> KernelParams:
    """Deterministic MLL maximization: 32 grid starts, coordinate descent."""
    sqrt_m = math.sqrt(m)
    lo = np.log([LENGTHSCALE_BOUNDS[0] * sqrt_m, SIGNAL_VAR_BOUNDS[0], NOISE_VAR_BOUNDS[0]])
    hi = np.log([LENGTHSCALE_BOUNDS[1] * sqrt_m, SIGNAL_VAR_BOUNDS[1], NOISE_VAR_BOUNDS[1]])
    nll = _nll_factory(X, y)

    grid = [
        np.array([a, b, c])
        for a in np.linspace(lo[0], hi[0], 4)
        for b in np.linspace(lo[1], hi[1], 4)
        for c in np.linspace(lo[2], hi[2], 2)
    ]

    best_p, best_v = None, math.inf
    for start in grid:
        p = start.copy()
        v = nll(p)
        step = np.full(3, 0.5)
        n_steps = 0
        while n_steps < _MAX_STEPS_PER_START and step.max() >= 1e-3:
            improved = False
            for c in range(3):
                if n_steps >= _MAX_STEPS_PER_START:
                    break
                n_steps += 1
                cand_v, cand_p = v, None
                for sgn in (1.0, -1.0):
                    q = p.copy()
                    q[c] = min(max(q[c] + sgn * step[c], lo[c]), hi[c])
                    qv = nll(q)
                    if qv < cand_v:
                        cand_v, cand_p = qv, q
                if cand_p is not None:
                    p, v = cand_p, cand_v
                    improved = True
            if not improved:
                step *= 0.5
        if v < best_v:
            best_v, best_p = v, p
    ell, sv, nv = np.exp(best_p)
    return KernelParams(float(ell), float(sv), float(nv))


def fit_gp(
    inputs: Sequence[SubsetVector] | np.ndarray,
    targets: Sequence[float] | np.ndarray,
    params: KernelParams | None = None,
) -> GPModel:
    """Fit a GP to (subset, target) pairs.

    Targets are standardized to mean 0 / variance 1 when there are at least
    two of them and their variance is positive; otherwise the std clamps to 1
    (all-equal targets stay representable). When params is None the
    hyperparameters are fitted by the deterministic grid-seeded search;
    passing params pins them and skips the search.
    """
    X = _as_input_matrix(inputs)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("fit_gp requires at least one training input")
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets must have equal length")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    m = X.shape[1]
    mean, std = _standardize(y)
    y_std = (y - mean) / std
    if params is None:
        params = _fit_hyperparameters(X, y_std, m)
    return GPModel(X, y, params, mean, std, m)


def posterior(model: GPModel, e) -> tuple[float, float]:
    return model.posterior(e)


def posterior_gradient(model: GPModel, e) -> np.ndarray:
    return model.posterior_gradient(e)
