"""Exact Bayesian linear regression and Laplace-approximate logistic regression.

These are analytic references: the regression posterior's predictive variance
is exactly ``1/beta + 2/(beta N) * E(x)`` for the Gaussian energy of the
training inputs, which is the behaviour density layers impose by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class DataError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlrModel:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")


@dataclass
class BlrPosterior:
    mu: np.ndarray
    Lambda: np.ndarray
    Sigma: np.ndarray
    N: int
    alpha: float
    beta: float

    def __post_init__(self):
        self._chol_lambda = cho_factor(self.Lambda, lower=True)
        self._chol_sigma = cho_factor(self.Sigma, lower=True)

    def solve_lambda(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol_lambda, b)

    def solve_sigma(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol_sigma, b)


def _finite(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")
    return a


def fit_blr(X, y, alpha: float, beta: float) -> BlrPosterior:
    X = _finite("X", np.atleast_2d(X))
    y = _finite("y", np.ravel(y))
    BlrModel(alpha, beta)
    N, D = X.shape
    if N < 1 or y.shape[0] != N:
        raise DataError(f"X has {N} rows but y has {y.shape[0]} entries")
    gram = X.T @ X
    Lambda = beta * gram + alpha * np.eye(D)
    mu = beta * cho_solve(cho_factor(Lambda, lower=True), X.T @ y)
    Sigma = (gram + (alpha / beta) * np.eye(D)) / N
    return BlrPosterior(mu=mu, Lambda=Lambda, Sigma=Sigma, N=N, alpha=alpha, beta=beta)


def _probe(post: BlrPosterior, x_star) -> np.ndarray:
    x = np.asarray(x_star, dtype=np.float64).ravel()
    if x.shape[0] != post.mu.shape[0]:
        raise ValueError(f"x_star has length {x.shape[0]}, posterior has dimension {post.mu.shape[0]}")
    return x


def blr_predict(post: BlrPosterior, beta: float, x_star) -> tuple[float, float]:
    x = _probe(post, x_star)
    mean = float(post.mu @ x)
    var = 1.0 / beta + float(x @ post.solve_lambda(x))
    return mean, var


def blr_energy(post: BlrPosterior, x_star) -> float:
    x = _probe(post, x_star)
    return 0.5 * float(x @ post.solve_sigma(x))


def criterion_identity_check(post: BlrPosterior, beta: float, x_star) -> float:
    _, var = blr_predict(post, beta, x_star)
    return abs(var - 1.0 / beta - 2.0 / (beta * post.N) * blr_energy(post, x_star))


def constrained_posterior_variance(post: BlrPosterior, gamma: float, x_star) -> float:
    """Variance of ``w^T x`` under ``q(w) = N(mu, gamma * Sigma^{-1})``."""
    return 2.0 * gamma * blr_energy(post, x_star)


@dataclass
class LaplaceLogisticPosterior:
    mu_map: np.ndarray
    Lambda: np.ndarray
    iterations: int


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def laplace_precision(X: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    p = _sigmoid(X @ w)
    r = p * (1.0 - p)
    return (X * r[:, None]).T @ X + alpha * np.eye(X.shape[1])


def fit_laplace_logistic(X, y, alpha: float, tol: float = 1e-10, max_iter: int = 100) -> LaplaceLogisticPosterior:
    X = _finite("X", np.atleast_2d(X))
    y = _finite("y", np.ravel(y))
    if X.shape[0] < 1 or y.shape[0] != X.shape[0]:
        raise DataError("X and y disagree on the number of observations")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    w = np.zeros(X.shape[1])
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        p = _sigmoid(X @ w)
        grad = X.T @ (y - p) - alpha * w
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return LaplaceLogisticPosterior(w, laplace_precision(X, w, alpha), it - 1)
        H = laplace_precision(X, w, alpha)
        w = w + cho_solve(cho_factor(H, lower=True), grad)
    p = _sigmoid(X @ w)
    grad_norm = float(np.linalg.norm(X.T @ (y - p) - alpha * w))
    if grad_norm < tol:
        return LaplaceLogisticPosterior(w, laplace_precision(X, w, alpha), max_iter)
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (|grad| = {grad_norm:.3e})")
