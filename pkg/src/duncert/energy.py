"""Layer-wise Gaussian energy models.

Two zero-mean families are provided:

* :class:`LdlGaussianEnergy` -- full precision ``L diag(d) L^T`` with unit
  lower-triangular ``L``; energy in O(D^2), log-determinant in O(D).
* :class:`Rank1MixtureEnergy` -- ``K`` components with covariance
  ``v_k v_k^T + diag(d_k)``; everything in O(KD) via Sherman-Morrison.

All batch functions take ``h`` of shape ``(N, D)`` and return shape ``(N,)``.
A 1-D ``h`` is treated as a batch of one and returns a scalar.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Rng, Tensor

LOG_2PI = math.log(2.0 * math.pi)


class EnergyDomainError(ValueError):
    pass


def _batch(h, dim: int, who: str) -> tuple[Tensor, bool]:
    h = h if isinstance(h, Tensor) else Tensor(h)
    single = h.ndim == 1
    if single:
        h = T.reshape(h, (1, h.shape[0]))
    if h.ndim != 2 or h.shape[1] != dim:
        raise DimensionError(f"{who}: expected inputs of width {dim}, got shape {h.shape}")
    return h, single


def _finish(out: Tensor, single: bool) -> Tensor:
    return T.reshape(out, ()) if single else out


class LdlGaussianEnergy:
    """Zero-mean Gaussian with precision ``L D L^T``.

    ``L_strict`` holds a full D x D array but only its strictly-lower part is
    used; ``log_d`` parametrizes the diagonal as ``exp(log_d)``.
    """

    kind = "ldl"

    def __init__(self, dim: int):
        self.dim = dim
        self.L_strict = Tensor(np.zeros((dim, dim)), requires_grad=True)
        self.log_d = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"L_strict": self.L_strict, "log_d": self.log_d}

    def _params(self, detach: bool):
        if detach:
            return self.L_strict.detach(), self.log_d.detach()
        return self.L_strict, self.log_d

    def energy(self, h, detach_params: bool = False) -> Tensor:
        h, single = _batch(h, self.dim, "ldl_energy")
        L, log_d = self._params(detach_params)
        u = T.lower_unit_triangular_matvec(L, h)
        e = 0.5 * T.tsum(T.mul(T.square(u), T.exp(log_d)), axis=1)
        return _finish(e, single)

    def log_det_sigma(self) -> Tensor:
        return T.neg(T.tsum(self.log_d))

    def log_likelihood(self, h) -> Tensor:
        e = self.energy(h)
        return e * -1.0 - 0.5 * self.log_det_sigma() - 0.5 * self.dim * LOG_2PI

    def trace_precision(self) -> Tensor:
        """``tr(L D L^T) = sum_i d_i * ||column i of L||^2``."""
        col_sq = 1.0 + T.tsum(T.square(Tensor(np.tril(np.ones((self.dim, self.dim)), -1)) * self.L_strict), axis=0)
        return T.tsum(T.mul(col_sq, T.exp(self.log_d)))

    def precision(self) -> np.ndarray:
        L = np.eye(self.dim) + np.tril(self.L_strict.data, -1)
        return L @ np.diag(np.exp(self.log_d.data)) @ L.T


def ldl_energy(model: LdlGaussianEnergy, h) -> Tensor:
    return model.energy(h)


def ldl_log_det_sigma(model: LdlGaussianEnergy) -> Tensor:
    return model.log_det_sigma()


def _check_diag(d) -> None:
    arr = d.data if isinstance(d, Tensor) else np.asarray(d, dtype=float)
    if np.any(~(arr > 0)):
        raise EnergyDomainError("diagonal covariance entries must be strictly positive")


def rank1_inverse_quadratic(v, D_diag, h) -> Tensor:
    """``h^T (v v^T + diag(D))^{-1} h`` via Sherman-Morrison, O(D)."""
    _check_diag(D_diag)
    v, d, h = (x if isinstance(x, Tensor) else Tensor(x) for x in (v, D_diag, h))
    if not (v.shape == d.shape == h.shape) or v.ndim != 1:
        raise DimensionError(f"rank1_inverse_quadratic: shapes {v.shape}, {d.shape}, {h.shape}")
    hd = T.div(h, d)
    quad = T.tsum(T.mul(h, hd))
    s = T.tsum(T.mul(v, hd))
    c = 1.0 + T.tsum(T.div(T.square(v), d))
    return quad - T.div(T.square(s), c)


def rank1_log_det(v, D_diag) -> Tensor:
    """``log|v v^T + diag(D)| = log(1 + v^T D^{-1} v) + sum(log D)``."""
    _check_diag(D_diag)
    v, d = (x if isinstance(x, Tensor) else Tensor(x) for x in (v, D_diag))
    if v.shape != d.shape or v.ndim != 1:
        raise DimensionError(f"rank1_log_det: shapes {v.shape}, {d.shape}")
    return T.log(1.0 + T.tsum(T.div(T.square(v), d))) + T.tsum(T.log(d))


class Rank1MixtureEnergy:
    """Mixture of ``K`` zero-mean rank-1-plus-diagonal Gaussians."""

    kind = "rank1mix"

    def __init__(self, dim: int, n_components: int, rng: Rng | None = None):
        self.dim = dim
        self.n_components = n_components
        rng = rng or Rng(0)
        scale = math.sqrt(0.01 / dim)
        self.v = Tensor(scale * rng.normal((n_components, dim)), requires_grad=True)
        self.log_d = Tensor(np.zeros((n_components, dim)), requires_grad=True)
        self.logits = Tensor(np.zeros(n_components), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"v": self.v, "log_d": self.log_d, "logits": self.logits}

    def _quadratics(self, h: Tensor, detach: bool):
        """Per-component ``q_k(h)`` (N, K) and the SM denominators (K,)."""
        v, log_d = (self.v.detach(), self.log_d.detach()) if detach else (self.v, self.log_d)
        inv_d = T.exp(T.neg(log_d))                                # (K, D)
        term = T.matmul(T.square(h), T.transpose(inv_d))          # (N, K)
        s = T.matmul(h, T.transpose(T.mul(v, inv_d)))             # (N, K)
        c = 1.0 + T.tsum(T.mul(T.square(v), inv_d), axis=1)       # (K,)
        return term - T.div(T.square(s), c), c

    def _log_weights(self, detach: bool) -> Tensor:
        logits = self.logits.detach() if detach else self.logits
        return T.log_softmax(logits)

    def energy(self, h, detach_params: bool = False) -> Tensor:
        h, single = _batch(h, self.dim, "mixture_energy")
        q, _ = self._quadratics(h, detach_params)
        e = T.neg(T.logsumexp(self._log_weights(detach_params) - 0.5 * q, axis=1))
        # each kernel term is <= 1, so e >= 0 up to roundoff
        e = T.relu(e)
        return _finish(e, single)

    def component_log_dets(self, detach: bool = False) -> Tensor:
        log_d = self.log_d.detach() if detach else self.log_d
        v = self.v.detach() if detach else self.v
        c = 1.0 + T.tsum(T.mul(T.square(v), T.exp(T.neg(log_d))), axis=1)
        return T.log(c) + T.tsum(log_d, axis=1)

    def log_likelihood(self, h) -> Tensor:
        h, single = _batch(h, self.dim, "mixture_log_likelihood")
        q, c = self._quadratics(h, False)
        log_det = T.log(c) + T.tsum(self.log_d, axis=1)
        comp = self._log_weights(False) - 0.5 * q - 0.5 * log_det - 0.5 * self.dim * LOG_2PI
        return _finish(T.logsumexp(comp, axis=1), single)

    def trace_precision(self) -> Tensor:
        """Mean over components of ``tr(Sigma_k^{-1})`` (Sherman-Morrison)."""
        inv_d = T.exp(T.neg(self.log_d))
        c = 1.0 + T.tsum(T.mul(T.square(self.v), inv_d), axis=1)
        tr = T.tsum(inv_d, axis=1) - T.div(T.tsum(T.square(T.mul(self.v, inv_d)), axis=1), c)
        return T.mean(tr)

    def covariances(self) -> np.ndarray:
        v, d = self.v.data, np.exp(self.log_d.data)
        return np.stack([np.outer(v[k], v[k]) + np.diag(d[k]) for k in range(self.n_components)])


def mixture_energy(model: Rank1MixtureEnergy, h) -> Tensor:
    return model.energy(h)


def mixture_log_likelihood(model: Rank1MixtureEnergy, h) -> Tensor:
    return model.log_likelihood(h)


def n_mixture_components(width: int, fraction: float = 0.1) -> int:
    return max(1, int(round(fraction * width)))


def make_energy(kind: str, dim: int, rng: Rng | None = None, mix_fraction: float = 0.1):
    if kind == "ldl":
        return LdlGaussianEnergy(dim)
    if kind == "rank1mix":
        return Rank1MixtureEnergy(dim, n_mixture_components(dim, mix_fraction), rng)
    raise ValueError(f"unknown energy kind {kind!r}")


def generative_loss(models, activations, prior_weight: float = 0.0, ridge: float = 0.0) -> Tensor:
    """Negative mean log-likelihood summed over layers plus priors on omega.

    ``activations`` must already be detached from the discriminative graph.
    ``prior_weight * 0.5 * ||omega||^2`` is a Gaussian prior on every energy
    parameter. ``ridge * 0.5 * tr(Sigma^{-1})`` is the expected extra energy of
    isotropic ``N(0, ridge)`` jitter on the inputs; it moves the optimum from
    the sample second moment ``S`` to ``S + ridge * I`` and keeps the precision
    bounded along directions where activations are constant zero.
    """
    models, activations = list(models), list(activations)
    if len(models) != len(activations):
        raise DimensionError(
            f"generative_loss: {len(models)} energy models but {len(activations)} activation batches"
        )
    total = Tensor(0.0)
    for model, h in zip(models, activations):
        total = total + T.neg(T.mean(model.log_likelihood(h)))
        if ridge:
            total = total + (0.5 * ridge) * model.trace_precision()
        if prior_weight:
            for p in model.parameters().values():
                total = total + (0.5 * prior_weight) * T.tsum(T.square(p))
    return total
