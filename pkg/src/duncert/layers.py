"""Stochastic linear layers and the MLPs built from them.

Every layer maps a batch ``h`` of shape ``(N, in_dim)`` to ``(N, out_dim)``
and supports two modes: ``"sample"`` draws fresh noise from the layer's
posterior, ``"mean"`` substitutes posterior means (noise-free).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .energy import LdlGaussianEnergy, Rank1MixtureEnergy, make_energy
from .tensor import DimensionError, Rng, Tensor

ENERGY_FLOOR = 1e-8
METHODS = ("density", "mfvi", "vdropout", "rank1", "mcdropout")


def gaussian_kl(mean, log_var, prior_mean: float, prior_var: float) -> Tensor:
    """Summed KL(N(mean, exp(log_var)) || N(prior_mean, prior_var))."""
    ratio = T.exp(log_var) * (1.0 / prior_var)
    kl = ratio - 1.0 - (log_var - math.log(prior_var))
    if mean is not None:
        kl = kl + T.square(mean - prior_mean) * (1.0 / prior_var)
    return 0.5 * T.tsum(kl)


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return bound * (2.0 * rng.uniform(shape) - 1.0)


def _check_input(h: Tensor, in_dim: int, who: str) -> None:
    if h.ndim != 2 or h.shape[1] != in_dim:
        raise DimensionError(f"{who}: expected input (N, {in_dim}), got {h.shape}")


def _check_mode(mode: str) -> None:
    if mode not in ("sample", "mean"):
        raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")


def _affine(h: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return T.matmul(h, T.transpose(W)) + b


class _Linear:
    """Shared plumbing: deterministic W, b and parameter bookkeeping."""

    energy = None

    def __init__(self, in_dim: int, out_dim: int, rng: Rng):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Tensor(_uniform_init(rng, (out_dim, in_dim), in_dim), requires_grad=True)
        self.b = Tensor(_uniform_init(rng, (out_dim,), in_dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    def kl(self, prior_var: float) -> Tensor:
        return Tensor(0.0)

    def mean_forward(self, h: Tensor) -> Tensor:
        return _affine(h, self.W, self.b)


class DensityUncertaintyLayer(_Linear):
    """``a_j = w_j . h + b_j + eps_j sqrt(E(h)) + eta_j`` with
    ``eps_j ~ N(0, gamma_j)`` and ``eta_j ~ N(0, beta_j)``.

    The energy model is evaluated with its parameters detached: the
    discriminative loss can move ``h`` (and hence earlier layers) but never
    the energy model itself.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, energy: str = "ldl",
                 mix_fraction: float = 0.1, init_std: float = 0.1):
        super().__init__(in_dim, out_dim, rng)
        self.log_gamma = Tensor(np.full(out_dim, 2.0 * math.log(init_std)), requires_grad=True)
        self.log_beta = Tensor(np.full(out_dim, 2.0 * math.log(init_std)), requires_grad=True)
        self.energy: LdlGaussianEnergy | Rank1MixtureEnergy = make_energy(energy, in_dim, rng.spawn(7), mix_fraction)

    def parameters(self):
        return {"W": self.W, "b": self.b, "log_gamma": self.log_gamma, "log_beta": self.log_beta}

    def kl(self, prior_var: float) -> Tensor:
        return gaussian_kl(None, self.log_gamma, 0.0, prior_var) + gaussian_kl(None, self.log_beta, 0.0, prior_var)

    def energies(self, h: Tensor) -> Tensor:
        return self.energy.energy(h, detach_params=True)

    def forward_with_energy(self, h: Tensor, rng: Rng | None, mode: str = "sample") -> tuple[Tensor, Tensor]:
        _check_input(h, self.in_dim, "du_forward")
        _check_mode(mode)
        E = self.energies(h)
        a = _affine(h, self.W, self.b)
        if mode == "mean":
            return a, E
        n = h.shape[0]
        eps = Tensor(rng.normal((n, self.out_dim)))
        eta = Tensor(rng.normal((n, self.out_dim)))
        scale_e = T.sqrt(T.reshape(E, (n, 1)) + ENERGY_FLOOR)
        a = a + (eps * T.exp(0.5 * self.log_gamma)) * scale_e + eta * T.exp(0.5 * self.log_beta)
        return a, E

    def forward(self, h: Tensor, rng: Rng | None, mode: str = "sample") -> Tensor:
        return self.forward_with_energy(h, rng, mode)[0]

    def predictive_variance(self, h) -> np.ndarray:
        """Closed form ``gamma_j E(h) + beta_j`` for each unit (rows of ``h``)."""
        h = h if isinstance(h, Tensor) else Tensor(h)
        single = h.ndim == 1
        if single:
            h = T.reshape(h, (1, h.shape[0]))
        _check_input(h, self.in_dim, "du_predictive_variance")
        E = self.energies(h).data
        var = np.exp(self.log_gamma.data)[None, :] * E[:, None] + np.exp(self.log_beta.data)[None, :]
        return var[0] if single else var


class MfviLinearLayer(_Linear):
    """Fully factorized Gaussian posterior over W and b.

    One weight realization is drawn per forward call and shared by the batch.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, init_std: float = 0.1):
        super().__init__(in_dim, out_dim, rng)
        self.W_logstd = Tensor(np.full((out_dim, in_dim), math.log(init_std)), requires_grad=True)
        self.b_logstd = Tensor(np.full(out_dim, math.log(init_std)), requires_grad=True)

    def parameters(self):
        return {"W": self.W, "b": self.b, "W_logstd": self.W_logstd, "b_logstd": self.b_logstd}

    def kl(self, prior_var: float) -> Tensor:
        return (gaussian_kl(self.W, 2.0 * self.W_logstd, 0.0, prior_var)
                + gaussian_kl(self.b, 2.0 * self.b_logstd, 0.0, prior_var))

    def forward(self, h: Tensor, rng: Rng | None, mode: str = "sample") -> Tensor:
        _check_input(h, self.in_dim, "mfvi_forward")
        _check_mode(mode)
        if mode == "mean":
            return _affine(h, self.W, self.b)
        W = self.W + T.exp(self.W_logstd) * Tensor(rng.normal(self.W.shape))
        b = self.b + T.exp(self.b_logstd) * Tensor(rng.normal(self.b.shape))
        return _affine(h, W, b)


class VariationalDropoutLayer(_Linear):
    """Multiplicative ``N(1, alpha)`` noise on the pre-activations; alpha is fixed."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, alpha_noise: float = 0.1):
        super().__init__(in_dim, out_dim, rng)
        if not alpha_noise > 0:
            raise ValueError("alpha_noise must be positive")
        self.alpha_noise = float(alpha_noise)

    def forward(self, h: Tensor, rng: Rng | None, mode: str = "sample") -> Tensor:
        _check_input(h, self.in_dim, "vdropout_forward")
        _check_mode(mode)
        a = _affine(h, self.W, self.b)
        if mode == "mean":
            return a
        eps = 1.0 + math.sqrt(self.alpha_noise) * rng.normal(a.shape)
        return a * Tensor(eps)


class Rank1BnnLayer(_Linear):
    """``a = (W (h * s_in) + b) * s_out`` with per-dimension Gaussian factors."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, init_std: float = 0.1,
                 prior_std: float = 0.1):
        super().__init__(in_dim, out_dim, rng)
        self.prior_std = float(prior_std)
        self.in_mean = Tensor(np.ones(in_dim), requires_grad=True)
        self.in_logstd = Tensor(np.full(in_dim, math.log(init_std)), requires_grad=True)
        self.out_mean = Tensor(np.ones(out_dim), requires_grad=True)
        self.out_logstd = Tensor(np.full(out_dim, math.log(init_std)), requires_grad=True)

    def parameters(self):
        return {"W": self.W, "b": self.b, "in_mean": self.in_mean, "in_logstd": self.in_logstd,
                "out_mean": self.out_mean, "out_logstd": self.out_logstd}

    def kl(self, prior_var: float) -> Tensor:
        # the multiplicative factors carry their own prior N(1, prior_std^2)
        pv = self.prior_std ** 2
        return (gaussian_kl(self.in_mean, 2.0 * self.in_logstd, 1.0, pv)
                + gaussian_kl(self.out_mean, 2.0 * self.out_logstd, 1.0, pv))

    def forward(self, h: Tensor, rng: Rng | None, mode: str = "sample") -> Tensor:
        _check_input(h, self.in_dim, "rank1_forward")
        _check_mode(mode)
        n = h.shape[0]
        if mode == "mean":
            s_in, s_out = self.in_mean, self.out_mean
        else:
            s_in = self.in_mean + Tensor(rng.normal((n, self.in_dim))) * T.exp(self.in_logstd)
            s_out = self.out_mean + Tensor(rng.normal((n, self.out_dim))) * T.exp(self.out_logstd)
        return _affine(h * s_in, self.W, self.b) * s_out


class McDropoutLayer(_Linear):
    """Inverted dropout on the layer input, active whenever mode is ``sample``."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, p: float = 0.1):
        super().__init__(in_dim, out_dim, rng)
        if not 0 <= p < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = float(p)

    def forward(self, h: Tensor, rng: Rng | None, mode: str = "sample") -> Tensor:
        _check_input(h, self.in_dim, "mcdropout_forward")
        _check_mode(mode)
        if mode == "sample" and self.p > 0:
            keep = rng.uniform(h.shape) >= self.p
            h = h * Tensor(keep / (1.0 - self.p))
        return _affine(h, self.W, self.b)


_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


@dataclass
class StochasticMlp:
    layers: list
    activation: str = "relu"
    residual: bool = False
    task: str = "regression"
    spec: dict = field(default_factory=dict)
    log_noise_var: Tensor | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.residual:
            width = self.layers[0].out_dim
            for i, layer in enumerate(self.layers[1:], start=1):
                if layer.in_dim != width or layer.out_dim != width:
                    raise DimensionError(
                        f"residual block {i} maps {layer.in_dim}->{layer.out_dim}, expected {width}->{width}"
                    )
        else:
            for i in range(1, len(self.layers)):
                if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                    raise DimensionError(f"layer {i} expects {self.layers[i].in_dim} inputs, "
                                         f"previous layer emits {self.layers[i - 1].out_dim}")
        if self.task == "regression" and self.log_noise_var is None:
            self.log_noise_var = Tensor(np.zeros(()), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def density_layers(self) -> list[DensityUncertaintyLayer]:
        return [l for l in self.layers if isinstance(l, DensityUncertaintyLayer)]

    def energy_models(self) -> list:
        return [l.energy for l in self.density_layers()]

    def discriminative_parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                params[f"layer.{i}.{name}"] = p
        if self.log_noise_var is not None:
            params["head.log_noise_var"] = self.log_noise_var
        return params

    def energy_parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            if layer.energy is not None:
                for name, p in layer.energy.parameters().items():
                    params[f"energy.{i}.{name}"] = p
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.discriminative_parameters(), **self.energy_parameters()}

    def decay_names(self) -> set[str]:
        """Deterministic weight matrices: the only targets of decoupled weight decay."""
        return {f"layer.{i}.W" for i in range(len(self.layers))}

    def kl(self, prior_var: float) -> Tensor:
        total = Tensor(0.0)
        for layer in self.layers:
            total = total + layer.kl(prior_var)
        return total


@dataclass
class ForwardTrace:
    output: Tensor
    activations: list = field(default_factory=list)  # detached inputs of density layers
    energies: list = field(default_factory=list)     # per-layer energies, shape (N,)


def _apply(layer, h: Tensor, rng, mode, trace: ForwardTrace) -> Tensor:
    if isinstance(layer, DensityUncertaintyLayer):
        a, E = layer.forward_with_energy(h, rng, mode)
        trace.activations.append(h.detach())
        trace.energies.append(E)
        return a
    return layer.forward(h, rng, mode)


def network_forward(net: StochasticMlp, x, rng: Rng | None, mode: str = "sample") -> ForwardTrace:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 1:
        x = T.reshape(x, (1, x.shape[0]))
    if x.shape[1] != net.in_dim:
        raise DimensionError(f"network expects {net.in_dim} input features, got {x.shape[1]}")
    act = _ACTIVATIONS[net.activation]
    trace = ForwardTrace(output=None)
    if net.residual:
        a = _apply(net.layers[0], x, rng, mode, trace)
        for layer in net.layers[1:]:
            a = a + _apply(layer, act(a), rng, mode, trace)
        trace.output = a
        return trace
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        a = _apply(layer, h, rng, mode, trace)
        h = a if i == last else act(a)
    trace.output = h
    return trace


def predictive_ensemble(net: StochasticMlp, x, rng: Rng, M: int) -> np.ndarray:
    """``M`` independent sample-mode outputs, shape ``(M, N, out_dim)``."""
    if M < 1:
        raise ValueError("M must be at least 1")
    with T.no_grad():
        return np.stack([network_forward(net, x, rng, "sample").output.data for _ in range(M)])


def build_network(method: str, in_dim: int, out_dim: int, widths, seed: int = 0, *,
                  energy: str = "ldl", mix_fraction: float = 0.1, residual: bool = False,
                  activation: str = "relu", init_std: float = 0.1, vd_alpha: float = 0.1,
                  dropout_p: float = 0.1, rank1_prior_std: float = 0.1,
                  task: str = "regression") -> StochasticMlp:
    """Assemble an MLP whose every linear layer is of the given method.

    In residual mode ``widths`` must hold a single repeated width; the stem maps
    the input to that width and each further block is ``a + f(pi(a))``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    widths = [int(w) for w in widths]
    spec = dict(method=method, in_dim=in_dim, out_dim=out_dim, widths=widths, seed=seed,
                energy=energy, mix_fraction=mix_fraction, residual=residual, activation=activation,
                init_std=init_std, vd_alpha=vd_alpha, dropout_p=dropout_p,
                rank1_prior_std=rank1_prior_std, task=task)
    dims = [in_dim] + widths if residual else [in_dim] + widths + [out_dim]
    rng = Rng(seed)

    def make(i, d_in, d_out):
        r = rng.spawn(i)
        if method == "density":
            return DensityUncertaintyLayer(d_in, d_out, r, energy, mix_fraction, init_std)
        if method == "mfvi":
            return MfviLinearLayer(d_in, d_out, r, init_std)
        if method == "vdropout":
            return VariationalDropoutLayer(d_in, d_out, r, vd_alpha)
        if method == "rank1":
            return Rank1BnnLayer(d_in, d_out, r, init_std, rank1_prior_std)
        return McDropoutLayer(d_in, d_out, r, dropout_p)

    layers = [make(i, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    return StochasticMlp(layers, activation=activation, residual=residual, task=task, spec=spec)


# convenience aliases named after the operations they implement
def du_forward(layer: DensityUncertaintyLayer, h, rng, mode="sample") -> Tensor:
    return layer.forward(h if isinstance(h, Tensor) else Tensor(np.atleast_2d(h)), rng, mode)


def du_predictive_variance(layer: DensityUncertaintyLayer, h) -> np.ndarray:
    return layer.predictive_variance(h)
