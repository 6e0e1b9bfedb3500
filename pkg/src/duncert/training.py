"""ELBO, generative objective, optimizers, training loop and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .energy import generative_loss
from .layers import StochasticMlp, build_network, network_forward
from .tensor import Rng, Tensor

LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


class SchemaError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.01
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    prior_noise_std: float = 1.0
    train_samples: int = 1
    energy_ridge: float = 1e-3
    energy_optimizer: str = "adam"
    energy_learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.prior_noise_std > 0:
            raise ValueError("prior_noise_std must be positive")
        for kind in (self.optimizer, self.energy_optimizer):
            if kind not in ("sgd_momentum", "adam"):
                raise ValueError(f"unknown optimizer {kind!r}")
        if not self.energy_learning_rate >= 0 or not self.energy_ridge >= 0:
            raise ValueError("energy_learning_rate and energy_ridge must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def gaussian_kl_zero_mean(gamma, sigma_p_sq):
    """KL(N(0, gamma) || N(0, sigma_p_sq)); works elementwise on arrays."""
    gamma = np.asarray(gamma, dtype=np.float64)
    sigma_p_sq = np.asarray(sigma_p_sq, dtype=np.float64)
    if np.any(gamma <= 0) or np.any(sigma_p_sq <= 0):
        raise ValueError("variances must be positive")
    r = gamma / sigma_p_sq
    out = 0.5 * (r - 1.0 - np.log(r))
    return float(out) if out.ndim == 0 else out


def log_likelihood(net: StochasticMlp, output: Tensor, y: np.ndarray) -> Tensor:
    """Per-example log-likelihood, shape (N,)."""
    if net.task == "regression":
        y = np.asarray(y, dtype=np.float64).reshape(output.shape)
        resid = output - Tensor(y)
        ll = T.tsum(T.square(resid), axis=1) * (-0.5) * T.exp(T.neg(net.log_noise_var))
        return ll - 0.5 * output.shape[1] * (net.log_noise_var + LOG_2PI)
    labels = np.asarray(y, dtype=np.int64).ravel()
    onehot = np.zeros(output.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return T.tsum(T.log_softmax(output) * Tensor(onehot), axis=1)


def elbo_loss(net: StochasticMlp, X, y, rng: Rng, n_total: int, config: TrainConfig,
              trace_out: list | None = None) -> Tensor:
    """Negative minibatch ELBO: ``-(N/B) sum log p(y|x) + KL``.

    The KL is subtracted from the expected log-likelihood (standard ELBO). When
    ``trace_out`` is given, each forward trace is appended to it.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if len(np.ravel(y)) != X.shape[0] * (net.out_dim if net.task == "regression" else 1):
        raise ValueError(f"batch has {X.shape[0]} inputs but targets of size {len(np.ravel(y))}")
    scale = n_total / X.shape[0]
    nll = Tensor(0.0)
    S = max(1, int(config.train_samples))
    for _ in range(S):
        trace = network_forward(net, X, rng, "sample")
        if trace_out is not None:
            trace_out.append(trace)
        nll = nll + T.tsum(log_likelihood(net, trace.output, y)) * (-scale / S)
    return nll + net.kl(config.prior_noise_std ** 2)


class Optimizer:
    """SGD with momentum or Adam, with decoupled weight decay on a name subset."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 decay_names=(), betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.weight_decay = weight_decay
        self.decay_names = set(decay_names)
        self.betas, self.eps = betas, eps
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st = self.state.setdefault(name, {})
            if self.kind == "sgd_momentum":
                v = st.get("v")
                v = g.copy() if v is None else self.momentum * v + g
                st["v"] = v
                update = v
            else:
                b1, b2 = self.betas
                m = b1 * st.get("m", np.zeros_like(g)) + (1 - b1) * g
                s = b2 * st.get("s", np.zeros_like(g)) + (1 - b2) * g * g
                st["m"], st["s"] = m, s
                update = (m / (1 - b1 ** self.t)) / (np.sqrt(s / (1 - b2 ** self.t)) + self.eps)
            new = p.data - self.lr * update
            if self.weight_decay and name in self.decay_names:
                new = new - self.lr * self.weight_decay * p.data
            p.data = new
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.state):
            for key in sorted(self.state[name]):
                out[f"{prefix}.{key}.{name}"] = self.state[name][key]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.state = {}
        lead = prefix + "."
        for full, arr in arrays.items():
            if not full.startswith(lead):
                continue
            key, name = full[len(lead):].split(".", 1)
            self.state.setdefault(name, {})[key] = arr.copy()


def optimizer_step(kind: str, params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: Optimizer | None, config: TrainConfig, decay_names=()) -> Optimizer:
    """Functional wrapper: load ``grads`` into ``params`` and take one step."""
    opt = state or Optimizer(kind, config.learning_rate, config.momentum, config.weight_decay, decay_names)
    for name, p in params.items():
        p.grad = np.asarray(grads[name], dtype=np.float64)
    opt.step(params)
    return opt


class Trainer:
    """Joint optimization of the network (ELBO) and its energy models (generative)."""

    def __init__(self, net: StochasticMlp, config: TrainConfig, rng: Rng | None = None):
        self.net, self.config = net, config
        self.rng = rng or Rng(config.seed)
        self.phi_opt = Optimizer(config.optimizer, config.learning_rate, config.momentum,
                                 config.weight_decay, net.decay_names())
        # energy parameters carry their prior inside the generative loss
        self.omega_opt = Optimizer(config.energy_optimizer, config.energy_learning_rate, config.momentum, 0.0)
        self.epoch = 0
        self.step_count = 0

    def joint_train_step(self, X, y, n_total: int, context: str = "") -> tuple[float, float]:
        net = self.net
        phi = net.discriminative_parameters()
        traces: list = []
        with T.Tape() as tape:
            loss = elbo_loss(net, X, y, self.rng, n_total, self.config, traces)
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"non-finite ELBO loss{context}")
            # step on the per-example ELBO so learning rates keep their usual scale
            tape.backward(loss * (1.0 / n_total))
        self.phi_opt.step(phi)

        gen_value = 0.0
        models = net.energy_models()
        if models:
            omega = net.energy_parameters()
            acts = [h for tr in traces for h in tr.activations]
            with T.Tape() as tape:
                gl = generative_loss(models * len(traces), acts, self.config.weight_decay,
                                     self.config.energy_ridge)
                if len(traces) > 1:
                    gl = gl * (1.0 / len(traces))
                if not np.isfinite(gl.data).all():
                    raise DivergenceError(f"non-finite generative loss{context}")
                tape.backward(gl)
            self.omega_opt.step(omega)
            gen_value = gl.item()
        self.step_count += 1
        return loss.item(), gen_value

    def train_epoch(self, X: np.ndarray, y: np.ndarray) -> list[tuple[float, float]]:
        n = X.shape[0]
        order = self.rng.permutation(n)
        losses = []
        bs = self.config.batch_size
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            losses.append(self.joint_train_step(X[idx], y[idx], n, f" at epoch {self.epoch}, batch {bi}"))
        self.epoch += 1
        return losses

    def fit(self, X: np.ndarray, y: np.ndarray, epochs: int | None = None) -> list[tuple[float, float]]:
        history = []
        for _ in range(self.config.epochs if epochs is None else epochs):
            history.extend(self.train_epoch(X, y))
        return history


def joint_train_step(trainer: Trainer, X, y, n_total: int) -> tuple[float, float]:
    return trainer.joint_train_step(X, y, n_total)


# --- checkpoints -----------------------------------------------------------

MAGIC = b"DUNCKPT1"


def save_checkpoint(path, trainer: Trainer, extra: dict | None = None) -> None:
    net = trainer.net
    arrays = {name: p.data for name, p in net.named_parameters().items()}
    arrays.update(trainer.phi_opt.state_arrays("opt.phi"))
    arrays.update(trainer.omega_opt.state_arrays("opt.omega"))
    header = {
        "format": "duncert-checkpoint",
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in arrays.items()],
        "model": net.spec,
        "config": asdict(trainer.config),
        "epoch": trainer.epoch,
        "step": trainer.step_count,
        "opt_t": [trainer.phi_opt.t, trainer.omega_opt.t],
        "rng": trainer.rng.state(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    arrays: dict
    model: dict
    config: dict
    epoch: int
    step: int
    opt_t: list
    rng: dict
    extra: dict


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path} is not a duncert checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from e
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"truncated checkpoint {path} at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        offset += 8 * n
    return Checkpoint(arrays, header["model"], header["config"], header["epoch"], header["step"],
                      header["opt_t"], header["rng"], header.get("extra", {}))


def load_checkpoint(path) -> tuple[Trainer, Checkpoint]:
    """Rebuild the network and trainer state so training resumes bit-exactly."""
    ck = read_checkpoint(path)
    spec = dict(ck.model)
    net = build_network(spec.pop("method"), spec.pop("in_dim"), spec.pop("out_dim"), spec.pop("widths"),
                        spec.pop("seed"), **spec)
    for name, p in net.named_parameters().items():
        if name not in ck.arrays:
            raise SchemaError(f"checkpoint is missing parameter {name!r}")
        if ck.arrays[name].shape != p.shape:
            raise SchemaError(f"parameter {name!r} has shape {ck.arrays[name].shape}, expected {p.shape}")
        p.data = ck.arrays[name].copy()
    trainer = Trainer(net, TrainConfig.from_dict(ck.config), Rng.from_state(ck.rng))
    trainer.phi_opt.load_state_arrays("opt.phi", ck.arrays)
    trainer.omega_opt.load_state_arrays("opt.omega", ck.arrays)
    trainer.phi_opt.t, trainer.omega_opt.t = ck.opt_t
    trainer.epoch, trainer.step_count = ck.epoch, ck.step
    return trainer, ck
