"""Predictive metrics, OOD scores and a numeric check of the energy bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata, spearmanr

from .layers import DensityUncertaintyLayer, StochasticMlp, network_forward, predictive_ensemble
from .tensor import Rng, no_grad

LOG_2PI = math.log(2.0 * math.pi)


class ConfigurationError(ValueError):
    pass


def regression_nll(samples, sigma_hat, y) -> float:
    """Mean of ``-log (1/M) sum_m N(y; mu_m, sigma^2)``.

    ``samples`` has shape (M, N) or (M, N, 1); ``sigma_hat`` is a scalar or
    broadcastable to (N,).
    """
    mu = np.asarray(samples, dtype=np.float64)
    if mu.ndim == 3:
        mu = mu[..., 0]
    if mu.ndim == 1:
        mu = mu[:, None]
    sigma = np.asarray(sigma_hat, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise ValueError("sigma_hat must be positive")
    y = np.asarray(y, dtype=np.float64).ravel()
    z = (y[None, :] - mu) / sigma
    log_pdf = -0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI
    per_point = -(logsumexp(log_pdf, axis=0) - math.log(mu.shape[0]))
    return float(np.mean(per_point))


def rmse(samples, y) -> float:
    mu = np.asarray(samples, dtype=np.float64)
    if mu.ndim == 3:
        mu = mu[..., 0]
    if mu.ndim == 1:
        mu = mu[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    return float(np.sqrt(np.mean((mu.mean(axis=0) - y) ** 2)))


def ece(prob_vectors, labels, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins."""
    p = np.asarray(prob_vectors, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("ece needs a non-empty (N, C) probability array")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.float64)
    # bins are (lo, hi]; confidence 0 falls into the first bin
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        m = idx == b
        if m.any():
            total += m.sum() / len(conf) * abs(correct[m].mean() - conf[m].mean())
    return float(total)


def _check_sides(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both positive and negative scores must be non-empty")
    return pos, neg


def auroc(scores_pos, scores_neg) -> float:
    """Mann-Whitney statistic; ties count one half."""
    pos, neg = _check_sides(scores_pos, scores_neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auprc(scores_pos, scores_neg) -> float:
    """Step-integrated area under precision-recall, positives = OOD.

    Tied scores enter the curve together at a single threshold.
    """
    pos, neg = _check_sides(scores_pos, scores_neg)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1.0 - is_pos)
    last = np.r_[scores[1:] != scores[:-1], True]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / pos.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _require_classifier(net: StochasticMlp) -> None:
    if net.task != "classification":
        raise ConfigurationError("this score needs a classification network")


def predictive_probabilities(net: StochasticMlp, x, rng: Rng, M: int) -> np.ndarray:
    """(M, N, C) softmax outputs of ``M`` sampled forwards."""
    logits = predictive_ensemble(net, x, rng, M)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def baseline_ood_score(net: StochasticMlp, x, rng: Rng, M: int) -> np.ndarray:
    """``1 - max_c mean_m p_m(c|x)`` per input (higher means more OOD)."""
    _require_classifier(net)
    return 1.0 - predictive_probabilities(net, x, rng, M).mean(axis=0).max(axis=1)


@dataclass
class OodDetector:
    probe_layer: int
    mu: float

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ValueError("detector mean energy must be finite")


def _probe_index(net: StochasticMlp, probe_layer: int | None) -> int:
    dens = [i for i, l in enumerate(net.layers) if isinstance(l, DensityUncertaintyLayer)]
    if not dens:
        raise ConfigurationError("energy scoring needs at least one density layer")
    if probe_layer is None:
        return dens[-1]
    if probe_layer not in dens:
        raise ConfigurationError(f"layer {probe_layer} is not a density layer")
    return probe_layer


def probe_energies(net: StochasticMlp, x, probe_layer: int | None = None) -> np.ndarray:
    """Mean-mode energies of layer ``probe_layer`` (default: last density layer)."""
    idx = _probe_index(net, probe_layer)
    with no_grad():
        trace = network_forward(net, np.asarray(x, dtype=np.float64), None, "mean")
    dens = [i for i, l in enumerate(net.layers) if isinstance(l, DensityUncertaintyLayer)]
    return trace.energies[dens.index(idx)].data.copy()


def calibrate_detector(net: StochasticMlp, held_out_inputs, probe_layer: int | None = None) -> OodDetector:
    x = np.asarray(held_out_inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("held-out set is empty")
    idx = _probe_index(net, probe_layer)
    return OodDetector(idx, float(np.mean(probe_energies(net, x, idx))))


def energy_ood_score(detector: OodDetector, net: StochasticMlp, x) -> np.ndarray:
    """Squared deviation of the probe-layer energy from the in-distribution mean."""
    e = probe_energies(net, x, detector.probe_layer)
    return (e - detector.mu) ** 2


@dataclass
class PropositionReport:
    layer_residuals: list[float]
    output_variance: np.ndarray
    expected_total_energy: np.ndarray
    spearman: float


def proposition_check(net: StochasticMlp, probe_grid, rng: Rng, M: int = 10_000) -> PropositionReport:
    """Numerically relate output variance to the expected total energy.

    For every probe point, ``M`` sampled forwards estimate the output variance
    (averaged over output units) and the expected sum of layer energies. Each
    layer's variance law is also checked on ``M`` noise draws with its input
    frozen at the mean-mode activation of every probe point.
    """
    if not all(isinstance(l, DensityUncertaintyLayer) for l in net.layers):
        raise ConfigurationError("proposition_check needs a network of density layers only")
    if M < 2:
        raise ValueError("M must be at least 2")
    x = np.asarray(probe_grid, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    P = x.shape[0]
    out_var = np.empty(P)
    tot_energy = np.empty(P)
    with no_grad():
        for i in range(P):
            trace = network_forward(net, np.repeat(x[i:i + 1], M, axis=0), rng, "sample")
            out_var[i] = trace.output.data.var(axis=0, ddof=1).mean()
            tot_energy[i] = sum(e.data.mean() for e in trace.energies)
        mean_trace = network_forward(net, x, None, "mean")
        residuals = []
        for layer, h in zip(net.layers, mean_trace.activations):
            worst = 0.0
            for i in range(P):
                hi = np.repeat(h.data[i:i + 1], M, axis=0)
                a = layer.forward(hi, rng, "sample").data
                law = layer.predictive_variance(h.data[i:i + 1])[0]
                worst = max(worst, float(np.max(np.abs(a.var(axis=0, ddof=1) / law - 1.0))))
            residuals.append(worst)
    rho = float(spearmanr(tot_energy, out_var).statistic) if P > 2 else float("nan")
    return PropositionReport(residuals, out_var, tot_energy, rho)
