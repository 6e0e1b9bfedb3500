"""Self-contained numeric property suites.

Each suite returns a :class:`SuiteResult`; :func:`run_all` runs them in order.
The same suites back ``duncert verify`` and the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import spearmanr

from . import blr, energy, layers, metrics, training
from . import tensor as T
from .tensor import Rng, Tensor


@dataclass
class SuiteResult:
    name: str
    passed: bool
    residual: float
    tolerance: float
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: residual {self.residual:.3e} (tol {self.tolerance:g}) in {self.seconds:.2f}s"


def _result(name, residual, tol, **details) -> SuiteResult:
    residual = float(residual)
    return SuiteResult(name, bool(np.isfinite(residual) and residual < tol), residual, tol, details=details)


# --- closed-form identities --------------------------------------------------

def blr_identity(n_problems: int = 100, seed: int = 0) -> SuiteResult:
    """Predictive variance equals ``1/beta + 2/(beta N) E(x)`` on random problems."""
    g = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_problems):
        N, D = int(g.integers(1, 201)), int(g.integers(1, 21))
        alpha, beta = g.uniform(0.1, 10.0, size=2)
        X = g.normal(size=(N, D))
        y = X @ g.normal(size=D) + g.normal(size=N) / np.sqrt(beta)
        post = blr.fit_blr(X, y, alpha, beta)
        x_star = g.normal(size=D) * g.uniform(0.1, 3.0)
        worst = max(worst, blr.criterion_identity_check(post, beta, x_star))
    return _result("blr_identity", worst, 1e-10, problems=n_problems)


def variance_law(n_pairs: int = 20, n_samples: int = 100_000, seed: int = 1) -> SuiteResult:
    """Sampled pre-activation variance of a density layer matches ``gamma E + beta``."""
    g = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_pairs):
        d_in, d_out = int(g.integers(1, 9)), int(g.integers(1, 5))
        kind = "ldl" if k % 2 == 0 else "rank1mix"
        layer = layers.DensityUncertaintyLayer(d_in, d_out, Rng(seed * 1000 + k), kind)
        layer.log_gamma.data = g.uniform(-3.0, 1.0, d_out)
        layer.log_beta.data = g.uniform(-3.0, 1.0, d_out)
        _randomize_energy(layer.energy, g)
        h = g.normal(size=d_in)
        law = layer.predictive_variance(h)
        with T.no_grad():
            a = layer.forward(Tensor(np.repeat(h[None, :], n_samples, axis=0)), Rng(k), "sample").data
        worst = max(worst, float(np.max(np.abs(a.var(axis=0, ddof=1) / law - 1.0))))
    return _result("variance_law", worst, 0.02, pairs=n_pairs, samples=n_samples)


def _randomize_energy(model, g: np.random.Generator) -> None:
    if isinstance(model, energy.LdlGaussianEnergy):
        model.L_strict.data = np.tril(g.normal(scale=0.5, size=model.L_strict.shape), -1)
        model.log_d.data = g.uniform(-1.0, 1.0, model.dim)
    else:
        model.v.data = g.normal(size=model.v.shape)
        model.log_d.data = g.uniform(-1.0, 1.0, model.log_d.shape)
        model.logits.data = g.normal(size=model.logits.shape)


def energy_oracles(n_draws: int = 100, seed: int = 2) -> SuiteResult:
    """Sherman-Morrison and LDL energies against dense linear algebra."""
    g = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        D = int(g.integers(1, 9))
        v, d, h = g.normal(size=D), g.uniform(0.2, 3.0, D), g.normal(size=D)
        S = np.outer(v, v) + np.diag(d)
        q_ref = h @ np.linalg.solve(S, h)
        ld_ref = np.linalg.slogdet(S)[1]
        q = energy.rank1_inverse_quadratic(v, d, h).item()
        ld = energy.rank1_log_det(v, d).item()
        worst = max(worst, abs(q - q_ref) / max(1.0, abs(q_ref)), abs(ld - ld_ref) / max(1.0, abs(ld_ref)))

        model = energy.LdlGaussianEnergy(D)
        _randomize_energy(model, g)
        e_ref = 0.5 * h @ model.precision() @ h
        worst = max(worst, abs(model.energy(h).item() - e_ref) / max(1.0, e_ref))
    return _result("energy_oracles", worst, 1e-10, draws=n_draws)


def quadrature_normalization(seed: int = 3) -> SuiteResult:
    """Both energy models integrate to one in 1-D and 2-D."""
    g = np.random.default_rng(seed)
    worst = 0.0
    for D in (1, 2):
        for kind in ("ldl", "rank1mix"):
            model = energy.make_energy(kind, D, Rng(seed))
            if kind == "rank1mix":
                model = energy.Rank1MixtureEnergy(D, 2, Rng(seed))
            _randomize_energy(model, g)
            n = 4001 if D == 1 else 601
            lim = 12.0
            axis = np.linspace(-lim, lim, n)
            if D == 1:
                pts = axis[:, None]
            else:
                gx, gy = np.meshgrid(axis, axis, indexing="ij")
                pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
            with T.no_grad():
                dens = np.exp(model.log_likelihood(pts).data)
            if D == 1:
                total = trapezoid(dens, axis)
            else:
                total = trapezoid(trapezoid(dens.reshape(n, n), axis, axis=1), axis)
            worst = max(worst, abs(total - 1.0))
    return _result("quadrature_normalization", worst, 1e-3)


def kl_monte_carlo(n_pairs: int = 5, n_samples: int = 1_000_000, seed: int = 4) -> SuiteResult:
    """Closed-form KL between zero-mean Gaussians against a sampled estimate."""
    g = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        gamma, sp2 = g.uniform(0.01, 0.3), g.uniform(1.0, 3.0)
        z = np.sqrt(gamma) * g.standard_normal(n_samples)
        log_q = -0.5 * z * z / gamma - 0.5 * np.log(2 * np.pi * gamma)
        log_p = -0.5 * z * z / sp2 - 0.5 * np.log(2 * np.pi * sp2)
        mc = float(np.mean(log_q - log_p))
        exact = training.gaussian_kl_zero_mean(gamma, sp2)
        worst = max(worst, abs(mc / exact - 1.0))
    return _result("kl_monte_carlo", worst, 0.01, pairs=n_pairs, samples=n_samples)


# --- gradients ---------------------------------------------------------------

def _layer_fixtures(seed: int):
    g = np.random.default_rng(seed)
    h = Tensor(g.normal(size=(4, 3)))
    out = []
    for name, layer in (
        ("density_ldl", layers.DensityUncertaintyLayer(3, 2, Rng(seed), "ldl")),
        ("density_rank1mix", layers.DensityUncertaintyLayer(3, 2, Rng(seed), "rank1mix", mix_fraction=0.7)),
        ("mfvi", layers.MfviLinearLayer(3, 2, Rng(seed), 0.3)),
        ("vdropout", layers.VariationalDropoutLayer(3, 2, Rng(seed), 0.2)),
        ("rank1", layers.Rank1BnnLayer(3, 2, Rng(seed), 0.3)),
        ("mcdropout", layers.McDropoutLayer(3, 2, Rng(seed), 0.3)),
    ):
        if layer.energy is not None:
            _randomize_energy(layer.energy, g)
            layer.log_gamma.data = g.uniform(-1.0, 0.5, 2)
            layer.log_beta.data = g.uniform(-1.0, 0.5, 2)
        out.append((name, layer, h))
    return out, g


def gradient_suite(seed: int = 5, step: float = 1e-5) -> SuiteResult:
    """Central differences on every layer type, both energies, ELBO and generative loss."""
    fixtures, g = _layer_fixtures(seed)
    errors: dict[str, float] = {}
    weights = Tensor(g.normal(size=(4, 2)))

    for name, layer, h in fixtures:
        def loss_of(_theta, layer=layer):
            return T.tsum(T.tanh(layer.forward(h_var, Rng(11), "sample")) * weights)
        h_var = Tensor(h.data.copy())
        for pname, p in layer.parameters().items():
            errors[f"{name}.{pname}"] = T.finite_diff_check(loss_of, p, step)
        errors[f"{name}.input"] = T.finite_diff_check(loss_of, h_var, step)

    for kind in ("ldl", "rank1mix"):
        model = energy.Rank1MixtureEnergy(3, 2, Rng(seed)) if kind == "rank1mix" else energy.LdlGaussianEnergy(3)
        _randomize_energy(model, g)
        acts = Tensor(g.normal(size=(5, 3)))
        for pname, p in model.parameters().items():
            errors[f"energy_{kind}.{pname}"] = T.finite_diff_check(
                lambda _t, m=model: T.mean(m.energy(acts)), p, step)
            errors[f"genloss_{kind}.{pname}"] = T.finite_diff_check(
                lambda _t, m=model: energy.generative_loss([m], [acts], 0.1, 0.01), p, step)
        errors[f"energy_{kind}.input"] = T.finite_diff_check(lambda _t, m=model: T.mean(m.energy(acts)), acts, step)

    for method in ("density", "mfvi", "rank1"):
        net = layers.build_network(method, 3, 1, [4], seed=seed, activation="tanh")
        X, y = g.normal(size=(6, 3)), g.normal(size=6)
        cfg = training.TrainConfig()
        for pname, p in net.discriminative_parameters().items():
            errors[f"elbo_{method}.{pname}"] = T.finite_diff_check(
                lambda _t, net=net, X=X, y=y: training.elbo_loss(net, X, y, Rng(3), 60, cfg), p, step)

    worst_name = max(errors, key=errors.get)
    return _result("gradients", errors[worst_name], 1e-6, checks=len(errors), worst=worst_name)


# --- the energy bound ----------------------------------------------------------

def proposition_untrained(n_samples: int = 100_000, seed: int = 6) -> SuiteResult:
    """Per-layer variance law inside random density networks at frozen inputs."""
    worst = 0.0
    rho = []
    for k, (widths, act) in enumerate((([5, 5], "tanh"), ([4], "relu"))):
        net = layers.build_network("density", 2, 2, widths, seed=seed + k, activation=act)
        g = np.random.default_rng(seed + k)
        for layer in net.layers:
            _randomize_energy(layer.energy, g)
        grid = np.linspace(-2.0, 2.0, 5)[:, None] * np.array([[1.0, -0.5]])
        rep = metrics.proposition_check(net, grid, Rng(seed + k), n_samples)
        worst = max(worst, max(rep.layer_residuals))
        rho.append(rep.spearman)
    return _result("proposition_layers", worst, 0.02, spearman=rho)


SUITES = (blr_identity, variance_law, energy_oracles, quadrature_normalization,
          kl_monte_carlo, gradient_suite, proposition_untrained)


def run_all(suites=SUITES) -> list[SuiteResult]:
    results = []
    for suite in suites:
        t0 = time.perf_counter()
        try:
            res = suite()
        except Exception as exc:  # a crashing suite is a failing suite
            res = SuiteResult(suite.__name__, False, float("nan"), 0.0, details={"error": repr(exc)})
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def spearman(a, b) -> float:
    return float(spearmanr(a, b).statistic)
