"""The ten acceptance criteria, each at its stated tolerance and runtime budget.

Every test appends one ``PASS``/``FAIL`` line to the "acceptance criteria"
section of the terminal summary. UCI files are read from ``DUNCERT_DATA_DIR``
or, failing that, the repository's ``data/`` directory.
"""

import json
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from duncert import cli, datasets, metrics, verify
from duncert.layers import build_network, predictive_ensemble
from duncert.tensor import Rng
from duncert.training import Trainer

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def _record(log, number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    log.append(line)
    return line


def _suite(log, number, suites, budget):
    t0 = time.perf_counter()
    results = [s() for s in suites]
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in results) and elapsed < budget
    detail = "; ".join(f"{r.name} residual {r.residual:.2e} (tol {r.tolerance:g})" for r in results)
    line = _record(log, number, ok, f"{detail}; {elapsed:.1f}s (budget {budget}s)")
    assert ok, line


def test_criterion_1_blr_identity(acceptance_log):
    _suite(acceptance_log, 1, [verify.blr_identity], 1.0)


def test_criterion_2_variance_law(acceptance_log):
    _suite(acceptance_log, 2, [verify.variance_law], 10.0)


def test_criterion_3_energy_oracles(acceptance_log):
    _suite(acceptance_log, 3, [verify.energy_oracles, verify.quadrature_normalization], 10.0)


def test_criterion_4_gradients(acceptance_log):
    _suite(acceptance_log, 4, [verify.gradient_suite], 30.0)


# --- toy regression: variance landscape and the energy bound ------------------------

def _train_toy(method: str):
    cfg = cli.resolve_config(str(CONFIGS / "toy.json"), {})
    ds, _ = datasets.toy_regression(200, 0.1, 0)
    net = build_network(method, 1, 1, cfg.widths, seed=cfg.seed, activation=cfg.activation,
                        init_std=cfg.init_std)
    Trainer(net, cfg.train_config()).fit(ds.X, ds.y)
    return net, ds


@pytest.fixture(scope="module")
def toy_models():
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        models = {m: _train_toy(m) for m in ("density", "vdropout", "rank1")}
    return models, time.perf_counter() - t0


def gap_ratio(net, ds, M: int = 200) -> float:
    """Median predictive variance on |x| < 0.5 over the median on the training regions."""
    xs = np.linspace(-2.0, 2.0, 81)
    var = predictive_ensemble(net, xs[:, None], Rng(123), M)[..., 0].var(axis=0)
    lo, hi = np.abs(ds.X).min(), np.abs(ds.X).max()
    train = (np.abs(xs) >= lo) & (np.abs(xs) <= hi)
    return float(np.median(var[np.abs(xs) < 0.5]) / np.median(var[train]))


def test_criterion_5_variance_landscape(toy_models, acceptance_log):
    models, train_seconds = toy_models
    t0 = time.perf_counter()
    ratios = {m: gap_ratio(net, ds) for m, (net, ds) in models.items()}
    elapsed = train_seconds + time.perf_counter() - t0
    ok = ratios["density"] >= 2.0 and ratios["vdropout"] <= 1.2 and ratios["rank1"] <= 1.2 and elapsed < 300
    line = _record(acceptance_log, 5, ok,
                   "gap/train variance ratio " + ", ".join(f"{m} {r:.2f}" for m, r in ratios.items())
                   + f" (need density >= 2, baselines <= 1.2); {elapsed:.0f}s (budget 300s)")
    assert ok, line


def test_criterion_9_energy_bound(toy_models, acceptance_log):
    t0 = time.perf_counter()
    untrained = verify.proposition_untrained()
    net, _ = toy_models[0]["density"]
    grid = np.linspace(-3.0, 3.0, 25)[:, None]
    report = metrics.proposition_check(net, grid, Rng(9), 10_000)
    elapsed = time.perf_counter() - t0
    ok = untrained.passed and report.spearman >= 0.5 and elapsed < 120
    line = _record(acceptance_log, 9, ok,
                   f"untrained per-layer residual {untrained.residual:.2e} (tol 0.02); trained toy "
                   f"spearman {report.spearman:.3f} (need >= 0.5); {elapsed:.0f}s (budget 120s)")
    assert ok, line


# --- UCI ------------------------------------------------------------------------------

REFERENCE_BANDS = {
    # dataset: (nll mean, nll std, rmse mean, rmse std)
    "yacht": (2.593, 0.067, 2.505, 0.060),
    "boston": (2.523, 0.205, 2.957, 0.606),
    "energy": (2.034, 0.087, 1.690, 0.268),
}
VDROPOUT_YACHT_NLL = 3.206


def _uci_root() -> Path:
    env = os.environ.get("DUNCERT_DATA_DIR")
    return Path(env) if env else ROOT / "data"


def _bench(name: str, method: str) -> dict:
    cfg = cli.resolve_config(str(CONFIGS / "uci.json"),
                             {"dataset": name, "method": method, "data_dir": str(_uci_root())})
    return cli.run_bench(cfg)


def _in_band(value, mean, std) -> bool:
    return value is not None and mean - 3 * std <= value <= mean + 3 * std


def test_criterion_6_uci_reproduction(acceptance_log):
    t0 = time.perf_counter()
    root = _uci_root()
    present = [n for n in REFERENCE_BANDS if (root / datasets.UCI_LAYOUTS[n][0]).is_file()]
    notes, hits = [], 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name in REFERENCE_BANDS:
            if name not in present:
                notes.append(f"{name} missing")
                continue
            rep = _bench(name, "density")
            nll_m, nll_s, rmse_m, rmse_s = REFERENCE_BANDS[name]
            ok = _in_band(rep["nll"], nll_m, nll_s) and _in_band(rep["rmse"], rmse_m, rmse_s)
            hits += ok
            notes.append(f"{name} NLL {rep['nll']:.3f} RMSE {rep['rmse']:.3f} {'in' if ok else 'out of'} band")
        ordering = None
        if "yacht" in present:
            dens = _bench("yacht", "density")["nll"]
            vd = _bench("yacht", "vdropout")["nll"]
            ordering = dens <= vd
            notes.append(f"yacht density NLL {dens:.3f} vs vdropout {vd:.3f} (reference vdropout {VDROPOUT_YACHT_NLL})")
    elapsed = time.perf_counter() - t0
    ok = hits >= 2 and ordering is True and elapsed <= 1800
    line = _record(acceptance_log, 6, ok, "; ".join(notes) + f"; {hits}/3 in band; {elapsed:.0f}s")
    if len(present) < len(REFERENCE_BANDS) and not ok:
        # without the files the criterion cannot be met; the run above is still the real protocol
        pytest.xfail(line)
    assert ok, line


def test_criterion_7_kl_closed_form(acceptance_log):
    _suite(acceptance_log, 7, [verify.kl_monte_carlo], 5.0)


# --- OOD ------------------------------------------------------------------------------

def _train_blobs(method: str):
    cfg = cli.resolve_config(str(CONFIGS / "blobs.json"), {"method": method})
    trainer, _, _ = cli.run_one(cfg, cfg.seed)
    return trainer.net, cfg


def test_criterion_8_ood_detection(acceptance_log):
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        results = {}
        for method in ("density", "vdropout"):
            net, cfg = _train_blobs(method)
            X_in = cli._ood_inputs("blobs", cfg, "in")
            X_out = cli._ood_inputs("blobs", cfg, "out")
            s_in, s_out, kind = cli.ood_scores(net, X_in, X_out, cfg.held_out_fraction, cfg.samples, cfg.seed)
            results[method] = (metrics.auroc(s_out, s_in), kind)
    elapsed = time.perf_counter() - t0
    energy_auc, kind = results["density"]
    base_auc = results["vdropout"][0]
    ok = kind == "energy" and energy_auc >= 0.9 and energy_auc >= base_auc - 0.05 and elapsed < 180
    line = _record(acceptance_log, 8, ok,
                   f"energy AUROC {energy_auc:.3f} vs max-probability baseline {base_auc:.3f}; "
                   f"{elapsed:.0f}s (budget 180s)")
    assert ok, line


# --- determinism ----------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path, acceptance_log):
    base = ["--epochs", "3", "--samples", "5", "--seed", "11"]
    outputs = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for run in ("a", "b"):
            d = tmp_path / run
            assert cli.main(["train", "--config", str(CONFIGS / "toy.json"), *base, "--out", str(d / "toy")]) == 0
            assert cli.main(["train", "--config", str(CONFIGS / "blobs.json"), *base, "--out", str(d / "blobs")]) == 0
            assert cli.main(["ood", "--checkpoint", str(d / "blobs" / "model.ckpt"), "--config",
                             str(CONFIGS / "blobs.json"), "--seed", "11", "--out", str(d / "ood")]) == 0
            assert cli.main(["fit-blr", "--seed", "11", "--out", str(d / "blr")]) == 0
            assert cli.main(["uci-bench", "--dataset", "toy", "--n-splits", "2", *base,
                             "--out", str(d / "bench")]) == 0
            outputs[run] = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.json"))}
    same = outputs["a"].keys() == outputs["b"].keys() and all(outputs["a"][k] == outputs["b"][k] for k in outputs["a"])
    for blob in outputs["a"].values():
        json.loads(blob)
    line = _record(acceptance_log, 10, same,
                   f"{len(outputs['a'])} JSON outputs from train, ood, fit-blr and uci-bench "
                   f"{'byte-identical' if same else 'differ'} across reruns")
    assert same, line
