"""``duncert`` command-line interface.

Settings come from defaults, then a JSON ``--config`` file, then flags, with
later sources winning. Exit codes: 1 bad configuration or path, 2 training
divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, metrics, verify
from .blr import DataError, blr_energy, blr_predict, criterion_identity_check, fit_blr
from .layers import METHODS, build_network, network_forward, predictive_ensemble
from .tensor import Rng, no_grad
from .training import (CheckpointError, DivergenceError, TrainConfig, Trainer,
                       load_checkpoint, save_checkpoint)

EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 1, 2, 3
ENERGIES = ("ldl", "rank1mix")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "density"
    energy: str = "ldl"
    mix_fraction: float = 0.1
    widths: list = field(default_factory=lambda: [50, 50])
    residual: bool = False
    activation: str = "relu"
    init_std: float = 0.1
    samples: int = 10
    dataset: str = "toy"
    data_dir: str | None = None
    split_ratio: float = 0.9
    n_splits: int = 20
    workers: int = 0
    held_out_fraction: float = 0.5
    ood_shift: float = 6.0
    blr_alpha: float = 1.0
    blr_beta: float = 25.0
    out: str = "runs"
    seed: int = 0
    # training
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

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.energy not in ENERGIES:
            raise ConfigError(f"energy must be one of {ENERGIES}, got {self.energy!r}")
        if self.method != "density" and self.energy != "ldl":
            raise ConfigError("an energy model only applies to the density method")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if not 0 < self.mix_fraction <= 1:
            raise ConfigError("mix_fraction must lie in (0, 1]")
        if self.n_splits < 1:
            raise ConfigError("n_splits must be at least 1")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(asdict(self))

    @property
    def task(self) -> str:
        return "classification" if self.dataset == "blobs" else "regression"


_FLAG_KEYS = ("seed", "method", "energy", "mix_fraction", "samples", "out", "dataset",
              "epochs", "n_splits", "held_out_fraction")


def resolve_config(config_path: str | None, overrides: dict) -> ExperimentConfig:
    """Defaults, then the JSON file, then non-None ``overrides``."""
    values = asdict(ExperimentConfig())
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(loaded) - set(values)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        values.update(loaded)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(overrides) - set(values)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    values.update(overrides)
    for key in ("epochs", "batch_size", "samples", "n_splits", "workers", "seed", "train_samples"):
        if not isinstance(values[key], int) or isinstance(values[key], bool):
            raise ConfigError(f"{key} must be an integer, got {values[key]!r}")
    return ExperimentConfig(**values).validate()


# --- data ---------------------------------------------------------------------

@dataclass
class PreparedData:
    train: datasets.Dataset
    test: datasets.Dataset
    norm: datasets.Normalizer | None
    name: str


def _load_table(cfg: ExperimentConfig) -> datasets.Dataset:
    root = Path(cfg.data_dir) if cfg.data_dir else None
    if cfg.dataset in datasets.UCI_LAYOUTS:
        fname = datasets.UCI_LAYOUTS[cfg.dataset][0]
        path = (root or datasets.data_dir()) / fname
        if not path.is_file():
            raise ConfigError(f"dataset file not found: {path}")
        return datasets.load_uci(cfg.dataset, root)
    path = Path(cfg.dataset)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    return datasets.load_csv(path)


def prepare_data(cfg: ExperimentConfig, split_seed: int) -> PreparedData:
    if cfg.dataset == "toy":
        train, norm, _ = datasets.toy_regression(200, 0.1, 0, return_raw=True)
        raw_test = datasets.toy_regression(200, 0.1, 1 + split_seed, return_raw=True)[2]
        return PreparedData(train, datasets.apply_normalizer(norm, raw_test), norm, "toy")
    if cfg.dataset == "blobs":
        pool, _ = datasets.ood_blobs(1000, 1, cfg.ood_shift, seed=split_seed)
        train, test = datasets.split(pool, cfg.split_ratio, split_seed)
        return PreparedData(train, test, None, "blobs")
    table = _load_table(cfg)
    train, test = datasets.split(table, cfg.split_ratio, split_seed)
    norm = datasets.fit_normalizer(train)
    return PreparedData(datasets.apply_normalizer(norm, train), datasets.apply_normalizer(norm, test),
                        norm, cfg.dataset)


# --- training and evaluation ----------------------------------------------------

def build_from_config(cfg: ExperimentConfig, in_dim: int, out_dim: int, seed: int):
    return build_network(cfg.method, in_dim, out_dim, cfg.widths, seed=seed, energy=cfg.energy,
                         mix_fraction=cfg.mix_fraction, residual=cfg.residual,
                         activation=cfg.activation, init_std=cfg.init_std, task=cfg.task)


def evaluate(net, data: PreparedData, M: int, seed: int) -> dict:
    rng = Rng(seed).spawn(991)
    X, y = data.test.X, data.test.y
    out = {"nll": None, "rmse": None, "ece": None, "accuracy": None}
    if net.task == "regression":
        S = predictive_ensemble(net, X, rng, M)[..., 0]
        with np.errstate(over="ignore"):
            sigma = float(np.exp(0.5 * net.log_noise_var.data))
        if not (np.isfinite(sigma) and sigma > 0 and np.all(np.isfinite(S))):
            raise DivergenceError("non-finite predictions after training")
        norm = data.norm
        samples = norm.inverse_y(S) if norm else S
        y_raw = norm.inverse_y(y) if norm else y
        sigma_raw = sigma * (norm.y_std if norm else 1.0)
        out["nll"] = metrics.regression_nll(samples, sigma_raw, y_raw)
        out["rmse"] = metrics.rmse(samples, y_raw)
    else:
        P = metrics.predictive_probabilities(net, X, rng, M).mean(axis=0)
        labels = y.astype(np.int64)
        out["nll"] = float(-np.mean(np.log(np.maximum(P[np.arange(len(labels)), labels], 1e-300))))
        out["ece"] = metrics.ece(P, labels)
        out["accuracy"] = float(np.mean(P.argmax(axis=1) == labels))
    if net.density_layers():
        with no_grad():
            trace = network_forward(net, X, None, "mean")
        out["layer_energy_means"] = [float(np.mean(e.data)) for e in trace.energies]
    return out


def run_one(cfg: ExperimentConfig, seed: int) -> tuple[Trainer, PreparedData, dict]:
    data = prepare_data(cfg, seed)
    out_dim = 2 if cfg.task == "classification" else 1
    net = build_from_config(cfg, data.train.dim, out_dim, seed)
    tc = cfg.train_config()
    tc.seed = seed
    trainer = Trainer(net, tc)
    y = data.train.y if cfg.task == "classification" else data.train.y.astype(np.float64)
    trainer.fit(data.train.X, y)
    return trainer, data, evaluate(net, data, cfg.samples, seed)


def metrics_report(cfg: ExperimentConfig, dataset: str, seed, summary: dict, per_split: list) -> dict:
    return {"dataset": dataset, "method": cfg.method, "seed": seed,
            "nll": summary.get("nll"), "rmse": summary.get("rmse"), "ece": summary.get("ece"),
            "auroc": summary.get("auroc"), "auprc": summary.get("auprc"), "per_split": per_split}


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n", encoding="utf-8")


# --- commands -------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> int:
    trainer, data, result = run_one(cfg, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"experiment": asdict(cfg)}
    if data.norm is not None:
        extra["normalizer"] = {"x_mean": data.norm.x_mean.tolist(), "x_std": data.norm.x_std.tolist(),
                               "y_mean": data.norm.y_mean, "y_std": data.norm.y_std}
    save_checkpoint(out / "model.ckpt", trainer, extra)
    report = metrics_report(cfg, data.name, cfg.seed, result, [dict(result, seed=cfg.seed)])
    write_json(out / "metrics.json", report)
    print(f"train {data.name} {cfg.method} seed={cfg.seed} nll={_fmt(report['nll'])} "
          f"rmse={_fmt(report['rmse'])} -> {out}")
    return 0


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


def cmd_fit_blr(cfg: ExperimentConfig, args) -> int:
    data = prepare_data(cfg, cfg.seed)
    X, Xt = data.train.X, data.test.X
    post = fit_blr(X, data.train.y, cfg.blr_alpha, cfg.blr_beta)
    rows = []
    for x in Xt:
        mean, var = blr_predict(post, cfg.blr_beta, x)
        rows.append({"mean": mean, "var": var, "energy": blr_energy(post, x),
                     "identity_residual": criterion_identity_check(post, cfg.blr_beta, x)})
    report = {"dataset": data.name, "alpha": cfg.blr_alpha, "beta": cfg.blr_beta, "n_train": post.N,
              "max_identity_residual": max(r["identity_residual"] for r in rows),
              "mu": post.mu.tolist(), "test": rows}
    write_json(Path(cfg.out) / "blr.json", report)
    print(f"fit-blr {data.name}: N={post.N} max identity residual {report['max_identity_residual']:.3e}")
    return 0


def landscape_rows(net, grid: np.ndarray, M: int, seed: int) -> list[tuple]:
    if net.in_dim != 1:
        raise ConfigError("landscape needs a model with one input feature")
    S = predictive_ensemble(net, grid[:, None], Rng(seed).spawn(17), M)[..., 0]
    mean = S.mean(axis=0)
    dev = np.abs(S - mean)
    p95, p99 = np.percentile(dev, 95, axis=0), np.percentile(dev, 99, axis=0)
    return list(zip(grid, mean, S.var(axis=0), p95, p99))


def cmd_landscape(cfg: ExperimentConfig, args) -> int:
    trainer, _ = _open_checkpoint(args.checkpoint)
    grid = np.linspace(args.grid_min, args.grid_max, args.grid_n)
    rows = landscape_rows(trainer.net, grid, cfg.samples, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "landscape.csv", "w", encoding="utf-8") as f:
        f.write("x,mean,var,p95,p99\n")
        for r in rows:
            f.write(",".join(repr(float(v)) for v in r) + "\n")
    print(f"landscape: {len(rows)} rows -> {out / 'landscape.csv'}")
    return 0


def _open_checkpoint(path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _split_job(payload):
    cfg_dict, seed = payload
    cfg = ExperimentConfig(**cfg_dict)
    try:
        _, _, result = run_one(cfg, seed)
        return dict(result, seed=seed, failed=False)
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return {"seed": seed, "failed": True, "error": str(exc)}


def aggregate(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    return mean, (float(np.std(values, ddof=1)) if len(values) > 1 else None)


def run_bench(cfg: ExperimentConfig) -> dict:
    if cfg.dataset not in ("toy", "blobs"):
        _load_table(cfg)  # fail fast on a missing file
    jobs = [(asdict(cfg), s) for s in range(cfg.n_splits)]
    workers = cfg.workers or min(cfg.n_splits, os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_split = list(pool.map(_split_job, jobs))
    else:
        per_split = [_split_job(j) for j in jobs]
    ok = [r for r in per_split if not r["failed"]]
    summary = {}
    for key in ("nll", "rmse", "ece"):
        vals = [r[key] for r in ok if r.get(key) is not None]
        summary[key], summary[key + "_std"] = aggregate(vals)
    report = metrics_report(cfg, cfg.dataset, list(range(cfg.n_splits)), summary, per_split)
    report.update(nll_std=summary["nll_std"], rmse_std=summary["rmse_std"],
                  failed_splits=len(per_split) - len(ok))
    return report


def format_table(report: dict) -> str:
    def pm(m, s):
        return "NA" if m is None else f"{m:.3f} ± {'NA' if s is None else f'{s:.3f}'}"
    head = f"{'dataset':<12}{'method':<12}{'NLL':>20}{'RMSE':>20}"
    row = (f"{report['dataset']:<12}{report['method']:<12}"
           f"{pm(report['nll'], report['nll_std']):>20}{pm(report['rmse'], report['rmse_std']):>20}")
    return head + "\n" + row


def cmd_uci_bench(cfg: ExperimentConfig, args) -> int:
    report = run_bench(cfg)
    write_json(Path(cfg.out) / f"bench_{Path(cfg.dataset).stem}_{cfg.method}.json", report)
    print(format_table(report))
    if report["failed_splits"] > 0.2 * cfg.n_splits:
        print(f"{report['failed_splits']} of {cfg.n_splits} splits failed", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def ood_scores(net, X_in, X_out, held_out_fraction: float, M: int, seed: int):
    """Scores for (in-distribution, OOD) inputs; energy statistic when available."""
    if not 0 < held_out_fraction < 1:
        raise ConfigError("held_out_fraction must lie strictly between 0 and 1")
    n_cal = max(1, int(round(held_out_fraction * len(X_in))))
    if n_cal >= len(X_in):
        raise ConfigError("held-out fraction leaves no in-distribution points to score")
    perm = Rng(seed).spawn(23).permutation(len(X_in))
    cal, scored = X_in[perm[:n_cal]], X_in[perm[n_cal:]]
    if net.density_layers():
        det = metrics.calibrate_detector(net, cal)
        return metrics.energy_ood_score(det, net, scored), metrics.energy_ood_score(det, net, X_out), "energy"
    if net.task != "classification":
        raise ConfigError("max-probability scoring needs a classification model")
    rng = Rng(seed).spawn(29)
    return (metrics.baseline_ood_score(net, scored, rng, M),
            metrics.baseline_ood_score(net, X_out, rng, M), "max_probability")


def _ood_inputs(spec: str, cfg: ExperimentConfig, which: str) -> np.ndarray:
    """``blobs`` picks the side matching ``which``; ``blobs-in``/``blobs-out`` force one."""
    if spec in ("blobs", "blobs-in", "blobs-out"):
        side = which if spec == "blobs" else spec.split("-")[1]
        seed = 10_000 + cfg.seed + (0 if which == "in" else 1)
        ds_in, ds_out = datasets.ood_blobs(500, 500, cfg.ood_shift, seed=seed)
        return (ds_in if side == "in" else ds_out).X
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    return datasets.load_csv(path).X


def cmd_ood(cfg: ExperimentConfig, args) -> int:
    trainer, ckpt = _open_checkpoint(args.checkpoint)
    X_in = _ood_inputs(args.in_data, cfg, "in")
    X_out = _ood_inputs(args.out_data, cfg, "out")
    s_in, s_out, kind = ood_scores(trainer.net, X_in, X_out, cfg.held_out_fraction, cfg.samples, cfg.seed)
    report = metrics_report(cfg, f"{args.in_data}->{args.out_data}", cfg.seed,
                            {"auroc": metrics.auroc(s_out, s_in), "auprc": metrics.auprc(s_out, s_in)}, [])
    report["score"] = kind
    write_json(Path(cfg.out) / "ood.json", report)
    print(f"ood ({kind}): AUROC {report['auroc']:.4f} AUPRC {report['auprc']:.4f}")
    return 0


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    results = verify.run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failing suites: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return 0


COMMANDS = {"train": cmd_train, "fit-blr": cmd_fit_blr, "landscape": cmd_landscape,
            "uci-bench": cmd_uci_bench, "ood": cmd_ood, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--energy", choices=ENERGIES)
    common.add_argument("--mix-fraction", dest="mix_fraction", type=float)
    common.add_argument("--samples", type=int, help="predictive samples M")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="toy, blobs, a UCI name or a CSV path")
    common.add_argument("--epochs", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (value parsed as JSON)")

    p = argparse.ArgumentParser(prog="duncert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("landscape", "ood"):
            sp.add_argument("--checkpoint")
        if name == "landscape":
            sp.add_argument("--grid-min", type=float, default=-2.0)
            sp.add_argument("--grid-max", type=float, default=2.0)
            sp.add_argument("--grid-n", type=int, default=81)
        if name == "uci-bench":
            sp.add_argument("--n-splits", dest="n_splits", type=int)
        if name == "ood":
            sp.add_argument("--in-data", default="blobs")
            sp.add_argument("--out-data", default="blobs")
            sp.add_argument("--held-out-fraction", dest="held_out_fraction", type=float)
    return p


def _parse_sets(items) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key.replace("-", "_")] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = raw
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _parse_sets(args.set)
        overrides.update({k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k, None) is not None})
        cfg = resolve_config(args.config, overrides)
        if args.command == "landscape" and args.grid_n < 1:
            raise ConfigError("--grid-n must be positive")
        return COMMANDS[args.command](cfg, args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, metrics.ConfigurationError, FileNotFoundError, CheckpointError,
            datasets.ParseError, DataError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
