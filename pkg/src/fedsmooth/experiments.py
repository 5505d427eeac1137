"""Experiment commands behind the CLI: train, certify, bench and ablate.

Each command takes an :class:`ExperimentConfig` and writes its artifacts
under ``cfg.out``:

- ``train``: ``model.params`` (checkpoint) and ``rounds.csv`` (round log)
- ``certify``: ``curve.csv``
- ``bench``: ``bench.json``
- ``ablate``: one subdirectory per ablation plus ``ablation.csv``
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from fedsmooth import attack, data, evaluation, federation, nn
from fedsmooth.attack import AttackConfig
from fedsmooth.config import ExperimentConfig
from fedsmooth.data import Dataset
from fedsmooth.errors import ConfigError
from fedsmooth.evaluation import CurveRow
from fedsmooth.federation import FederationConfig, TrainingResult
from fedsmooth.smoothing import SmoothingConfig

STREAM_BENCH = 4
CHECKPOINT_NAME = "model.params"
ROUND_LOG_NAME = "rounds.csv"
CURVE_NAME = "curve.csv"
BENCH_NAME = "bench.json"
ABLATION_NAME = "ablation.csv"

Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets for ``cfg``; deterministic in ``cfg.seed``."""
    if cfg.dataset == "blobs":
        full = data.synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim, cfg.blob_spread,
                                seed=cfg.seed, radius=cfg.blob_radius, background=cfg.blob_background)
        train, test = data.split(full, cfg.train_fraction, seed=cfg.seed)
    else:
        if not (cfg.train_images and cfg.train_labels):
            raise ConfigError("dataset = idx needs train_images and train_labels")
        train = data.load_idx(cfg.train_images, cfg.train_labels)
        if cfg.subset and cfg.subset < len(train):
            train = train.subset(np.sort(np.random.default_rng(cfg.seed).permutation(len(train))[:cfg.subset]))
        if cfg.test_images and cfg.test_labels:
            test = data.load_idx(cfg.test_images, cfg.test_labels, train.num_classes)
        else:
            train, test = data.split(train, cfg.train_fraction, seed=cfg.seed)
    data.require_classes(train)
    return train, test


def network_spec(cfg: ExperimentConfig, dataset: Dataset) -> nn.NetworkSpec:
    return nn.NetworkSpec((dataset.dim, *cfg.hidden_sizes, dataset.num_classes))


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    return FederationConfig(num_devices=cfg.num_devices, participation=cfg.participation,
                            samples_per_device=cfg.samples_per_device, gamma_device=cfg.gamma,
                            local_batches=cfg.local_batches, batch_size=cfg.batch_size,
                            central_batch_size=cfg.central_batch_size, rounds=cfg.rounds,
                            outer_lr=cfg.outer_lr, seed=cfg.seed)


def attack_config(cfg: ExperimentConfig) -> AttackConfig:
    return AttackConfig(epsilon=attack.pixel_epsilon(cfg.epsilon), steps=cfg.pgd_steps, inner_lr=cfg.inner_lr,
                        estimator=cfg.estimator, m=cfg.m)


def smoothing_config(cfg: ExperimentConfig) -> SmoothingConfig:
    return SmoothingConfig(sigma=cfg.sigma, m=cfg.m, n0=cfg.n0, n=cfg.n, alpha=cfg.alpha)


def radii(cfg: ExperimentConfig) -> list[float]:
    return evaluation.radius_grid(cfg.radius_max, cfg.radius_step)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_model(cfg: ExperimentConfig, train: Dataset, log: Log = _quiet) -> TrainingResult:
    spec = network_spec(cfg, train)
    init = nn.init_params(spec, cfg.seed)

    def report(record, _params):
        log(f"round {record.round + 1}/{cfg.rounds} loss {record.mean_loss:.4f} ({record.seconds:.2f}s)")

    return federation.run_training(train, spec, federation_config(cfg), attack_config(cfg), smoothing_config(cfg),
                                   mode=cfg.mode, ablation=cfg.ablation, init=init, workers=cfg.workers,
                                   on_round=report)


def cmd_train(cfg: ExperimentConfig, log: Log = _quiet) -> TrainingResult:
    """Train per ``cfg`` and write the checkpoint and round log."""
    train, _ = load_data(cfg)
    result = train_model(cfg, train, log)
    out = _out_dir(cfg)
    nn.save_params(result.params, out / CHECKPOINT_NAME)
    federation.write_round_log(out / ROUND_LOG_NAME, result.rounds)
    log(f"wrote {out / CHECKPOINT_NAME} and {out / ROUND_LOG_NAME}")
    return result


def curve_rows(cfg: ExperimentConfig, params: nn.Params, test: Dataset) -> list[CurveRow]:
    """Certify the first ``cfg.cert_points`` test rows into one curve."""
    outcomes = evaluation.certify_dataset(params, test, smoothing_config(cfg), cfg.cert_points, seed=cfg.seed,
                                          workers=cfg.workers)
    curve = evaluation.certified_accuracy_curve(outcomes, test.labels, radii(cfg))
    estimator = federation.estimator_label(attack_config(cfg), cfg.ablation)
    return [CurveRow(cfg.mode, cfg.ablation, estimator, cfg.sigma, cfg.epsilon, cfg.gamma, p.radius,
                     p.certified_accuracy) for p in curve]


def cmd_certify(cfg: ExperimentConfig, log: Log = _quiet) -> list[CurveRow]:
    """Certify a checkpoint (``cfg.checkpoint`` or ``out/model.params``) and write ``curve.csv``."""
    checkpoint = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / CHECKPOINT_NAME
    params = nn.load_params(checkpoint)
    _, test = load_data(cfg)
    rows = curve_rows(cfg, params, test)
    path = _out_dir(cfg) / CURVE_NAME
    evaluation.write_curve_csv(path, rows)
    log(f"certified accuracy at r=0: {rows[0].certified_accuracy:.3f}; wrote {path}")
    return rows


@dataclass(frozen=True)
class BenchReport:
    attacks: int
    layer_sizes: str
    sigma: float
    epsilon: float
    seconds_stochastic: float
    seconds_one_point: float
    within_ball: bool
    checksum_stochastic: float
    checksum_one_point: float

    @property
    def ratio(self) -> float:
        return self.seconds_stochastic / self.seconds_one_point

    def to_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio}


def bench_estimators(cfg: ExperimentConfig, params: nn.Params, inputs: np.ndarray, labels: np.ndarray) -> BenchReport:
    """Time ``cfg.bench_attacks`` single-example attacks per estimator.

    Inputs cycle through ``inputs``; attack ``i`` uses noise from its own
    stream, so both estimators see identical inputs and noise.
    """
    acfg = attack_config(cfg)
    count = cfg.bench_attacks
    rows = np.arange(count) % len(inputs)
    noise = [attack.draw_noise(federation.substream(cfg.seed, STREAM_BENCH, i), cfg.m, params.spec.input_dim,
                               cfg.sigma) for i in range(count)]
    seconds, checksums, inside = {}, {}, True
    for estimator in attack.ESTIMATORS:
        config = AttackConfig(acfg.epsilon, acfg.steps, acfg.inner_lr, estimator, acfg.m)
        outputs = np.empty((count, params.spec.input_dim))
        start = time.perf_counter()
        for i, r in enumerate(rows):
            outputs[i] = attack.smoothadv_attack(params, inputs[r], int(labels[r]), config, cfg.sigma, noise[i])
        seconds[estimator] = (time.perf_counter() - start) / count
        dist = np.linalg.norm(outputs - inputs[rows], axis=1)
        inside &= bool(np.all(dist <= acfg.epsilon * (1 + 1e-12)))
        checksums[estimator] = float(np.round(np.sum(outputs), 9))
    return BenchReport(count, str(params.spec), cfg.sigma, cfg.epsilon, seconds["stochastic"], seconds["one_point"],
                       inside, checksums["stochastic"], checksums["one_point"])


def cmd_bench(cfg: ExperimentConfig, log: Log = _quiet) -> BenchReport:
    """Bench both estimators on the configured MLP and write ``bench.json``.

    Uses ``cfg.checkpoint`` when set, otherwise a freshly initialized network.
    """
    _, test = load_data(cfg)
    if cfg.checkpoint:
        params = nn.load_params(cfg.checkpoint)
        if params.spec.input_dim != test.dim:
            raise ConfigError(f"checkpoint expects {params.spec.input_dim} features, test set has {test.dim}")
    else:
        params = nn.init_params(network_spec(cfg, test), cfg.seed)
    report = bench_estimators(cfg, params, test.features, test.labels)
    path = _out_dir(cfg) / BENCH_NAME
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    log(f"stochastic {report.seconds_stochastic * 1e3:.3f} ms, one_point {report.seconds_one_point * 1e3:.3f} ms, "
        f"ratio {report.ratio:.2f}; wrote {path}")
    return report


def cmd_ablate(cfg: ExperimentConfig, log: Log = _quiet) -> list[CurveRow]:
    """Train and certify every ablation, appending all curves to ``ablation.csv``."""
    out = _out_dir(cfg)
    train, test = load_data(cfg)
    rows: list[CurveRow] = []
    for ablation in federation.ABLATIONS:
        sub = cfg.replace(ablation=ablation, out=str(out / ablation))
        log(f"[{ablation}] training")
        result = train_model(sub, train, log)
        sub_out = _out_dir(sub)
        nn.save_params(result.params, sub_out / CHECKPOINT_NAME)
        federation.write_round_log(sub_out / ROUND_LOG_NAME, result.rounds)
        curve = curve_rows(sub, result.params, test)
        evaluation.write_curve_csv(sub_out / CURVE_NAME, curve)
        log(f"[{ablation}] certified accuracy at r=0.25: {_at(curve, 0.25):.3f}")
        rows.extend(curve)
    evaluation.write_curve_csv(out / ABLATION_NAME, rows)
    log(f"wrote {out / ABLATION_NAME}")
    return rows


def _at(rows: list[CurveRow], radius: float) -> float:
    return next((r.certified_accuracy for r in rows if abs(r.radius - radius) < 1e-9), float("nan"))
