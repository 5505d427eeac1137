"""Simulated synchronous FedAvg with SmoothAdv local training."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from fedsmooth import attack, nn
from fedsmooth.attack import AttackConfig
from fedsmooth.data import Dataset
from fedsmooth.errors import ConfigError, NumericError
from fedsmooth.smoothing import SmoothingConfig

log = logging.getLogger(__name__)

MODES = ("fed", "central")
ABLATIONS = ("standard", "adv_only", "adv_smooth")
ROUND_LOG_HEADER = ("round", "mode", "estimator", "mean_loss", "seconds")

# first key of every derived random stream
STREAM_PARTITION = 0
STREAM_CLIENTS = 1
STREAM_LOCAL = 2


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator determined only by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@dataclass(frozen=True)
class FederationConfig:
    """Defaults are the full-scale setting; see :meth:`desk` for a laptop-sized one."""

    num_devices: int = 1000
    participation: float = 0.1
    samples_per_device: int = 500
    gamma_device: float = 0.5
    local_batches: int = 20
    batch_size: int = 30
    central_batch_size: int = 60
    rounds: int = 150
    outer_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.num_devices < 1:
            raise ValueError(f"num_devices must be >= 1, got {self.num_devices}")
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        if self.samples_per_device < 1:
            raise ValueError(f"samples_per_device must be >= 1, got {self.samples_per_device}")
        if not 0 < self.gamma_device < 1:
            raise ValueError(f"gamma_device must lie in (0, 1), got {self.gamma_device}")
        if self.local_batches < 0 or self.rounds < 0:
            raise ValueError("local_batches and rounds must be >= 0")
        if self.batch_size < 1 or self.central_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.outer_lr < 0:
            raise ValueError(f"outer_lr must be >= 0, got {self.outer_lr}")

    @classmethod
    def desk(cls, **overrides) -> "FederationConfig":
        return cls(**{"num_devices": 20, "samples_per_device": 100, "rounds": 30, **overrides})

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.num_devices * self.participation - 1e-9))


@dataclass(frozen=True, eq=False)
class Partition:
    device_id: int
    major_class: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    mode: str
    estimator: str
    mean_loss: float
    seconds: float


@dataclass(eq=False)
class TrainingResult:
    params: nn.Params
    rounds: list[RoundRecord] = field(default_factory=list)
    partitions: list[Partition] | None = None


def partition_heterogeneous(labels, cfg: FederationConfig, rng: np.random.Generator,
                            num_classes: int | None = None) -> list[Partition]:
    """Give every device ``floor(gamma * n_k)`` samples of a random major class.

    The remaining samples come uniformly from the pooled examples of all other
    classes. Draws are without replacement within a device; devices may share
    examples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = num_classes or int(labels.max()) + 1
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, idx in enumerate(by_class):
        if idx.size == 0:
            raise ConfigError(f"class {c} has no examples to partition")

    n_k = cfg.samples_per_device
    n_major = int(math.floor(cfg.gamma_device * n_k))
    n_rest = n_k - n_major
    parts = []
    for k in range(cfg.num_devices):
        major = int(rng.integers(num_classes))
        pool_major = by_class[major]
        pool_rest = np.flatnonzero(labels != major)
        if pool_major.size < n_major:
            raise ConfigError(f"class {major} has {pool_major.size} examples, device {k} needs {n_major}")
        if pool_rest.size < n_rest:
            raise ConfigError(f"only {pool_rest.size} examples outside class {major}, device {k} needs {n_rest}")
        idx = np.concatenate([
            rng.choice(pool_major, n_major, replace=False),
            rng.choice(pool_rest, n_rest, replace=False),
        ])
        parts.append(Partition(k, major, idx))
    return parts


def sample_clients(num_devices: int, participation: float, round_index: int,
                   rng: np.random.Generator) -> list[int]:
    """Sorted ids of ``ceil(K * participation)`` distinct devices.

    ``round_index`` is informational; determinism per round comes from the
    caller handing in the round's own stream.
    """
    count = max(1, math.ceil(num_devices * participation - 1e-9))
    return sorted(int(k) for k in rng.choice(num_devices, size=count, replace=False))


def estimator_label(acfg: AttackConfig, ablation: str) -> str:
    if ablation == "standard":
        return "none"
    if ablation == "adv_only":
        return "stochastic"
    return acfg.estimator


def training_examples(theta: nn.Params, x: np.ndarray, y: np.ndarray, acfg: AttackConfig, sigma: float,
                      rng: np.random.Generator, ablation: str = "adv_smooth") -> tuple[np.ndarray, np.ndarray]:
    """The list of training pairs one minibatch contributes.

    ``adv_smooth`` attacks the smoothed classifier and returns the ``m`` noisy
    copies ``xhat + delta_i`` of every adversarial example; ``adv_only`` attacks
    the base classifier (one zero noise vector) and returns ``xhat``;
    ``standard`` returns the clean batch.
    """
    if ablation == "standard":
        return x, y
    b, d = x.shape
    if ablation == "adv_only":
        base = replace(acfg, m=1, estimator="stochastic")
        return attack.smoothadv_attack_batch(theta, x, y, base, sigma, np.zeros((b, 1, d))), y
    if ablation != "adv_smooth":
        raise ValueError(f"unknown ablation {ablation!r}")
    noise = attack.draw_noise(rng, acfg.m, d, sigma, batch=b)
    xhat = attack.smoothadv_attack_batch(theta, x, y, acfg, sigma, noise)
    return (xhat[:, None, :] + noise).reshape(b * acfg.m, d), np.repeat(y, acfg.m)


def _train_steps(theta: nn.Params, pool: np.ndarray, dataset: Dataset, steps: int, batch_size: int,
                 acfg: AttackConfig, sigma: float, lr: float, rng: np.random.Generator,
                 ablation: str) -> tuple[nn.Params, float]:
    losses = []
    for _ in range(steps):
        batch = rng.choice(pool, size=batch_size, replace=batch_size > pool.size)
        x, y = dataset.take(batch)
        inputs, labels = training_examples(theta, x, y, acfg, sigma, rng, ablation)
        loss, grad = nn.loss_and_param_grad(theta, inputs, labels)
        theta = nn.sgd_step(theta, grad, lr)
        losses.append(loss)
    return theta, float(np.mean(losses)) if losses else float("nan")


def local_train(theta: nn.Params, partition: Partition, dataset: Dataset, acfg: AttackConfig,
                scfg: SmoothingConfig, fcfg: FederationConfig, rng: np.random.Generator,
                ablation: str = "adv_smooth") -> tuple[nn.Params, float]:
    """Run ``local_batches`` SmoothAdv SGD steps on one device's data.

    Returns the new parameters and the mean pre-step loss. Only rows listed
    in ``partition`` are read from ``dataset``.
    """
    return _train_steps(theta, partition.indices, dataset, fcfg.local_batches, fcfg.batch_size,
                        acfg, scfg.sigma, fcfg.outer_lr, rng, ablation)


def aggregate(updates: Sequence[tuple[nn.Params, int]]) -> nn.Params:
    """Data-size weighted average; weights renormalize over the given updates."""
    if not updates:
        raise ValueError("cannot aggregate an empty list of updates")
    total = sum(n for _, n in updates)
    if total <= 0:
        raise ValueError("aggregation weights must have a positive total")
    spec = updates[0][0].spec
    acc = np.zeros(spec.num_params)
    for params, n in updates:
        if params.spec != spec:
            raise ValueError(f"cannot aggregate {params.spec} with {spec}")
        acc += (n / total) * params.values
    return nn.Params(spec, acc)


def central_steps_per_round(fcfg: FederationConfig) -> int:
    """Centralized batches matching the data a federated round consumes."""
    samples = fcfg.clients_per_round * fcfg.local_batches * fcfg.batch_size
    return int(round(samples / fcfg.central_batch_size))


def run_training(dataset: Dataset, spec: nn.NetworkSpec, fcfg: FederationConfig, acfg: AttackConfig,
                 scfg: SmoothingConfig, mode: str = "fed", ablation: str = "adv_smooth",
                 init: nn.Params | None = None, partitions: list[Partition] | None = None,
                 workers: int = 1,
                 on_round: Callable[[RoundRecord, nn.Params], None] | None = None) -> TrainingResult:
    """Train for ``fcfg.rounds`` rounds in federated or centralized mode.

    Every random draw comes from a stream keyed by ``(seed, purpose, round,
    device)``, so results do not depend on ``workers``. Centralized round
    ``t`` uses device 0's stream of round ``t`` on the pooled data.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    if dataset.dim != spec.input_dim:
        raise ConfigError(f"dataset has {dataset.dim} features but the network expects {spec.input_dim}")

    theta = init if init is not None else nn.init_params(spec, fcfg.seed)
    if mode == "fed" and partitions is None:
        partitions = partition_heterogeneous(dataset.labels, fcfg, substream(fcfg.seed, STREAM_PARTITION),
                                             dataset.num_classes)
    estimator = estimator_label(acfg, ablation)
    pool = np.arange(len(dataset))
    records = []

    for t in range(fcfg.rounds):
        start = time.perf_counter()
        if mode == "fed":
            clients = sample_clients(len(partitions), fcfg.participation, t,
                                     substream(fcfg.seed, STREAM_CLIENTS, t))

            def train_client(k, theta=theta, t=t):
                try:
                    return local_train(theta, partitions[k], dataset, acfg, scfg, fcfg,
                                       substream(fcfg.seed, STREAM_LOCAL, t, k), ablation)
                except NumericError as exc:
                    raise exc.with_context(round=t, device=k) from exc

            if workers > 1 and len(clients) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool_exec:
                    results = list(pool_exec.map(train_client, clients))
            else:
                results = [train_client(k) for k in clients]
            theta = aggregate([(p, partitions[k].size) for (p, _), k in zip(results, clients)])
            mean_loss = float(np.mean([loss for _, loss in results]))
        else:
            try:
                theta, mean_loss = _train_steps(theta, pool, dataset, central_steps_per_round(fcfg),
                                                fcfg.central_batch_size, acfg, scfg.sigma, fcfg.outer_lr,
                                                substream(fcfg.seed, STREAM_LOCAL, t, 0), ablation)
            except NumericError as exc:
                raise exc.with_context(round=t) from exc
        record = RoundRecord(t, mode, estimator, mean_loss, time.perf_counter() - start)
        records.append(record)
        log.info("round %d/%d %s loss=%.4f (%.2fs)", t + 1, fcfg.rounds, mode, mean_loss, record.seconds)
        if on_round is not None:
            on_round(record, theta)
    return TrainingResult(theta, records, partitions)


def write_round_log(path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ROUND_LOG_HEADER)
        for r in records:
            writer.writerow([r.round, r.mode, r.estimator, repr(r.mean_loss), repr(r.seconds)])


def read_round_log(path) -> list[RoundRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != ROUND_LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [RoundRecord(int(row["round"]), row["mode"], row["estimator"], float(row["mean_loss"]),
                            float(row["seconds"])) for row in reader]
