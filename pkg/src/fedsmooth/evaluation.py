"""Certified-accuracy curves over a test set."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedsmooth import nn, smoothing
from fedsmooth.data import Dataset
from fedsmooth.errors import ConfigError
from fedsmooth.federation import substream
from fedsmooth.smoothing import CertificationOutcome, SmoothingConfig

STREAM_CERTIFY = 3
CURVE_HEADER = ("method", "ablation", "estimator", "sigma", "epsilon", "gamma", "radius", "certified_accuracy")


@dataclass(frozen=True)
class CurvePoint:
    radius: float
    certified_accuracy: float


@dataclass(frozen=True)
class CurveRow:
    method: str
    ablation: str
    estimator: str
    sigma: float
    epsilon: float
    gamma: float
    radius: float
    certified_accuracy: float


def radius_grid(stop: float = 1.5, step: float = 0.05) -> list[float]:
    count = int(round(stop / step)) + 1
    return [round(i * step, 10) for i in range(count)]


def certify_dataset(params: nn.Params, dataset: Dataset, scfg: SmoothingConfig, num_points: int | None = None,
                    seed: int = 0, workers: int = 1) -> list[CertificationOutcome]:
    """Certify the first ``num_points`` rows; point ``i`` draws from its own stream."""
    if dataset.dim != params.spec.input_dim:
        raise ConfigError(f"checkpoint expects {params.spec.input_dim} features, test set has {dataset.dim}")
    count = len(dataset) if num_points is None else min(num_points, len(dataset))
    classify = smoothing.base_classifier(params)

    def one(i):
        return smoothing.certify(classify, dataset.features[i], scfg, substream(seed, STREAM_CERTIFY, i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, range(count)))
    return [one(i) for i in range(count)]


def certified_accuracy_curve(outcomes: Sequence[CertificationOutcome], labels, radii: Sequence[float]) -> list[CurvePoint]:
    """Fraction of points certified with the correct label at radius >= r."""
    labels = np.asarray(labels)[: len(outcomes)]
    correct = np.array([o.certified and o.label == y for o, y in zip(outcomes, labels)], dtype=bool)
    radius = np.array([o.radius for o in outcomes])
    n = max(len(outcomes), 1)
    return [CurvePoint(float(r), float(np.sum(correct & (radius >= r)) / n)) for r in radii]


def write_curve_csv(path, rows: Sequence[CurveRow], append: bool = False) -> None:
    exists = append and _nonempty(path)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if not exists:
            writer.writerow(CURVE_HEADER)
        for r in rows:
            writer.writerow([r.method, r.ablation, r.estimator, repr(r.sigma), repr(r.epsilon), repr(r.gamma),
                             repr(r.radius), repr(r.certified_accuracy)])


def read_curve_csv(path) -> list[CurveRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [CurveRow(row["method"], row["ablation"], row["estimator"], float(row["sigma"]),
                         float(row["epsilon"]), float(row["gamma"]), float(row["radius"]),
                         float(row["certified_accuracy"])) for row in reader]


def _nonempty(path) -> bool:
    try:
        with open(path) as f:
            return bool(f.readline())
    except FileNotFoundError:
        return False
