"""l2 PGD against the Gaussian-smoothed classifier.

Two gradient estimators are available for the inner maximization of
``-log [G(x)]_y`` where ``G`` averages the network's probabilities over
Gaussian corruptions:

* ``stochastic``: exact gradient of ``-log mean_i p_y(x + delta_i)`` for a
  fixed noise pack, by backpropagation.
* ``one_point``: the forward-only estimate
  ``mean_i delta_i / sigma**2 * p_y(x + delta_i)`` of the gradient of
  ``[G(x)]_y``; the attack descends along it.

Noise packs are drawn once per example and reused across PGD steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedsmooth import nn
from fedsmooth.errors import NumericError, ShapeError

ESTIMATORS = ("stochastic", "one_point")
_ZERO_GRAD = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.5
    steps: int = 2
    inner_lr: float = 0.01
    estimator: str = "stochastic"
    m: int = 2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.inner_lr > 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")


def pixel_epsilon(value: float) -> float:
    """Budget given on the 0-255 pixel scale, expressed on [0, 1] inputs."""
    return value / 256.0


def draw_noise(rng: np.random.Generator, m: int, dim: int, sigma: float, batch: int | None = None) -> np.ndarray:
    """``(m, dim)`` Gaussian noise pack, or ``(batch, m, dim)`` packs."""
    shape = (m, dim) if batch is None else (batch, m, dim)
    return sigma * rng.standard_normal(shape)


def project_l2_ball(candidate, center, epsilon: float) -> np.ndarray:
    """Project onto the l2 ball around ``center``; rows are projected independently."""
    candidate = np.asarray(candidate, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if candidate.shape != center.shape:
        raise ShapeError(f"candidate {candidate.shape} and center {center.shape} differ")
    diff = candidate - center
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    outside = dist > epsilon
    # pull the target radius in by the rounding slack of center + diff so the
    # stored point never measures farther than epsilon from center
    slack = 2.0 * np.sqrt(diff.shape[-1]) * np.spacing(np.abs(center).max(axis=-1, keepdims=True) + epsilon)
    radius = np.maximum(epsilon - slack, 0.0)
    scale = radius / np.where(outside, dist, 1.0)
    return np.where(outside, center + diff * scale, candidate)


def _check_pack(noise: np.ndarray, dim: int) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[1] != dim or noise.shape[0] < 1:
        raise ShapeError(f"noise pack must have shape (m, {dim}), got {noise.shape}")
    return noise


def stochastic_grads(params: nn.Params, xhat: np.ndarray, y: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Batched stochastic estimator: ``xhat`` (b, d), ``y`` (b,), ``noise`` (b, m, d)."""
    b, m, d = noise.shape
    rows = (xhat[:, None, :] + noise).reshape(b * m, d)
    logp, grads = nn.log_prob_and_input_grads(params, rows, np.repeat(y, m))
    logp = logp.reshape(b, m)
    # softmax over the pack turns sum_i grad p_i / sum_i p_i into a weighted sum
    # of log-prob gradients; no probability is ever exponentiated to zero
    w = np.exp(logp - logp.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = -np.einsum("bm,bmd->bd", w, grads.reshape(b, m, d))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite stochastic gradient")
    return out


def stochastic_grad(params: nn.Params, xhat, y: int, noise) -> np.ndarray:
    """Gradient of ``-log(mean_i p_y(xhat + delta_i))`` w.r.t. ``xhat``, noise held fixed."""
    xhat = np.asarray(xhat, dtype=np.float64)
    noise = _check_pack(noise, xhat.size)
    return stochastic_grads(params, xhat[None, :], np.array([y]), noise[None])[0]


def one_point_estimate(fn: Callable[[np.ndarray], np.ndarray], xhat, noise, sigma: float) -> np.ndarray:
    """``mean_i delta_i / sigma**2 * fn(xhat + delta_i)`` for a scalar-valued ``fn`` on rows."""
    xhat = np.asarray(xhat, dtype=np.float64)
    noise = _check_pack(noise, xhat.size)
    values = np.asarray(fn(xhat + noise), dtype=np.float64).reshape(-1)
    return (noise * values[:, None]).mean(axis=0) / sigma**2


def one_point_grads(params: nn.Params, xhat: np.ndarray, y: np.ndarray, noise: np.ndarray,
                    sigma: float) -> np.ndarray:
    """Batched one-point estimator; forward passes only."""
    b, m, d = noise.shape
    rows = (xhat[:, None, :] + noise).reshape(b * m, d)
    probs = nn.forward(params, rows)[np.arange(b * m), np.repeat(y, m)].reshape(b, m)
    return np.einsum("bm,bmd->bd", probs, noise) / (m * sigma**2)


def one_point_grad(params: nn.Params, xhat, y: int, noise, sigma: float) -> np.ndarray:
    return one_point_estimate(lambda z: nn.forward(params, z)[:, y], xhat, noise, sigma)


def smoothadv_attack_batch(params: nn.Params, x, y, acfg: AttackConfig, sigma: float, noise) -> np.ndarray:
    """PGD on a batch: ``x`` (b, d), ``y`` (b,), ``noise`` (b, m, d).

    Each step moves ``inner_lr`` along the normalized ascent direction of
    ``-log [G(x)]_y``, projects onto the ``epsilon`` ball and clamps to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[0] != x.shape[0] or noise.shape[2] != x.shape[1]:
        raise ShapeError(f"noise {noise.shape} does not match inputs {x.shape}")
    xhat = x.copy()
    for _ in range(acfg.steps):
        if acfg.estimator == "stochastic":
            g = stochastic_grads(params, xhat, y, noise)
        else:
            g = -one_point_grads(params, xhat, y, noise, sigma)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        moving = norm > _ZERO_GRAD
        step = np.where(moving, g / np.where(moving, norm, 1.0), 0.0)
        xhat = xhat + acfg.inner_lr * step
        xhat = np.clip(project_l2_ball(xhat, x, acfg.epsilon), 0.0, 1.0)
    return xhat


def smoothadv_attack(params: nn.Params, x, y: int, acfg: AttackConfig, sigma: float, noise) -> np.ndarray:
    """Adversarial example for one input against the smoothed classifier."""
    x = np.asarray(x, dtype=np.float64)
    noise = _check_pack(noise, x.size)
    return smoothadv_attack_batch(params, x[None, :], np.array([y]), acfg, sigma, noise[None])[0]
