"""Monte-Carlo randomized smoothing: prediction, certification, radius."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln
from scipy.stats import binomtest

from fedsmooth import nn

ForwardFn = Callable[[np.ndarray], np.ndarray]

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)

# Acklam's rational approximation, relative error about 1.15e-9 before refinement
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    m: int = 2
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not 1 <= self.n0 <= self.n:
            raise ValueError(f"need 1 <= n0 <= n, got n0={self.n0}, n={self.n}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class CertificationOutcome:
    """Result of certifying one input. ``label`` is None on abstention."""

    label: int | None
    radius: float
    top_count: int
    pa_lower: float
    n_used: int

    @property
    def certified(self) -> bool:
        return self.label is not None


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def _acklam_lower(q: float) -> float:
    # q in (0, 0.5]
    if q < _P_LOW:
        t = math.sqrt(-2.0 * math.log(q))
        num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
        den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0
        return num / den
    r = q - 0.5
    s = r * r
    num = (((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * r
    den = ((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0
    return num / den


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile: rational approximation plus one Newton step."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"inv_norm_cdf needs p in (0, 1), got {p}")
    # 1 - p is exact for p >= 0.5, so work in the lower tail and reflect
    upper = p > 0.5
    q = 1.0 - p if upper else p
    z = _acklam_lower(q)
    err = norm_cdf(z) - q
    z -= err * _SQRT2PI * math.exp(0.5 * z * z)
    return -z if upper else z


def certified_radius(pa: float, pb: float, sigma: float) -> float:
    """l2 radius within which the smoothed prediction cannot change."""
    if pa < pb:
        raise ValueError(f"pa must be >= pb, got pa={pa}, pb={pb}")
    if pa == pb:
        return 0.0
    return 0.5 * sigma * (inv_norm_cdf(pa) - inv_norm_cdf(pb))


def _log_binom_sf(log_coef: np.ndarray, j: np.ndarray, n: int, p: float) -> float:
    """log P(X >= k) for X ~ Binomial(n, p); ``j`` runs over k..n."""
    log_terms = log_coef + j * math.log(p) + (n - j) * math.log1p(-p)
    top = log_terms.max()
    return float(top + math.log(np.exp(log_terms - top).sum()))


def clopper_pearson_lower(k: int, n: int, alpha: float, tol: float = 1e-12) -> float:
    """One-sided (1 - alpha) lower confidence bound on a binomial proportion.

    Solves P(Binomial(n, p) >= k) = alpha for p by bisection.
    """
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    target = math.log(alpha)
    j = np.arange(k, n + 1, dtype=np.float64)
    log_coef = gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)
    lo, hi = 0.0, k / n
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= 0.0 or _log_binom_sf(log_coef, j, n, mid) < target:
            lo = mid
        else:
            hi = mid
    return lo


def base_classifier(params: nn.Params) -> ForwardFn:
    """Scores of the network; their argmax is the hard prediction."""
    return lambda inputs: nn.logits(params, inputs)


def mc_counts(forward_fn: ForwardFn, x, sigma: float, n: int, rng: np.random.Generator,
              batch_size: int = 1000, num_classes: int | None = None) -> np.ndarray:
    """Class histogram of hard predictions on ``n`` Gaussian corruptions of ``x``.

    Corrupted inputs are not clipped to the data box.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(num_classes or 0, dtype=np.int64)
    remaining = n
    while remaining > 0:
        size = min(batch_size, remaining)
        remaining -= size
        batch = x + sigma * rng.standard_normal((size, x.size))
        scores = np.asarray(forward_fn(batch))
        preds = np.argmax(scores, axis=1)
        hist = np.bincount(preds, minlength=scores.shape[1])
        if counts.size < hist.size:
            counts = np.pad(counts, (0, hist.size - counts.size))
        counts += hist
    return counts


def _top_two(counts: np.ndarray) -> tuple[int, int]:
    order = np.argsort(-counts, kind="stable")
    return int(order[0]), int(order[1]) if order.size > 1 else -1


def predict(forward_fn: ForwardFn, x, cfg: SmoothingConfig, rng: np.random.Generator) -> int | None:
    """Smoothed prediction, or None when the top class is not significant."""
    counts = mc_counts(forward_fn, x, cfg.sigma, cfg.n, rng)
    top, runner = _top_two(counts)
    count_a = int(counts[top])
    count_b = int(counts[runner]) if runner >= 0 else 0
    if binomtest(count_a, count_a + count_b, 0.5).pvalue > cfg.alpha:
        return None
    return top


def certify(forward_fn: ForwardFn, x, cfg: SmoothingConfig, rng: np.random.Generator) -> CertificationOutcome:
    selection = mc_counts(forward_fn, x, cfg.sigma, cfg.n0, rng)
    candidate, _ = _top_two(selection)
    counts = mc_counts(forward_fn, x, cfg.sigma, cfg.n, rng, num_classes=selection.size)
    k = int(counts[candidate]) if candidate < counts.size else 0
    pa_lower = clopper_pearson_lower(k, cfg.n, cfg.alpha)
    if pa_lower > 0.5:
        radius = certified_radius(pa_lower, 1.0 - pa_lower, cfg.sigma)
        return CertificationOutcome(candidate, radius, k, pa_lower, cfg.n)
    return CertificationOutcome(None, 0.0, k, pa_lower, cfg.n)
