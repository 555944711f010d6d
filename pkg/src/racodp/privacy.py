"""Privacy mechanisms and the closed-form accountant.

Noise scales follow the mechanism definitions: the histogram receives
i.i.d. Laplace noise of scale ``b`` and the summed clipped gradient receives
i.i.d. Gaussian noise of standard deviation ``sigma``. ``b = inf`` (or
``None``) and ``sigma = 0`` switch the respective noise off, which is how
non-private reference runs are expressed.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np

from .model import soft_predict

PURPOSES = {"sample": 0, "histogram": 1, "gradient": 2}


class InfeasibleBudgetError(ValueError):
    """No number of steps satisfies the budget with the given noise."""


class NoiseStream:
    """Seeded source of independent generators per ``(step, purpose)``.

    Each substream is derived from ``SeedSequence(seed, spawn_key=...)`` so
    any draw can be replayed without replaying the ones before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, step: int, purpose: str) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(step), PURPOSES[purpose]))
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"NoiseStream(seed={self.seed})"


@dataclass
class PredictionHistogram:
    """``(Q, K)`` sums of soft predictions per (cell, class)."""

    values: np.ndarray
    noisy: bool = False
    scale: float | None = None

    @property
    def shape(self):
        return self.values.shape


def compute_histogram(data, batch, theta, tau: float = 1.0, softmax_sign: str = "standard") -> PredictionHistogram:
    """Exact histogram of soft predictions over the batch records."""
    idx = np.asarray(getattr(batch, "indices", batch), dtype=np.int64)
    H = np.zeros((data.n_cells, data.n_classes))
    if idx.size:
        probs = soft_predict(theta, data.features[idx], tau, softmax_sign)
        np.add.at(H, data.partition_index[idx], probs)
    return PredictionHistogram(H)


def _noise_off(b) -> bool:
    return b is None or b == math.inf


def privatize_histogram(hist: PredictionHistogram, b, rng: np.random.Generator) -> PredictionHistogram:
    """Add i.i.d. Laplace(scale ``b``) noise to every entry."""
    if _noise_off(b):
        return PredictionHistogram(hist.values.copy(), noisy=False)
    if not b > 0:
        raise ValueError("Laplace scale b must be positive")
    noise = rng.laplace(0.0, b, size=hist.values.shape)
    return PredictionHistogram(hist.values + noise, noisy=True, scale=float(b))


def histogram_sensitivity_check(data, theta, tau: float, trials: int, rng: np.random.Generator,
                                softmax_sign: str = "standard", rate: float = 0.5) -> float:
    """Largest L1 change of the exact histogram over random neighbouring batches.

    Each trial draws a Poisson batch and toggles one random record in or out.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = len(data)
    worst = 0.0
    for _ in range(trials):
        in_batch = rng.random(n) < rate
        base = compute_histogram(data, np.flatnonzero(in_batch), theta, tau, softmax_sign).values
        in_batch[rng.integers(n)] ^= True
        other = compute_histogram(data, np.flatnonzero(in_batch), theta, tau, softmax_sign).values
        worst = max(worst, float(np.abs(base - other).sum()))
    return worst


def clip(g: np.ndarray, bound: float) -> np.ndarray:
    """Scale ``g`` down to L2 norm ``bound`` if it is longer."""
    if bound <= 0:
        raise ValueError("clipping bound must be positive")
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    if norm <= bound:
        return g
    out = g * (bound / norm)
    # rounding can leave the norm an ulp above the bound; shrink until it is not
    while np.linalg.norm(out) > bound:
        out = out * (1.0 - np.finfo(float).eps)
    return out


def clip_rows(G: np.ndarray, bound: float) -> np.ndarray:
    """Row-wise :func:`clip` of an ``(n, m)`` matrix."""
    if bound == math.inf:
        return G
    norms = np.linalg.norm(G, axis=1)
    scale = np.minimum(1.0, bound / np.where(norms > 0, norms, 1.0))
    return G * scale[:, None]


def gaussian_noise(dim, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.zeros(dim)
    return rng.normal(0.0, sigma, size=dim)


# -- accounting ---------------------------------------------------------------
# Natural logarithms throughout.


def _b_requirement(delta, rate, steps):
    """``b * epsilon`` needed by the histogram part of the closed form."""
    return 2.0 * max(1.0, rate * math.sqrt(steps * math.log(steps / delta)))


def _sigma_requirement(delta, rate, steps, clip_norm, n):
    """``sigma * epsilon`` needed by the gradient part of the closed form."""
    log_term = math.log(steps / delta)
    return 10.0 * max(
        clip_norm * log_term / (rate * n),
        clip_norm * math.sqrt(steps) * log_term / n,
    )


def _check(epsilon=1.0, delta=0.5, rate=1.0, steps=1, n=1):
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if not 0 < rate <= 1:
        raise ValueError("sampling rate must be in (0, 1]")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if n < 1:
        raise ValueError("dataset size must be >= 1")


def calibrate_closed_form(epsilon, delta, rate, steps, clip_norm, n):
    """Smallest ``(sigma, b)`` certified ``(epsilon, delta)``-DP after ``steps`` steps.

    >>> s, b = calibrate_closed_form(1.0, 1e-5, 1.0, 1, 1.0, 1000)
    >>> round(s, 4), round(b, 3)
    (0.1151, 6.786)
    """
    _check(epsilon, delta, rate, steps, n)
    sigma = _sigma_requirement(delta, rate, steps, clip_norm, n) / epsilon
    b = _b_requirement(delta, rate, steps) / epsilon
    return sigma, b


def certified_epsilon(delta, rate, steps, sigma, b, clip_norm, n) -> float:
    """Smallest epsilon the closed form certifies for the given noise."""
    _check(delta=delta, rate=rate, steps=steps, n=n)
    if sigma <= 0 or _noise_off(b):
        return math.inf
    return max(
        _sigma_requirement(delta, rate, steps, clip_norm, n) / sigma,
        _b_requirement(delta, rate, steps) / b,
    )


def steps_for_budget(epsilon, delta, rate, sigma, b, clip_norm, n, max_steps: int = 10**9) -> int:
    """Largest ``T`` whose closed-form requirements are met by ``(sigma, b)``.

    Both requirements are nondecreasing in ``T``, so a doubling phase
    followed by bisection finds the boundary. Raises
    ``InfeasibleBudgetError`` when even ``T = 1`` is not covered.
    """
    _check(epsilon, delta, rate, 1, n)

    def ok(T):
        s_min, b_min = calibrate_closed_form(epsilon, delta, rate, T, clip_norm, n)
        return sigma >= s_min and (_noise_off(b) or b >= b_min)

    if not ok(1):
        s_min, b_min = calibrate_closed_form(epsilon, delta, rate, 1, clip_norm, n)
        raise InfeasibleBudgetError(
            f"budget infeasible at T=1: need sigma >= {s_min:.6g} and b >= {b_min:.6g}"
        )
    lo, hi = 1, 2
    while hi <= max_steps and ok(hi):
        lo, hi = hi, hi * 2
    if hi > max_steps:
        if ok(max_steps):
            return max_steps
        hi = max_steps
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


class Accountant(abc.ABC):
    """Maps noise parameters and step counts to certified privacy."""

    @abc.abstractmethod
    def calibrate(self, epsilon, delta, rate, steps, clip_norm, n) -> tuple[float, float]:
        """Minimal ``(sigma, b)`` for the budget."""

    @abc.abstractmethod
    def max_steps(self, epsilon, delta, rate, sigma, b, clip_norm, n) -> int: ...

    @abc.abstractmethod
    def epsilon(self, delta, rate, steps, sigma, b, clip_norm, n) -> float: ...


class ClosedFormAccountant(Accountant):
    """Advanced-composition bound for subsampled Laplace + Gaussian steps."""

    name = "closed-form"

    def calibrate(self, epsilon, delta, rate, steps, clip_norm, n):
        return calibrate_closed_form(epsilon, delta, rate, steps, clip_norm, n)

    def max_steps(self, epsilon, delta, rate, sigma, b, clip_norm, n):
        return steps_for_budget(epsilon, delta, rate, sigma, b, clip_norm, n)

    def epsilon(self, delta, rate, steps, sigma, b, clip_norm, n):
        return certified_epsilon(delta, rate, steps, sigma, b, clip_norm, n)


@dataclass(frozen=True)
class PrivacyConfig:
    """Noise, clipping and sampling parameters of one run.

    ``sigma = 0`` or ``b = inf`` make the run non-private; ``epsilon`` is
    then infinite.
    """

    sigma: float
    b: float
    clip_norm: float
    sampling_rate: float
    steps: int
    delta: float = 1e-5
    epsilon: float = math.inf

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (self.b is None or self.b > 0):
            raise ValueError("b must be positive (inf disables histogram noise)")
        if not self.clip_norm > 0:
            raise ValueError("clip norm must be positive")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling rate must be in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def certified(self) -> bool:
        """Both mechanisms add noise, so the run carries a DP guarantee."""
        return self.sigma > 0 and not _noise_off(self.b)

    @classmethod
    def from_budget(cls, epsilon, delta, sampling_rate, clip_norm, n, steps=None,
                    sigma=None, b=None, accountant: Accountant | None = None) -> "PrivacyConfig":
        """Resolve a budget either from ``steps`` or from ``(sigma, b)``."""
        accountant = accountant or ClosedFormAccountant()
        if steps is not None and sigma is None and b is None:
            sigma, b = accountant.calibrate(epsilon, delta, sampling_rate, steps, clip_norm, n)
        elif steps is None and sigma is not None and b is not None:
            steps = accountant.max_steps(epsilon, delta, sampling_rate, sigma, b, clip_norm, n)
        else:
            raise ValueError("give either steps, or both sigma and b, with a budget")
        return cls(sigma, b, clip_norm, sampling_rate, int(steps), delta, epsilon)

    def certified_epsilon(self, n, steps=None, accountant: Accountant | None = None) -> float:
        accountant = accountant or ClosedFormAccountant()
        return accountant.epsilon(
            self.delta, self.sampling_rate, steps or self.steps, self.sigma, self.b, self.clip_norm, n
        )
