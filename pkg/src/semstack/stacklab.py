"""Stacking statistics: pooling, the conjugate Gaussian update and the pairwise bound.

Everything here runs in float64; these functions serve as correctness oracles
for the training-side approximation, which replaces the pooled estimate by a
distance between two stack members.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import Rng


@dataclass
class FeatureStack:
    items: list[np.ndarray]
    pooled: np.ndarray | None = None

    def __post_init__(self):
        if not self.items:
            raise ValueError("a feature stack needs at least one item")
        self.items = [np.asarray(t, dtype=np.float64) for t in self.items]
        shape = self.items[0].shape
        if any(t.shape != shape for t in self.items):
            raise ValueError("all stack items must share one shape")

    @property
    def n(self) -> int:
        return len(self.items)

    def array(self) -> np.ndarray:
        return np.stack(self.items)

    @property
    def sample_mean(self) -> np.ndarray:
        return self.array().mean(axis=0)

    @property
    def sample_std(self) -> np.ndarray:
        # ddof=1 needs two items; a single item has no spread estimate
        return self.array().std(axis=0, ddof=1) if self.n > 1 else np.zeros_like(self.items[0])


@dataclass(frozen=True)
class GaussianPrior:
    t0: np.ndarray
    sigma0: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma > 0):
            raise ValueError("sigma0 and sigma must be positive")
        object.__setattr__(self, "t0", np.asarray(self.t0, dtype=np.float64))


def pool_stack(stack: FeatureStack | Sequence[np.ndarray], method: str = "mean") -> np.ndarray:
    if not isinstance(stack, FeatureStack):
        stack = FeatureStack(list(stack))
    arr = stack.array()
    if method == "mean":
        pooled = arr.mean(axis=0)
    elif method == "median":
        pooled = np.median(arr, axis=0)
    else:
        raise ValueError(f"unknown pooling method {method!r}")
    stack.pooled = pooled
    return pooled


def bayes_update(prior: GaussianPrior, observations: Sequence[np.ndarray]) -> tuple[np.ndarray, float]:
    """Posterior mean and variance of the pooled estimate after ``n`` observations."""
    obs = [np.asarray(o, dtype=np.float64) for o in observations]
    for o in obs:
        if o.shape != prior.t0.shape:
            raise ValueError(f"observation shape {o.shape} != prior shape {prior.t0.shape}")
    n = len(obs)
    s2, s02 = prior.sigma ** 2, prior.sigma0 ** 2
    total = np.sum(obs, axis=0) if obs else np.zeros_like(prior.t0)
    denom = s2 + n * s02
    return (s2 * prior.t0 + s02 * total) / denom, s2 * s02 / denom


def sequential_update(prior: GaussianPrior, observations: Sequence[np.ndarray]) -> tuple[np.ndarray, float]:
    """Apply the one-observation update repeatedly, feeding each posterior back as the prior."""
    mean, var = prior.t0, prior.sigma0 ** 2
    for o in observations:
        mean, var = bayes_update(GaussianPrior(mean, np.sqrt(var), prior.sigma), [o])
    return mean, var


@dataclass
class StackingRow:
    n: int
    sigma: float
    trials: int
    empirical_std: float
    predicted_std: float

    @property
    def ratio(self) -> float:
        return self.empirical_std / self.predicted_std


def stacking_law_mc(sigma: float, n_values: Sequence[int], trials: int, rng: Rng,
                    shrink_by_sqrt_n: bool = True) -> list[StackingRow]:
    """Empirical spread of the mean-pooled estimate of ``n`` draws from N(0, sigma).

    ``shrink_by_sqrt_n=False`` predicts ``sigma`` for every ``n``; it exists only
    as a negative control for the verification command.
    """
    if trials < 1000:
        raise ValueError("stacking Monte Carlo needs at least 1000 trials")
    rows = []
    for n in n_values:
        draws = rng.child(int(n)).generator().normal(0.0, sigma, size=(trials, n))
        pooled = draws.mean(axis=1)
        predicted = sigma / np.sqrt(n) if shrink_by_sqrt_n else sigma
        rows.append(StackingRow(int(n), float(sigma), trials, float(pooled.std(ddof=1)), float(predicted)))
    return rows


@dataclass
class BoundResult:
    lhs: float
    rhs: float
    holds: bool


def bound_check(stack: FeatureStack, prior: GaussianPrior, i: int) -> BoundResult:
    """L1 distance from member ``i`` to the posterior mean vs. its weighted pairwise bound."""
    n = stack.n
    if not 0 <= i < n:
        raise IndexError(f"member index {i} out of range for a stack of {n}")
    mean, _ = bayes_update(prior, stack.items)
    ti = stack.items[i]
    s2, s02 = prior.sigma ** 2, prior.sigma0 ** 2
    denom = s2 + n * s02
    lhs = float(np.abs(ti - mean).sum())
    pair = sum(float(np.abs(ti - tj).sum()) for j, tj in enumerate(stack.items) if j != i)
    rhs = s2 / denom * float(np.abs(ti - prior.t0).sum()) + s02 / denom * pair
    return BoundResult(lhs, rhs, lhs <= rhs + 1e-9)


@dataclass
class BoundSummary:
    instances: int
    violations: int
    max_gap: float  # largest lhs - rhs seen (negative when the bound always has slack)
    failures: list[tuple[int, BoundResult]] = field(default_factory=list)


def random_bound_trials(rng: Rng, instances: int = 1000, n_values: Sequence[int] = (2, 4, 8),
                        shape: tuple[int, ...] = (8,)) -> BoundSummary:
    """Random Gaussian stacks with random noise/prior scales, checked at a random member."""
    gen = rng.generator()
    violations, max_gap, failures = 0, -np.inf, []
    for k in range(instances):
        n = int(gen.choice(n_values))
        sigma, sigma0 = gen.uniform(0.1, 3.0), gen.uniform(0.1, 3.0)
        truth = gen.normal(0.0, 1.0, size=shape)
        stack = FeatureStack([truth + gen.normal(0.0, sigma, size=shape) for _ in range(n)])
        prior = GaussianPrior(gen.normal(0.0, 1.0, size=shape), sigma0, sigma)
        res = bound_check(stack, prior, int(gen.integers(0, n)))
        max_gap = max(max_gap, res.lhs - res.rhs)
        if not res.holds:
            violations += 1
            failures.append((k, res))
    return BoundSummary(instances, violations, float(max_gap), failures)
