"""Monte Carlo model of filter contributions in a two-layer network.

Each filter contributes a positive random amount; a layer keeps working as
long as the sum of its surviving contributions stays above a threshold.
The five scenario values compare pruning choices (none, random filter in the
big layer, weakest filter in the big layer, weakest in the small layer,
globally weakest) by the summed probability that both layers survive.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

Z95 = 1.959963984540054
MIN_TRIALS = 1000
# Upper bound on floats drawn per Monte Carlo chunk; chunk layout only
# depends on the model, so results do not depend on the worker count.
CHUNK_ELEMENTS = 1 << 22

SCENARIOS = ("v_o", "v_sr", "v_sl", "v_fl", "v_gl")
# Claimed ordering, weakest first.
ORDER = ("v_fl", "v_gl", "v_sr", "v_sl", "v_o")


class ModelError(ValueError):
    pass


class Family(str, enum.Enum):
    UNIFORM = "uniform-positive"
    LOGNORMAL = "lognormal"
    SHIFTED_EXPONENTIAL = "shifted-exponential"


@dataclass(frozen=True)
class DistributionSpec:
    """A positive-support law for one filter's contribution.

    ``uniform-positive``: uniform on (location, location + scale).
    ``lognormal``: exp(N(location, scale**2)).
    ``shifted-exponential``: location + Exp(mean=scale).
    """

    family: Family
    location: float
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.scale > 0:
            raise ModelError(f"scale must be > 0, got {self.scale}")
        if self.family in (Family.UNIFORM, Family.SHIFTED_EXPONENTIAL) and not self.location > 0:
            raise ModelError(
                f"{self.family.value} needs location > 0 so the support stays inside (0, inf)"
            )

    @property
    def mean(self) -> float:
        if self.family is Family.UNIFORM:
            return self.location + self.scale / 2
        if self.family is Family.LOGNORMAL:
            return math.exp(self.location + self.scale**2 / 2)
        return self.location + self.scale

    @property
    def variance(self) -> float:
        if self.family is Family.UNIFORM:
            return self.scale**2 / 12
        if self.family is Family.LOGNORMAL:
            s2 = self.scale**2
            return math.expm1(s2) * math.exp(2 * self.location + s2)
        return self.scale**2

    @property
    def upper(self) -> float:
        """Supremum of the support (inf for unbounded families)."""
        if self.family is Family.UNIFORM:
            return self.location + self.scale
        return math.inf

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family is Family.UNIFORM:
            u = rng.random(size)
            # rng.random is in [0, 1); mirror to (0, 1] so location is never hit
            return self.location + self.scale * (1.0 - u)
        if self.family is Family.LOGNORMAL:
            return rng.lognormal(self.location, self.scale, size)
        return self.location + rng.exponential(self.scale, size)

    @classmethod
    def parse(cls, text: str) -> "DistributionSpec":
        """Parse ``family:location,scale``, e.g. ``uniform-positive:0.5,1``."""
        try:
            family, params = text.split(":")
            location, scale = (float(p) for p in params.split(","))
        except ValueError:
            raise ModelError(f"cannot parse distribution {text!r}; expected family:location,scale")
        aliases = {"uniform": Family.UNIFORM, "exp": Family.SHIFTED_EXPONENTIAL}
        return cls(aliases.get(family, family), location, scale)


@dataclass(frozen=True)
class ContributionModel:
    m: int
    n: int
    first_dist: DistributionSpec
    second_dist: DistributionSpec
    a: float
    b: float
    corr_pair_fraction: float = 0.0
    corr_strength: float = 0.0
    variance_cap: float | None = None
    mean_floor: float | None = None
    first_mean: float = field(init=False)
    first_variance: float = field(init=False)
    second_mean: float = field(init=False)
    second_variance: float = field(init=False)
    n_corr_pairs: int = field(init=False)

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ModelError(f"need m >= 1 and n >= 1, got m={self.m}, n={self.n}")
        if not 0.0 <= self.corr_pair_fraction <= 1.0:
            raise ModelError("corr_pair_fraction must lie in [0, 1]")
        if not 0.0 <= self.corr_strength <= 1.0:
            raise ModelError("corr_strength must lie in [0, 1]")
        sd = self.second_dist
        set_ = object.__setattr__
        set_(self, "first_mean", self.first_dist.mean)
        set_(self, "first_variance", self.first_dist.variance)
        set_(self, "second_mean", sd.mean)
        set_(self, "second_variance", sd.variance)
        # tight defaults: the family's own moments
        if self.variance_cap is None:
            set_(self, "variance_cap", sd.variance)
        if self.mean_floor is None:
            set_(self, "mean_floor", sd.mean)
        if not math.isfinite(sd.variance) or sd.variance > self.variance_cap:
            raise ModelError(
                f"second-layer variance {sd.variance:.6g} exceeds variance_cap {self.variance_cap:.6g}"
            )
        if sd.mean < self.mean_floor:
            raise ModelError(
                f"second-layer mean {sd.mean:.6g} is below mean_floor {self.mean_floor:.6g}"
            )
        pairs = math.floor(self.corr_pair_fraction * self.n)
        if 2 * pairs > self.n:
            raise ModelError(
                f"{pairs} disjoint correlated pairs do not fit in n={self.n} filters"
            )
        set_(self, "n_corr_pairs", pairs)

    @property
    def pair_covariance(self) -> float:
        """Covariance inside one correlated pair."""
        return self.corr_strength**2 * self.second_variance

    @property
    def second_sum_variance(self) -> float:
        """Exact variance of the second-layer sum under the pairing scheme."""
        w = self.corr_strength
        paired_var = ((1 - w) ** 2 + w**2) * self.second_variance
        p = self.n_corr_pairs
        return (self.n - 2 * p) * self.second_variance + 2 * p * paired_var + 2 * p * self.pair_covariance


def build_contribution_model(
    m: int,
    n: int,
    second_dist: DistributionSpec | str,
    first_dist: DistributionSpec | str | None = None,
    a: float | None = None,
    b: float | None = None,
    **kwargs,
) -> ContributionModel:
    """Validate and build a model; thresholds default to 0.9 and 0.8 of the expected sums."""
    if isinstance(second_dist, str):
        second_dist = DistributionSpec.parse(second_dist)
    if first_dist is None:
        first_dist = second_dist
    elif isinstance(first_dist, str):
        first_dist = DistributionSpec.parse(first_dist)
    if a is None:
        a = 0.9 * m * first_dist.mean
    if b is None:
        b = 0.8 * n * second_dist.mean
    return ContributionModel(m=m, n=n, first_dist=first_dist, second_dist=second_dist, a=a, b=b, **kwargs)


def _draw(model: ContributionModel, rng: np.random.Generator, trials: int):
    first = model.first_dist.sample(rng, (trials, model.m))
    second = model.second_dist.sample(rng, (trials, model.n))
    p = model.n_corr_pairs
    if p:
        latent = model.second_dist.sample(rng, (trials, p))
        w = model.corr_strength
        # convex mix keeps the marginal mean and positivity
        second[:, 0 : 2 * p : 2] = (1 - w) * second[:, 0 : 2 * p : 2] + w * latent
        second[:, 1 : 2 * p : 2] = (1 - w) * second[:, 1 : 2 * p : 2] + w * latent
    return first, second


def sample_contributions(model: ContributionModel, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One joint draw: (first layer, length m), (second layer, length n)."""
    first, second = _draw(model, np.random.default_rng(rng_seed), 1)
    return first[0], second[0]


def sample_batch(model: ContributionModel, trials: int, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``trials`` independent joint draws as (trials, m) and (trials, n) arrays."""
    return _draw(model, np.random.default_rng(rng_seed), trials)


def _chunks(model: ContributionModel, trials: int) -> list[tuple[int, int]]:
    per = max(1, CHUNK_ELEMENTS // (model.m + model.n))
    return [(start, min(per, trials - start)) for start in range(0, trials, per)]


def _chunk_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _map_chunks(fn, model, trials, seed, workers):
    jobs = [(i, size) for i, (_, size) in enumerate(_chunks(model, trials))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda job: fn(_chunk_rng(seed, job[0]), job[1]), jobs))
    else:
        parts = [fn(_chunk_rng(seed, i), size) for i, size in jobs]
    # fixed chunk order, independent of scheduling
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def _smallest_k_sum(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x.min(axis=1)
    return np.partition(x, k - 1, axis=1)[:, :k].sum(axis=1)


def _random_k_sum(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    rows = np.arange(x.shape[0])
    if k == 1:
        return x[rows, rng.integers(0, x.shape[1], x.shape[0])]
    picks = np.argpartition(rng.random(x.shape), k - 1, axis=1)[:, :k]
    return x[rows[:, None], picks].sum(axis=1)


@dataclass(frozen=True)
class ScenarioEstimates:
    v_o: float
    v_sr: float
    v_sl: float
    v_fl: float
    v_gl: float
    half_widths: dict[str, float]
    trials: int
    seed: int
    # single-layer survival probabilities behind the scenarios
    components: dict[str, float] = field(default_factory=dict)
    component_half_widths: dict[str, float] = field(default_factory=dict)
    drop_k: int = 1

    @property
    def half_width(self) -> float:
        """Largest 95% half-width among the five scenario values."""
        return max(self.half_widths.values())

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in SCENARIOS}


def _mean_hw(x: np.ndarray) -> tuple[float, float]:
    mean = float(x.mean())
    if x.size < 2:
        return mean, math.inf
    return mean, Z95 * float(x.std(ddof=1)) / math.sqrt(x.size)


def estimate_scenarios(
    model: ContributionModel,
    trials: int,
    seed: int,
    drop_k: int = 1,
    workers: int = 1,
) -> ScenarioEstimates:
    """Estimate v_o, v_sr, v_sl, v_fl, v_gl with common random numbers.

    ``drop_k`` removes k filters instead of one; ``v_gl`` then mixes the
    two "k weakest in one layer" cases with the same m/(m+n), n/(m+n)
    weights.
    """
    if trials < MIN_TRIALS:
        raise ModelError(f"trials must be at least {MIN_TRIALS}, got {trials}")
    if not 1 <= drop_k <= min(model.m, model.n):
        raise ModelError(f"drop_k must lie in [1, min(m, n)], got {drop_k}")
    a, b = model.a, model.b

    def run(rng, size):
        first, second = _draw(model, rng, size)
        sx = first.sum(axis=1)
        sy = second.sum(axis=1)
        return {
            "first_full": sx >= a,
            "first_drop_min": sx - _smallest_k_sum(first, drop_k) >= a,
            "second_full": sy >= b,
            "second_drop_random": sy - _random_k_sum(second, drop_k, rng) >= b,
            "second_drop_min": sy - _smallest_k_sum(second, drop_k) >= b,
        }

    ind = {k: v.astype(np.float64) for k, v in _map_chunks(run, model, trials, seed, workers).items()}
    w_first = model.m / (model.m + model.n)
    w_second = model.n / (model.m + model.n)
    a0, a1 = ind["first_full"], ind["first_drop_min"]
    b0, b_sr, b_sl = ind["second_full"], ind["second_drop_random"], ind["second_drop_min"]
    per_trial = {
        "v_o": a0 + b0,
        "v_sr": a0 + b_sr,
        "v_sl": a0 + b_sl,
        "v_fl": a1 + b0,
        # written as a deficit from v_o so equal indicators give v_o exactly
        "v_gl": (a0 + b0) - w_first * (a0 - a1) - w_second * (b0 - b_sl),
    }
    means, hws = {}, {}
    for name, x in per_trial.items():
        means[name], hws[name] = _mean_hw(x)
    comps, comp_hws = {}, {}
    for name, x in ind.items():
        comps[name], comp_hws[name] = _mean_hw(x)
    return ScenarioEstimates(
        **means,
        half_widths=hws,
        trials=trials,
        seed=seed,
        components=comps,
        component_half_widths=comp_hws,
        drop_k=drop_k,
    )


@dataclass(frozen=True)
class PairCheck:
    lower: str
    upper: str
    margin: float  # upper - lower
    slack: float
    holds: bool


@dataclass(frozen=True)
class OrderingReport:
    pairs: list[PairCheck]
    # P(drop random) <= P(drop weakest) <= P(no drop) for the big layer
    chain: list[PairCheck]

    @property
    def holds(self) -> bool:
        return all(p.holds for p in self.pairs)

    @property
    def violations(self) -> list[tuple[str, str]]:
        return [(p.lower, p.upper) for p in self.pairs if not p.holds]


def _pair(values, hws, lower, upper, slack):
    margin = values[upper] - values[lower]
    s = hws.get(lower, 0.0) + hws.get(upper, 0.0) if slack is None else slack
    return PairCheck(lower, upper, margin, s, margin >= -s)


def check_ordering(estimates: ScenarioEstimates, slack: float | None = None) -> OrderingReport:
    """Check v_fl <= v_gl <= v_sr <= v_sl <= v_o.

    With ``slack=None`` each adjacent pair may be violated by at most the
    sum of the two 95% half-widths.
    """
    values = estimates.values()
    pairs = [_pair(values, estimates.half_widths, lo, hi, slack) for lo, hi in zip(ORDER, ORDER[1:])]
    chain = []
    comps = estimates.components
    if {"second_drop_random", "second_drop_min", "second_full"} <= comps.keys():
        names = ("second_drop_random", "second_drop_min", "second_full")
        chain = [
            _pair(comps, estimates.component_half_widths, lo, hi, slack)
            for lo, hi in zip(names, names[1:])
        ]
    return OrderingReport(pairs, chain)


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    n: int
    trials: int
    empirical_lhs: float
    standard_error: float
    chebyshev_rhs: float
    satisfied: bool


def chebyshev_rhs(model: ContributionModel, epsilon: float) -> float:
    return model.variance_cap * (1 + model.corr_pair_fraction) / (epsilon**2 * model.n)


def _deviation_run(model: ContributionModel, epsilon: float, b: float):
    mu = model.second_mean

    def run(rng, size):
        _, second = _draw(model, rng, size)
        sy = second.sum(axis=1)
        return {
            "deviates": np.abs(sy / model.n - mu) >= epsilon,
            "sum_exceeds_b": sy > b,
            "sum_minus_min_exceeds_b": sy - second.min(axis=1) > b,
        }

    return run


def chebyshev_bound_check(
    model: ContributionModel,
    epsilon: float,
    trials: int,
    seed: int,
    slack_se: float = 3.0,
    workers: int = 1,
) -> BoundReport:
    """Estimate P(|mean(eta) - E eta| >= epsilon) and compare with C1 (1 + C2) / (epsilon^2 n)."""
    if not epsilon > 0:
        raise ModelError(f"epsilon must be > 0, got {epsilon}")
    if trials < 1:
        raise ModelError("trials must be >= 1")
    ind = _map_chunks(_deviation_run(model, epsilon, model.b), model, trials, seed, workers)
    p = float(ind["deviates"].mean())
    se = math.sqrt(p * (1 - p) / trials)
    rhs = chebyshev_rhs(model, epsilon)
    return BoundReport(epsilon, model.n, trials, p, se, rhs, p <= rhs + slack_se * se)


@dataclass(frozen=True)
class SweepRow:
    n: int
    empirical_lhs: float
    standard_error: float
    chebyshev_rhs: float
    p_sum_exceeds_b: float
    p_sum_minus_min_exceeds_b: float
    large_enough: bool  # n > 2 b / mean_floor


def convergence_sweep(
    template: ContributionModel,
    n_values: Sequence[int],
    epsilon: float,
    trials: int,
    seed: int,
    workers: int = 1,
) -> list[SweepRow]:
    """Deviation probability and survival probabilities as n grows, b fixed."""
    if not n_values:
        raise ModelError("n_values is empty")
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ModelError("n_values must be strictly increasing")
    if not epsilon > 0:
        raise ModelError(f"epsilon must be > 0, got {epsilon}")
    rows = []
    for n in n_values:
        model = replace(template, n=n)
        ind = _map_chunks(_deviation_run(model, epsilon, model.b), model, trials, seed, workers)
        p = float(ind["deviates"].mean())
        rows.append(
            SweepRow(
                n=n,
                empirical_lhs=p,
                standard_error=math.sqrt(p * (1 - p) / trials),
                chebyshev_rhs=chebyshev_rhs(model, epsilon),
                p_sum_exceeds_b=float(ind["sum_exceeds_b"].mean()),
                p_sum_minus_min_exceeds_b=float(ind["sum_minus_min_exceeds_b"].mean()),
                large_enough=n > 2 * model.b / model.mean_floor,
            )
        )
    return rows
