"""Langevin-dynamics simulation of noisy training checkpoints.

Verifies, numerically, that the sample variance of a bounded statistic
over k checkpoints of the diffusion dtheta = -grad L dt + sigma*sqrt(2) dW
approaches the statistic's true stationary variance once the first
checkpoint time and the inter-checkpoint gap are past burn-in.

For quadratic losses the diffusion is an Ornstein-Uhlenbeck process and
checkpoints are sampled exactly by chaining OU transitions through the
Markov property; no discretization error enters the comparison. General
smooth strongly convex losses fall back to Euler-Maruyama integration.
Strong convexity m != 1 is normalized away before simulation: running
the unit-curvature process on the sped-up clock m*t with noise scale
sigma/sqrt(m) gives the same law.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .errors import NumericDivergenceError
from .model import DatasetHandle, LossModel, QuadraticLoss

_ORACLE_CHUNK = 100_000


# ---------------------------------------------------------------------------
# bounded statistics


@dataclass(frozen=True)
class Statistic:
    """Named map from a parameter vector to a scalar in [-1, 1].

    The callable must accept a (n, p) batch and return (n,) values;
    evaluate() handles the single-vector case.
    """

    name: str
    batch_fn: Callable[[np.ndarray], np.ndarray]

    def evaluate(self, theta: np.ndarray) -> float:
        return float(self.batch_fn(np.atleast_2d(theta))[0])

    def evaluate_batch(self, thetas: np.ndarray) -> np.ndarray:
        return np.asarray(self.batch_fn(thetas), dtype=np.float64)


def make_clamped_coordinate(theta_star: np.ndarray, coord: int = 0) -> Statistic:
    center = float(np.asarray(theta_star)[coord])

    def fn(batch: np.ndarray) -> np.ndarray:
        return np.clip(batch[:, coord] - center, -1.0, 1.0)

    return Statistic(name=f"clamped_coord{coord}", batch_fn=fn)


def make_sign_coordinate(theta_star: np.ndarray, coord: int = 0) -> Statistic:
    center = float(np.asarray(theta_star)[coord])

    def fn(batch: np.ndarray) -> np.ndarray:
        return np.sign(batch[:, coord] - center)

    return Statistic(name=f"sign_coord{coord}", batch_fn=fn)


def make_clamped_norm_excess(theta_star: np.ndarray) -> Statistic:
    center = np.asarray(theta_star, dtype=np.float64)
    root_p = math.sqrt(center.size)

    def fn(batch: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(batch - center, axis=1)
        return np.clip(norms - root_p, -1.0, 1.0)

    return Statistic(name="clamped_norm_excess", batch_fn=fn)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LDConfig:
    model: LossModel
    theta_start: np.ndarray
    sigma: float = 1.0
    eta: float = 1e-3
    # annotation-only knobs for the burn-in formula on reports
    c_constant: float = 4.0
    delta_target: float = 1e-2

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.c_constant <= 0:
            raise ValueError("c_constant must be positive")
        if not 0.0 < self.delta_target < 1.0:
            raise ValueError("delta_target must be in (0, 1)")
        theta = np.asarray(self.theta_start, dtype=np.float64)
        if theta.ndim != 1 or theta.size == 0:
            raise ValueError("theta_start must be a nonempty 1-d vector")
        object.__setattr__(self, "theta_start", theta)


@dataclass(frozen=True)
class CheckpointTimes:
    t1: float
    gap: float
    k: int

    def __post_init__(self):
        if self.t1 <= 0:
            raise ValueError("t1 must be positive")
        if self.gap <= 0:
            raise ValueError("gap must be positive")
        if self.k < 2:
            raise ValueError("k must be at least 2")

    def times(self) -> list[float]:
        return [self.t1 + i * self.gap for i in range(self.k)]

    def elapsed_segments(self) -> list[float]:
        """Waiting times between consecutive checkpoints, first from t=0."""
        return [self.t1] + [self.gap] * (self.k - 1)


# ---------------------------------------------------------------------------
# integrators


def em_step(
    theta: np.ndarray,
    model: LossModel,
    eta: float,
    sigma: float,
    gen: np.random.Generator,
    data: Optional[DatasetHandle] = None,
) -> np.ndarray:
    """One Euler-Maruyama step with injected noise N(0, 2*eta*sigma^2 I).

    eta touches both drift and noise so eta=0 is the identity. sigma=0
    degenerates to plain gradient descent.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0.0:
        return theta.copy()
    drift = theta - eta * model.grad_full(theta, data)
    if sigma > 0:
        drift = drift + math.sqrt(2.0 * eta) * sigma * gen.standard_normal(theta.size)
    if not np.all(np.isfinite(drift)):
        raise NumericDivergenceError("Langevin state became non-finite")
    return drift


def ou_exact_sample(
    theta_star: np.ndarray,
    sigma: float,
    theta_t: np.ndarray,
    elapsed: float,
    gen: np.random.Generator,
) -> np.ndarray:
    """Exact unit-curvature OU transition over the given elapsed time.

    Draws from N(theta* + exp(-s)(theta_t - theta*), sigma^2 (1-exp(-2s)) I).
    s=0 returns theta_t unchanged.
    """
    if elapsed < 0:
        raise ValueError("elapsed time must be nonnegative")
    if elapsed == 0.0:
        return theta_t.copy()
    decay = math.exp(-elapsed)
    std = sigma * math.sqrt(-math.expm1(-2.0 * elapsed))
    mean = theta_star + decay * (theta_t - theta_star)
    return mean + std * gen.standard_normal(theta_t.size)


def _em_segment(
    theta: np.ndarray,
    model: LossModel,
    data: Optional[DatasetHandle],
    strong_convexity: float,
    sigma_eff: float,
    eta_target: float,
    elapsed_norm: float,
    gen: np.random.Generator,
) -> np.ndarray:
    """Integrate the normalized (unit-curvature-clock) dynamics over a segment.

    The drift is grad L / m so the process matches the m-rescaled diffusion;
    the step count is chosen to land on the segment end exactly.
    """
    steps = max(1, math.ceil(elapsed_norm / eta_target))
    eta = elapsed_norm / steps
    scale = math.sqrt(2.0 * eta) * sigma_eff
    for _ in range(steps):
        grad = model.grad_full(theta, data) / strong_convexity
        theta = theta - eta * grad + scale * gen.standard_normal(theta.size)
        if not np.all(np.isfinite(theta)):
            raise NumericDivergenceError("Langevin state became non-finite")
    return theta


# ---------------------------------------------------------------------------
# estimator and oracle


def sample_variance(values: Sequence[float]) -> float:
    """Unbiased (k-1 denominator) sample variance."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("sample variance needs at least two values")
    return float(np.var(arr, ddof=1))


def stationary_oracle_V(
    theta_star: np.ndarray,
    sigma: float,
    statistic: Statistic,
    samples: int,
    gen: Optional[np.random.Generator] = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo Var[f(theta)] under the stationary law N(theta*, sigma^2 I).

    Returns (estimate, standard error); the SE comes from the large-sample
    variance of a sample variance, (m4 - v^2) / n.
    """
    if samples < 100_000:
        raise ValueError("oracle needs at least 1e5 samples")
    center = np.asarray(theta_star, dtype=np.float64)
    if gen is None:
        gen = rng.step_generator(seed, rng.STREAM_ORACLE, 0)
    values = np.empty(samples, dtype=np.float64)
    done = 0
    while done < samples:
        count = min(_ORACLE_CHUNK, samples - done)
        draws = center + sigma * gen.standard_normal((count, center.size))
        values[done : done + count] = statistic.evaluate_batch(draws)
        done += count
    v = float(np.var(values, ddof=1))
    centered = values - values.mean()
    m4 = float(np.mean(centered**4))
    se = math.sqrt(max(0.0, m4 - v * v) / samples)
    return v, se


# ---------------------------------------------------------------------------
# the bias experiment


@dataclass(frozen=True)
class VarianceBiasReport:
    times: CheckpointTimes
    statistic: str
    trials: int
    mean_s: float
    se_mean_s: float
    oracle_v: float
    oracle_se: float
    burn_in_bound: float

    @property
    def abs_bias(self) -> float:
        return abs(self.mean_s - self.oracle_v)

    @property
    def combined_se(self) -> float:
        return math.sqrt(self.se_mean_s**2 + self.oracle_se**2)


def _quadratic_center(model: LossModel, data: Optional[DatasetHandle]) -> np.ndarray:
    if isinstance(model, QuadraticLoss):
        return model.center.copy()
    # smooth strongly convex fallback: locate the minimizer by gradient descent
    if model.strong_convexity <= 0 or model.smoothness <= 0:
        raise ValueError("model must be strongly convex and smooth")
    theta = np.zeros(model.param_dim(), dtype=np.float64)
    step = 1.0 / model.smoothness
    for _ in range(200_000):
        grad = model.grad_full(theta, data)
        nxt = theta - step * grad
        if np.linalg.norm(nxt - theta) < 1e-12:
            return nxt
        theta = nxt
    raise RuntimeError("minimizer search did not converge")


def variance_bias_experiment(
    config: LDConfig,
    times: CheckpointTimes,
    statistic: Statistic,
    trials: int,
    experiment_seed: int = 0,
    oracle_samples: int = 1_000_000,
    data: Optional[DatasetHandle] = None,
) -> VarianceBiasReport:
    """Bias of the checkpoint sample-variance estimator vs the true variance.

    Each trial runs one trajectory from config.theta_start, reads the
    statistic at the k checkpoint times, and takes the sample variance S.
    Trial j draws all its randomness from a generator keyed by
    (experiment_seed, trial j), so trials are independent and the whole
    experiment replays bit-for-bit. Quadratic losses use exact OU
    transitions; other losses are integrated by Euler-Maruyama at
    config.eta on the curvature-normalized clock.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    model = config.model
    m = model.strong_convexity
    if m <= 0:
        raise ValueError("model must be strongly convex")
    center = _quadratic_center(model, data)
    if center.size != config.theta_start.size:
        raise ValueError("theta_start dimension does not match the model")
    sigma_eff = config.sigma / math.sqrt(m)
    segments = [m * s for s in times.elapsed_segments()]
    exact = isinstance(model, QuadraticLoss)

    s_values = np.empty(trials, dtype=np.float64)
    vals = np.empty(times.k, dtype=np.float64)
    for j in range(trials):
        gen = rng.step_generator(experiment_seed, rng.STREAM_TRIAL, j)
        theta = config.theta_start
        for i, seg in enumerate(segments):
            if exact:
                theta = ou_exact_sample(center, sigma_eff, theta, seg, gen)
            else:
                theta = _em_segment(
                    theta, model, data, m, sigma_eff, config.eta, seg, gen
                )
            vals[i] = statistic.evaluate(theta)
        s_values[j] = np.var(vals, ddof=1)

    mean_s = float(s_values.mean())
    se_mean_s = float(s_values.std(ddof=1) / math.sqrt(trials))
    oracle_v, oracle_se = stationary_oracle_V(
        center, sigma_eff, statistic, oracle_samples, seed=experiment_seed
    )
    dist0sq = float(np.sum((config.theta_start - center) ** 2))
    bound = burn_in_gamma(
        smoothness=model.smoothness / m if model.smoothness > 0 else 1.0,
        dim=center.size,
        dist0sq=dist0sq,
        delta=config.delta_target,
        c=config.c_constant,
    )
    return VarianceBiasReport(
        times=times,
        statistic=statistic.name,
        trials=trials,
        mean_s=mean_s,
        se_mean_s=se_mean_s,
        oracle_v=oracle_v,
        oracle_se=oracle_se,
        burn_in_bound=bound,
    )


def burn_in_gamma(
    smoothness: float, dim: int, dist0sq: float, delta: float, c: float
) -> float:
    """Burn-in time scale sufficient for near-unbiased variance estimation.

    1/(2M) + ln(c M (p + ln(1/delta) + dist0sq)) + c ln(1/delta). The
    constant c is a report annotation, never a gate.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if c <= 0:
        raise ValueError("c must be positive")
    if smoothness <= 0:
        raise ValueError("smoothness must be positive")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if dist0sq < 0:
        raise ValueError("dist0sq must be nonnegative")
    log_inv_delta = math.log(1.0 / delta)
    inner = c * smoothness * (dim + log_inv_delta + dist0sq)
    return 1.0 / (2.0 * smoothness) + math.log(inner) + c * log_inv_delta


# ---------------------------------------------------------------------------
# closed-form lemma checks


def renyi_gaussians_shared_cov(
    mu1: np.ndarray, mu2: np.ndarray, var_scalar: float, alpha: float
) -> float:
    """Renyi divergence of order alpha between N(mu1, v I) and N(mu2, v I)."""
    if var_scalar <= 0:
        raise ValueError("variance must be positive")
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    gap_sq = float(np.sum((np.asarray(mu1) - np.asarray(mu2)) ** 2))
    return alpha * gap_sq / (2.0 * var_scalar)


def expectation_gap_bound(d2: float) -> float:
    """Bound |E_P g - E_Q g| for |g| <= 1 given the order-2 divergence."""
    if d2 < 0:
        raise ValueError("d2 must be nonnegative")
    return math.sqrt(math.expm1(d2))


def subgaussian_tail_check(
    dim: int, x: float, samples: int, seed: int = 0
) -> tuple[float, float, float]:
    """Empirical P(|theta| > sqrt(p) + x) under N(0, I_p) vs exp(-x^2/2).

    Returns (empirical frequency, analytic bound, frequency SE).
    """
    if samples < 100_000:
        raise ValueError("need at least 1e5 samples")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    gen = rng.step_generator(seed, rng.STREAM_ORACLE, 1)
    threshold = math.sqrt(dim) + x
    exceed = 0
    done = 0
    while done < samples:
        count = min(_ORACLE_CHUNK, samples - done)
        draws = gen.standard_normal((count, dim))
        exceed += int(np.count_nonzero(np.linalg.norm(draws, axis=1) > threshold))
        done += count
    empirical = exceed / samples
    bound = math.exp(-0.5 * x * x)
    se = math.sqrt(empirical * (1.0 - empirical) / samples)
    return empirical, bound, se


# ---------------------------------------------------------------------------
# report output


def write_dpld_report(reports: Sequence[VarianceBiasReport], path: str) -> None:
    """One CSV row per experiment setting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "t1",
                "gap",
                "k",
                "trials",
                "mean_S",
                "oracle_V",
                "abs_bias",
                "oracle_SE",
                "burn_in_bound",
            ]
        )
        for r in reports:
            writer.writerow(
                [
                    repr(r.times.t1),
                    repr(r.times.gap),
                    r.times.k,
                    r.trials,
                    repr(r.mean_s),
                    repr(r.oracle_v),
                    repr(r.abs_bias),
                    repr(r.oracle_se),
                    repr(r.burn_in_bound),
                ]
            )
