"""Checkpoint aggregation: parameter averages and output ensembles.

Parameter-space methods (EMA with a warm-up coefficient schedule,
uniform past-k / tail averages, polynomial-decay averaging, constant-
beta EMA over accuracy-ranked checkpoints) return a single parameter
vector that is always a convex combination of its inputs. Output-space
methods (prediction averaging, majority vote) combine per-checkpoint
predictions instead. Everything here is post-processing: no function
reads training data, noise state, or the privacy ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .model import DatasetHandle, LossModel, accuracy

if TYPE_CHECKING:
    from .trainer import Checkpoint

VALID_KINDS = ("ema", "upa_k", "upa_tail", "pda", "opa", "omv", "best_k")

# which optional parameters each aggregation kind uses
_KIND_PARAMS = {
    "ema": ("beta",),
    "upa_k": ("k",),
    "upa_tail": ("alpha",),
    "pda": ("gamma",),
    "opa": ("k",),
    "omv": ("k",),
    "best_k": ("k", "beta"),
}


@dataclass(frozen=True)
class AggregationSpec:
    """One aggregation method plus exactly the parameters it needs."""

    kind: str
    k: int | None = None
    alpha: float | None = None
    gamma: float | None = None
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        needed = _KIND_PARAMS[self.kind]
        for name in ("k", "alpha", "gamma", "beta"):
            val = getattr(self, name)
            if name in needed and val is None:
                raise ValueError(f"aggregation {self.kind!r} requires {name}")
            if name not in needed and val is not None:
                raise ValueError(f"aggregation {self.kind!r} does not take {name}")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.beta is not None and not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")

    def label(self) -> str:
        params = _KIND_PARAMS[self.kind]
        if not params:
            return self.kind
        inner = ",".join(f"{name}={getattr(self, name)}" for name in params)
        return f"{self.kind}({inner})"


# ---------------------------------------------------------------------------
# EMA with warm-up


def ema_beta(beta_cap: float, t: int) -> float:
    """Warm-up coefficient min(beta_cap, (1+t)/(10+t)) used at update t."""
    if not 0 < beta_cap <= 1:
        raise ValueError("beta_cap must be in (0, 1]")
    if t < 0:
        raise ValueError("t must be nonnegative")
    return min(beta_cap, (1.0 + t) / (10.0 + t))


@dataclass(frozen=True)
class EmaState:
    current: np.ndarray
    step_count: int
    beta_cap: float


def ema_init(theta0: np.ndarray, beta_cap: float) -> EmaState:
    if not 0 < beta_cap <= 1:
        raise ValueError("beta_cap must be in (0, 1]")
    return EmaState(np.array(theta0, dtype=np.float64), 0, beta_cap)


def ema_update(state: EmaState, theta_t: np.ndarray, t: int) -> EmaState:
    """Fold theta_t into the average; t must advance by exactly 1.

    The scheduled coefficient decays the previous average, so a cold average
    adopts early values quickly (the warm-up term binds) while large beta_cap
    values give long memory late in training.
    """
    if t != state.step_count + 1:
        raise ValueError(f"expected t={state.step_count + 1}, got {t}")
    b = ema_beta(state.beta_cap, t)
    return EmaState(b * state.current + (1.0 - b) * np.asarray(theta_t), t, state.beta_cap)


def ema_over_stream(thetas: Sequence[np.ndarray], beta_cap: float) -> np.ndarray:
    """EMA of a whole stream, seeded with its first element."""
    if len(thetas) < 1:
        raise ValueError("need at least one parameter vector")
    state = ema_init(thetas[0], beta_cap)
    for i, theta in enumerate(thetas[1:], start=1):
        state = ema_update(state, theta, i)
    return state.current


def ema_stream_states(thetas: Sequence[np.ndarray], beta_cap: float) -> list[np.ndarray]:
    """The running EMA value after each element (for per-step reporting)."""
    if len(thetas) < 1:
        raise ValueError("need at least one parameter vector")
    state = ema_init(thetas[0], beta_cap)
    out = [state.current]
    for i, theta in enumerate(thetas[1:], start=1):
        state = ema_update(state, theta, i)
        out.append(state.current)
    return out


# ---------------------------------------------------------------------------
# uniform averages


def upa_past_k(thetas: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Unweighted mean of the last k parameter vectors."""
    if not 1 <= k <= len(thetas):
        raise ValueError(f"k={k} outside [1, {len(thetas)}]")
    return np.mean(np.stack(thetas[len(thetas) - k :]), axis=0)


def upa_tail(
    thetas: Sequence[np.ndarray],
    alpha: float,
    steps: Sequence[int] | None = None,
) -> np.ndarray:
    """Mean of checkpoints with step > floor((1-alpha)*T), T the last step.

    steps defaults to 1..len(thetas); pass explicit step indices when the
    stream was checkpointed at a coarser cadence.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if len(thetas) < 1:
        raise ValueError("need at least one parameter vector")
    if steps is None:
        steps = range(1, len(thetas) + 1)
    steps = list(steps)
    if len(steps) != len(thetas):
        raise ValueError("steps and thetas must align")
    cut = math.floor((1.0 - alpha) * steps[-1])
    tail = [theta for s, theta in zip(steps, thetas) if s > cut]
    if not tail:
        raise ValueError(f"tail is empty for alpha={alpha}")
    return np.mean(np.stack(tail), axis=0)


# ---------------------------------------------------------------------------
# polynomial-decay averaging


@dataclass(frozen=True)
class PdaState:
    current: np.ndarray
    t: int
    gamma: float


def pda_init(theta1: np.ndarray, gamma: float) -> PdaState:
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return PdaState(np.array(theta1, dtype=np.float64), 1, gamma)


def pda_update(state: PdaState, theta_t: np.ndarray, t: int) -> PdaState:
    """avg <- (1 - w) avg + w theta_t with w = (gamma+1)/(t+gamma)."""
    if t != state.t + 1:
        raise ValueError(f"expected t={state.t + 1}, got {t}")
    w = (state.gamma + 1.0) / (t + state.gamma)
    return PdaState((1.0 - w) * state.current + w * np.asarray(theta_t), t, state.gamma)


def pda_over_stream(thetas: Sequence[np.ndarray], gamma: float) -> np.ndarray:
    if len(thetas) < 1:
        raise ValueError("need at least one parameter vector")
    state = pda_init(thetas[0], gamma)
    for i, theta in enumerate(thetas[1:], start=2):
        state = pda_update(state, theta, i)
    return state.current


# ---------------------------------------------------------------------------
# output aggregation


def opa_probs(thetas: Sequence[np.ndarray], model: LossModel, x: np.ndarray) -> np.ndarray:
    """Mean prediction vector over the given parameter vectors."""
    if len(thetas) < 1:
        raise ValueError("need at least one parameter vector")
    return np.mean(np.stack([model.predict(theta, x) for theta in thetas]), axis=0)


def opa(thetas: Sequence[np.ndarray], model: LossModel, x: np.ndarray) -> int:
    """Label of the averaged prediction vector (ties to lowest class)."""
    return int(np.argmax(opa_probs(thetas, model, x)))


def omv(thetas: Sequence[np.ndarray], model: LossModel, x: np.ndarray) -> int:
    """Majority vote over per-checkpoint labels (ties to lowest class)."""
    if len(thetas) < 1:
        raise ValueError("need at least one parameter vector")
    labels = [int(np.argmax(model.predict(theta, x))) for theta in thetas]
    counts = np.bincount(labels)
    return int(np.argmax(counts))


def opa_batch_labels(
    thetas: Sequence[np.ndarray], model: LossModel, features: np.ndarray
) -> np.ndarray:
    """opa() over many inputs at once."""
    mean_probs = np.mean(
        np.stack([model.predict_proba(theta, features) for theta in thetas]), axis=0
    )
    return mean_probs.argmax(axis=1)


def omv_batch_labels(
    thetas: Sequence[np.ndarray], model: LossModel, features: np.ndarray
) -> np.ndarray:
    """omv() over many inputs at once."""
    probs = np.stack([model.predict_proba(theta, features) for theta in thetas])
    labels = probs.argmax(axis=2)  # (k, n)
    num_classes = probs.shape[2]
    onehot = np.zeros((labels.shape[1], num_classes), dtype=np.int64)
    for row in labels:
        onehot[np.arange(labels.shape[1]), row] += 1
    return onehot.argmax(axis=1)


# ---------------------------------------------------------------------------
# data-dependent selection


def select_best_k(
    checkpoints: Sequence["Checkpoint"],
    model: LossModel,
    heldout: DatasetHandle,
    k: int,
    train_tag: str | None = None,
) -> list["Checkpoint"]:
    """The k checkpoints scoring best on heldout data, best first.

    Accuracy ties resolve toward the earlier step. heldout must not be
    the training partition; when the caller passes the training tag this
    is asserted against the heldout tag.
    """
    if not 1 <= k <= len(checkpoints):
        raise ValueError(f"k={k} outside [1, {len(checkpoints)}]")
    if train_tag is not None and train_tag == heldout.tag:
        raise ValueError("heldout partition carries the training tag; must be disjoint")
    scored = [
        (-accuracy(model, c.params, heldout), c.step, i)
        for i, c in enumerate(checkpoints)
    ]
    scored.sort()
    return [checkpoints[i] for _, _, i in scored[:k]]


def ema_over_best_k(ranked: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """Constant-beta EMA over checkpoints already ranked best-to-worst.

    beta decays the running average, matching ema_update's orientation; no
    warm-up schedule here because the fold is over a fixed short list.
    """
    if len(ranked) < 1:
        raise ValueError("need at least one parameter vector")
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    current = np.array(ranked[0], dtype=np.float64)
    for theta in ranked[1:]:
        current = beta * current + (1.0 - beta) * np.asarray(theta)
    return current
