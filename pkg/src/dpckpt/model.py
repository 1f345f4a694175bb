"""Datasets, loss models, and prediction heads.

Three loss families are supported: a quadratic bowl (used by the
Langevin experiments and as an analytically tractable trainer target),
l2-regularized logistic regression (binary sigmoid or multiclass
softmax), and a small one-hidden-layer tanh network for qualitative
experiments. All parameters are flat float64 vectors so the trainer and
the aggregation operators never need to know the model structure.
"""

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericOverflowError

# ---------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class DatasetHandle:
    """A fixed design matrix with integer class labels.

    The tag names the partition an instance came from ("train", "test",
    a diurnal source, ...); operators that require disjoint partitions
    compare tags rather than contents.
    """

    features: np.ndarray  # (n, p) float64
    labels: np.ndarray  # (n,) integer class ids
    num_classes: int
    tag: str = ""
    _fingerprint: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-d array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be 1-d with one entry per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def fingerprint(self) -> str:
        """Content hash, used to key caches of per-dataset computations."""
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(str(self.features.shape).encode())
            h.update(np.ascontiguousarray(self.features).tobytes())
            h.update(np.ascontiguousarray(self.labels).tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    def subset(self, indices: np.ndarray, tag: str | None = None) -> "DatasetHandle":
        return DatasetHandle(
            self.features[indices],
            self.labels[indices],
            self.num_classes,
            tag if tag is not None else self.tag,
        )


def synth_classification(
    n: int,
    p: int,
    num_classes: int = 2,
    separation: float = 2.0,
    seed: int = 0,
    tag: str = "",
) -> DatasetHandle:
    """Gaussian class clusters with unit within-class covariance.

    Class means sit at distance `separation` from the origin in random
    directions; labels are balanced up to rounding. Everything is a
    deterministic function of the seed.
    """
    if n < 1 or p < 1 or num_classes < 2:
        raise ValueError("need n >= 1, p >= 1, num_classes >= 2")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(num_classes, p))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    labels = rng.permutation(np.arange(n) % num_classes)
    features = means[labels] + rng.standard_normal((n, p))
    if not tag:
        tag = f"synth(n={n},p={p},c={num_classes},sep={separation},seed={seed})"
    return DatasetHandle(features, labels, num_classes, tag)


def csv_header(p: int) -> list[str]:
    return [f"f{j}" for j in range(p)] + ["label"]


def save_csv(data: DatasetHandle, path: str) -> None:
    """Write `f0,...,f{p-1},label` rows; floats use repr for round-trip."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(data.p))
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: str, num_classes: int | None = None, tag: str = "") -> DatasetHandle:
    """Read a dataset written by save_csv (or any file matching its header)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"dataset file {path} is empty") from None
        p = len(header) - 1
        if p < 1 or header != csv_header(p):
            raise ConfigError(f"dataset file {path} has a malformed header")
        feats: list[list[float]] = []
        labels: list[int] = []
        for i, row in enumerate(reader):
            if len(row) != p + 1:
                raise ConfigError(f"dataset file {path} row {i} has {len(row)} fields")
            try:
                feats.append([float(v) for v in row[:p]])
                labels.append(int(row[p]))
            except ValueError:
                raise ConfigError(f"dataset file {path} row {i} is not numeric") from None
    if not feats:
        raise ConfigError(f"dataset file {path} has no data rows")
    label_arr = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = max(2, int(label_arr.max()) + 1)
    return DatasetHandle(np.array(feats), label_arr, num_classes, tag or path)


# ---------------------------------------------------------------------------
# loss models


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite_logits(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise NumericOverflowError("non-finite logits in prediction")


class LossModel:
    """Common surface for the loss families.

    Subclasses define param_dim, loss_full, grad_full, grad_per_example
    and (for classifiers) predict_proba. The curvature attributes drive
    step-size rules and noise calibration:

      lipschitz        bound on a per-example gradient norm (None if unset)
      smoothness       gradient Lipschitz constant
      strong_convexity lower curvature bound (0 for non-convex models)
    """

    lipschitz: float | None = None
    smoothness: float = 0.0
    strong_convexity: float = 0.0

    def param_dim(self) -> int:
        raise NotImplementedError

    def loss_full(self, theta: np.ndarray, data: DatasetHandle | None) -> float:
        raise NotImplementedError

    def grad_full(self, theta: np.ndarray, data: DatasetHandle | None) -> np.ndarray:
        raise NotImplementedError

    def grad_per_example(self, theta: np.ndarray, data: DatasetHandle) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Class-probability vector for a single input."""
        probs = self.predict_proba(theta, np.asarray(x, dtype=np.float64)[None, :])
        return probs[0]

    def cache_key(self) -> tuple:
        raise NotImplementedError

    def _check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_dim(),):
            raise ValueError(
                f"parameter vector has shape {theta.shape}, expected ({self.param_dim()},)"
            )
        return theta


@dataclass(eq=False)
class QuadraticLoss(LossModel):
    """loss(theta) = curvature/2 * ||theta - center||^2, data-independent.

    The gradient is unbounded on all of R^p, so a Lipschitz constant for
    DP calibration must be supplied explicitly when one is needed.
    """

    center: np.ndarray
    curvature: float = 1.0
    lipschitz: float | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.ndim != 1:
            raise ValueError("center must be a vector")
        if self.curvature <= 0:
            raise ValueError("curvature must be positive")
        self.smoothness = self.curvature
        self.strong_convexity = self.curvature

    def param_dim(self) -> int:
        return self.center.shape[0]

    def loss_full(self, theta, data=None) -> float:
        theta = self._check_theta(theta)
        d = theta - self.center
        return 0.5 * self.curvature * float(d @ d)

    def grad_full(self, theta, data=None) -> np.ndarray:
        theta = self._check_theta(theta)
        return self.curvature * (theta - self.center)

    def grad_per_example(self, theta, data) -> np.ndarray:
        g = self.grad_full(theta)
        return np.tile(g, (data.n, 1))

    def predict_proba(self, theta, features):
        raise ValueError("quadratic model has no prediction head")

    def cache_key(self) -> tuple:
        return ("quadratic", self.curvature, self.center.tobytes())


@dataclass(eq=False)
class LogisticLoss(LossModel):
    """l2-regularized logistic regression.

    Binary (num_classes == 2) uses a single weight vector and sigmoid
    probabilities; otherwise one weight vector per class with a softmax
    head. The per-example loss includes its own (l2_reg/2)*||theta||^2
    term, so the full loss is the plain mean of per-example losses.
    """

    n_features: int
    num_classes: int = 2
    l2_reg: float = 0.0
    lipschitz: float | None = None
    smoothness: float = 0.0

    def __post_init__(self):
        if self.n_features < 1 or self.num_classes < 2:
            raise ValueError("need n_features >= 1 and num_classes >= 2")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be nonnegative")
        self.strong_convexity = self.l2_reg

    @classmethod
    def for_data(
        cls, data: DatasetHandle, l2_reg: float = 0.0, radius: float = 1.0
    ) -> "LogisticLoss":
        """Build the model and its curvature constants from a dataset.

        The per-example gradient norm bound is max_i ||x_i|| + l2_reg * radius,
        valid as long as iterates stay in the radius ball.
        """
        norms = np.linalg.norm(data.features, axis=1)
        max_norm = float(norms.max())
        hess = 0.25 if data.num_classes == 2 else 0.5
        model = cls(
            n_features=data.p,
            num_classes=data.num_classes,
            l2_reg=l2_reg,
            lipschitz=max_norm + l2_reg * radius,
            smoothness=hess * max_norm**2 + l2_reg,
        )
        return model

    @property
    def binary(self) -> bool:
        return self.num_classes == 2

    def param_dim(self) -> int:
        return self.n_features if self.binary else self.num_classes * self.n_features

    def _weights(self, theta: np.ndarray) -> np.ndarray:
        return theta.reshape(self.num_classes, self.n_features)

    def loss_full(self, theta, data) -> float:
        theta = self._check_theta(theta)
        reg = 0.5 * self.l2_reg * float(theta @ theta)
        if self.binary:
            margins = data.features @ theta
            signs = 2.0 * data.labels - 1.0
            z = signs * margins
            # ln(1 + exp(-z)) evaluated stably
            ce = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
            return float(ce.mean()) + reg
        logits = data.features @ self._weights(theta).T
        zmax = logits.max(axis=1)
        lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
        picked = logits[np.arange(data.n), data.labels]
        return float((lse - picked).mean()) + reg

    def grad_full(self, theta, data) -> np.ndarray:
        theta = self._check_theta(theta)
        if self.binary:
            margins = data.features @ theta
            signs = 2.0 * data.labels - 1.0
            # d/dm ln(1+exp(-y m)) = -y * sigmoid(-y m)
            coeff = -signs * _sigmoid(-signs * margins)
            return data.features.T @ coeff / data.n + self.l2_reg * theta
        probs = _softmax(data.features @ self._weights(theta).T)
        probs[np.arange(data.n), data.labels] -= 1.0
        grad_w = probs.T @ data.features / data.n
        return grad_w.ravel() + self.l2_reg * theta

    def grad_per_example(self, theta, data) -> np.ndarray:
        theta = self._check_theta(theta)
        if self.binary:
            margins = data.features @ theta
            signs = 2.0 * data.labels - 1.0
            coeff = -signs * _sigmoid(-signs * margins)
            return coeff[:, None] * data.features + self.l2_reg * theta
        probs = _softmax(data.features @ self._weights(theta).T)
        probs[np.arange(data.n), data.labels] -= 1.0
        grads = np.einsum("ic,ip->icp", probs, data.features)
        return grads.reshape(data.n, -1) + self.l2_reg * theta

    def predict_proba(self, theta, features) -> np.ndarray:
        theta = self._check_theta(theta)
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.binary:
            margins = features @ theta
            _check_finite_logits(margins)
            pos = _sigmoid(margins)
            return np.stack([1.0 - pos, pos], axis=1)
        logits = features @ self._weights(theta).T
        _check_finite_logits(logits)
        return _softmax(logits)

    def cache_key(self) -> tuple:
        return ("logistic", self.n_features, self.num_classes, self.l2_reg)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(eq=False)
class TinyMLP(LossModel):
    """One tanh hidden layer with a softmax head, for qualitative runs.

    Non-convex, so strong_convexity is 0 and the curvature constants are
    whatever the caller supplies; they are used for step-size defaults
    and noise calibration, not guaranteed bounds.
    """

    n_features: int
    hidden: int
    num_classes: int
    lipschitz: float | None = None
    smoothness: float = 0.0
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.n_features < 1 or self.hidden < 1 or self.num_classes < 2:
            raise ValueError("bad tinyMLP sizes")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be nonnegative")
        self.strong_convexity = 0.0

    def param_dim(self) -> int:
        h, p, c = self.hidden, self.n_features, self.num_classes
        return h * p + h + c * h + c

    def _unpack(self, theta: np.ndarray):
        h, p, c = self.hidden, self.n_features, self.num_classes
        i = 0
        w1 = theta[i : i + h * p].reshape(h, p)
        i += h * p
        b1 = theta[i : i + h]
        i += h
        w2 = theta[i : i + c * h].reshape(c, h)
        i += c * h
        b2 = theta[i : i + c]
        return w1, b1, w2, b2

    def _forward(self, theta: np.ndarray, features: np.ndarray):
        w1, b1, w2, b2 = self._unpack(theta)
        hidden = np.tanh(features @ w1.T + b1)
        logits = hidden @ w2.T + b2
        return hidden, logits

    def loss_full(self, theta, data) -> float:
        theta = self._check_theta(theta)
        _, logits = self._forward(theta, data.features)
        zmax = logits.max(axis=1)
        lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
        picked = logits[np.arange(data.n), data.labels]
        reg = 0.5 * self.l2_reg * float(theta @ theta)
        return float((lse - picked).mean()) + reg

    def _backward(self, theta: np.ndarray, data: DatasetHandle):
        """Per-example gradient blocks, stacked into an (n, dim) matrix."""
        w1, b1, w2, b2 = self._unpack(theta)
        hidden = np.tanh(data.features @ w1.T + b1)  # (n, h)
        probs = _softmax(hidden @ w2.T + b2)  # (n, c)
        probs[np.arange(data.n), data.labels] -= 1.0
        d2 = probs  # dloss/dlogits per example
        g_w2 = np.einsum("ic,ih->ich", d2, hidden)
        g_b2 = d2
        d1 = (d2 @ w2) * (1.0 - hidden**2)  # (n, h)
        g_w1 = np.einsum("ih,ip->ihp", d1, data.features)
        g_b1 = d1
        n = data.n
        flat = np.concatenate(
            [g_w1.reshape(n, -1), g_b1, g_w2.reshape(n, -1), g_b2], axis=1
        )
        return flat + self.l2_reg * theta

    def grad_full(self, theta, data) -> np.ndarray:
        theta = self._check_theta(theta)
        return self._backward(theta, data).mean(axis=0)

    def grad_per_example(self, theta, data) -> np.ndarray:
        theta = self._check_theta(theta)
        return self._backward(theta, data)

    def predict_proba(self, theta, features) -> np.ndarray:
        theta = self._check_theta(theta)
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        _, logits = self._forward(theta, features)
        _check_finite_logits(logits)
        return _softmax(logits)

    def cache_key(self) -> tuple:
        return ("tiny_mlp", self.n_features, self.hidden, self.num_classes, self.l2_reg)


def accuracy(model: LossModel, theta: np.ndarray, data: DatasetHandle) -> float:
    """Fraction of examples whose argmax class matches the label."""
    probs = model.predict_proba(theta, data.features)
    return float(np.mean(probs.argmax(axis=1) == data.labels))


# ---------------------------------------------------------------------------
# diurnal (periodically shifting) data source


@dataclass(eq=False)
class DiurnalSchedule:
    """Two data sources mixed with a triangle-wave probability.

    At step t an example comes from source_a with probability
    |2 (t mod period) / period - 1|, else from source_b, so the batch
    distribution sweeps a -> b -> a over each period.
    """

    period: int
    source_a: DatasetHandle
    source_b: DatasetHandle

    def __post_init__(self):
        if self.period < 2:
            raise ValueError("period must be at least 2")
        if self.source_a.p != self.source_b.p:
            raise ValueError("diurnal sources must share feature dimension")
        if self.source_a.num_classes != self.source_b.num_classes:
            raise ValueError("diurnal sources must share the class set")


def diurnal_prob(schedule: DiurnalSchedule, t: int) -> float:
    """Probability that a step-t example comes from source_a."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    phase = (t % schedule.period) / schedule.period
    return abs(2.0 * phase - 1.0)


def diurnal_draw(
    schedule: DiurnalSchedule, t: int, count: int, rng: np.random.Generator
) -> DatasetHandle:
    """Draw a batch of `count` examples for step t (independent per example)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    p = diurnal_prob(schedule, t)
    from_a = rng.random(count) < p
    feats = np.empty((count, schedule.source_a.p))
    labels = np.empty(count, dtype=np.int64)
    n_a = int(from_a.sum())
    if n_a:
        idx = rng.integers(0, schedule.source_a.n, n_a)
        feats[from_a] = schedule.source_a.features[idx]
        labels[from_a] = schedule.source_a.labels[idx]
    if count - n_a:
        idx = rng.integers(0, schedule.source_b.n, count - n_a)
        feats[~from_a] = schedule.source_b.features[idx]
        labels[~from_a] = schedule.source_b.labels[idx]
    return DatasetHandle(
        feats, labels, schedule.source_a.num_classes, tag=f"diurnal(t={t})"
    )
