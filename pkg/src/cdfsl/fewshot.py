"""Episodic N-way K-shot evaluation with a logistic-regression probe."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .data import ClipSet
from .errors import CapacityError, ValidationError
from .model import ModelConfig, pooled_features
from .params import ModelParams
from .tensor import no_grad


@dataclass(frozen=True)
class EvalConfig:
    way: int = 5
    shot: int = 5
    query: int = 15
    episodes: int = 200
    reg_l2: float = 1e-3
    max_iter: int = 500
    tol: float = 1e-6
    normalize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.way < 2:
            raise ValidationError("way must be at least 2")
        if self.shot < 1:
            raise ValidationError("shot must be at least 1")
        if self.query < 1 or self.episodes < 1:
            raise ValidationError("query and episodes must be positive")
        if self.reg_l2 < 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValidationError("invalid probe settings")


@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    classes: tuple[int, ...]
    support: tuple[tuple[int, int], ...]  # (clip index, episode label)
    query: tuple[tuple[int, int], ...]

    @property
    def support_ids(self) -> np.ndarray:
        return np.array([c for c, _ in self.support], dtype=np.int64)

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.support], dtype=np.int64)

    @property
    def query_ids(self) -> np.ndarray:
        return np.array([c for c, _ in self.query], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.query], dtype=np.int64)


def sample_episode(
    by_class: list[np.ndarray], way: int, shot: int, query: int, rng: np.random.Generator
) -> Episode:
    """Draw classes, then support and query clips, all without replacement.

    ``by_class`` lists clip indices for each class of the test split.
    """
    if shot < 1:
        raise ValidationError("shot must be at least 1")
    if len(by_class) < way:
        raise CapacityError(f"{way}-way episodes need {way} classes, split has {len(by_class)}")
    need = shot + query
    short = [c for c, idx in enumerate(by_class) if len(idx) < need]
    if short:
        raise CapacityError(f"classes {short} have fewer than shot + query = {need} clips")
    classes = rng.choice(len(by_class), size=way, replace=False)
    support, qry = [], []
    for label, c in enumerate(classes):
        picked = rng.permutation(by_class[c])[:need]
        support.extend((int(i), label) for i in picked[:shot])
        qry.extend((int(i), label) for i in picked[shot:])
    return Episode(way, shot, tuple(int(c) for c in classes), tuple(support), tuple(qry))


def extract_features(
    encoder: ModelParams, clips: np.ndarray, cfg: ModelConfig, batch_size: int = 64
) -> np.ndarray:
    """Pooled encoder features of clean clips, ``[n, embed_dim]``."""
    out = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            out.append(pooled_features(clips[i : i + batch_size], cfg, encoder).data)
    if not out:
        return np.zeros((0, cfg.encoder.embed_dim))
    return np.concatenate(out, axis=0)


@dataclass
class LogRegHead:
    weight: np.ndarray  # [D, N]
    bias: np.ndarray  # [N]
    n_iter: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return np.argmax(self.logits(features), axis=1)


def _cross_entropy(X, Y, W, b):
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(Y * logp).sum() / len(X), np.exp(logp)


def fit_logreg(
    features: np.ndarray,
    labels: np.ndarray,
    reg_l2: float = 1e-3,
    max_iter: int = 500,
    tol: float = 1e-6,
    n_classes: int | None = None,
) -> LogRegHead:
    """Multinomial logistic regression by proximal gradient descent with backtracking.

    Minimizes mean cross-entropy + (reg_l2 / 2) * ||W||^2; the bias is not
    penalized. The penalty is applied in closed form after each gradient step
    on the cross-entropy, so a large ``reg_l2`` does not force tiny steps on
    the bias. Steps are accepted under the usual quadratic upper bound, which
    makes the objective non-increasing. Stops when the gradient
    infinity-norm drops below ``tol``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("features must be [n, D] with one label per row")
    if not np.isfinite(X).all():
        raise ValidationError("features contain NaN or Inf")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    if np.any(np.bincount(y, minlength=n_classes) == 0):
        raise ValidationError("every class needs at least one sample")
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    ce, P = _cross_entropy(X, Y, W, b)
    trace = [ce]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R = (P - Y) / n
        gW_ce = X.T @ R
        gb = R.sum(axis=0)
        gmax = max(np.abs(gW_ce + reg_l2 * W).max(), np.abs(gb).max())
        if gmax < tol:
            converged = True
            it -= 1
            break
        step = min(step * 2.0, 1e6)
        while True:
            W_new = (W - step * gW_ce) / (1.0 + step * reg_l2)
            b_new = b - step * gb
            ce_new, P_new = _cross_entropy(X, Y, W_new, b_new)
            dW, db = W_new - W, b_new - b
            bound = ce + np.sum(gW_ce * dW) + np.sum(gb * db) + (np.sum(dW * dW) + np.sum(db * db)) / (2 * step)
            if ce_new <= bound:
                break
            step *= 0.5
            if step < 1e-14:
                # the bound can no longer be resolved in float64; stop here
                return LogRegHead(W, b, it, False, trace)
        W, b, ce, P = W_new, b_new, ce_new, P_new
        trace.append(ce + 0.5 * reg_l2 * np.sum(W * W))
    return LogRegHead(W, b, it, converged, trace)


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    ci95: float
    config: dict

    @classmethod
    def from_accuracies(cls, accuracies, config: dict) -> "EvalReport":
        acc = [float(a) for a in accuracies]
        m = float(np.mean(acc))
        sd = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
        return cls(acc, m, 1.96 * sd / math.sqrt(len(acc)), dict(config))

    def to_dict(self) -> dict:
        return asdict(self)


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def run_episode(features: np.ndarray, episode: Episode, cfg: EvalConfig) -> float:
    head = fit_logreg(
        features[episode.support_ids], episode.support_labels, cfg.reg_l2, cfg.max_iter, cfg.tol, episode.way
    )
    pred = head.predict(features[episode.query_ids])
    return float(np.mean(pred == episode.query_labels))


def evaluate_features(features: np.ndarray, by_class: list[np.ndarray], cfg: EvalConfig) -> EvalReport:
    if cfg.normalize:
        features = _l2_normalize(features)
    accs = []
    for e in range(cfg.episodes):
        ep = sample_episode(by_class, cfg.way, cfg.shot, cfg.query, rngmod.stream(cfg.seed, "episode", e))
        accs.append(run_episode(features, ep, cfg))
    echo = {"way": cfg.way, "shot": cfg.shot, "query": cfg.query, "episodes": cfg.episodes, "seed": cfg.seed}
    return EvalReport.from_accuracies(accs, echo)


def evaluate(encoder: ModelParams, test_set: ClipSet, model_cfg: ModelConfig, cfg: EvalConfig) -> EvalReport:
    """Fit a fresh probe per episode on frozen features and score the queries."""
    features = extract_features(encoder, test_set.clips(), model_cfg)
    return evaluate_features(features, test_set.indices_by_class(), cfg)
