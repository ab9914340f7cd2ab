"""Online per-model accuracy estimators.

Each model in the zoo gets its own linear estimator over hashed unigram and
bigram features of the request text. Predictions pass through a logistic link
so they stay inside (0, 1); the squared-error SGD step differentiates through
that link.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .metrics import tokenize

DEFAULT_DIM = 2 ** 18
LINKS = ("logistic", "identity")


@dataclass(frozen=True)
class FeatureVector:
    """Sparse feature vector with sorted, unique indices."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def entries(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_entries(cls, entries: dict[int, float], dim: int) -> "FeatureVector":
        idx = np.array(sorted(entries), dtype=np.int64)
        if idx.size and (idx[0] < 0 or idx[-1] >= dim):
            raise ValueError(f"feature index outside [0, {dim})")
        vals = np.array([entries[i] for i in idx], dtype=float)
        return cls(idx, vals, dim)


@dataclass
class PredictorParams:
    weights: np.ndarray
    bias: float = 0.0
    updates_applied: int = 0
    link: str = "logistic"

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")

    @property
    def dim(self) -> int:
        return len(self.weights)

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.weights.copy(), self.bias, self.updates_applied, self.link)


def _check_dim(dim: int) -> None:
    if dim < 2 or dim & (dim - 1):
        raise ValueError(f"feature dimension must be a power of two >= 2, got {dim}")


@lru_cache(maxsize=1 << 20)
def _hash64(token: str, hash_seed: int) -> int:
    key = hash_seed.to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def featurize(text: str, dim: int = DEFAULT_DIM, hash_seed: int = 0) -> FeatureVector:
    """Hash lowercased unigrams and adjacent bigrams into ``dim`` buckets, L2-normalized."""
    _check_dim(dim)
    tokens = tokenize(text)
    counts: dict[int, float] = {}
    grams = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    for gram in grams:
        idx = _hash64(gram, hash_seed) % dim
        counts[idx] = counts.get(idx, 0.0) + 1.0
    if not counts:
        return FeatureVector(np.zeros(0, dtype=np.int64), np.zeros(0), dim)
    fv = FeatureVector.from_entries(counts, dim)
    values = fv.values / np.sqrt(np.dot(fv.values, fv.values))
    return FeatureVector(fv.indices, values, dim)


def init_params(
    num_models: int,
    dim: int = DEFAULT_DIM,
    seed: int = 0,
    std: float = 0.01,
    link: str = "logistic",
) -> list[PredictorParams]:
    """One Gaussian draw shared by every model, copied so each can train independently."""
    _check_dim(dim)
    rng = np.random.default_rng(seed)
    common = rng.normal(0.0, std, size=dim)
    bias = float(rng.normal(0.0, std))
    return [PredictorParams(common.copy(), bias, 0, link) for _ in range(num_models)]


def _logit(params: PredictorParams, features: FeatureVector) -> float:
    if features.dim != params.dim:
        raise ValueError(f"feature dim {features.dim} != parameter dim {params.dim}")
    return float(np.dot(params.weights[features.indices], features.values)) + params.bias


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def predict(params: PredictorParams, features: FeatureVector) -> float:
    z = _logit(params, features)
    if params.link == "logistic":
        return _sigmoid(z)
    return min(1.0, max(0.0, z))


def _residual_gradient(params: PredictorParams, features: FeatureVector, true_accuracy: float) -> float:
    """d/dz of (prediction - target)^2, z being the pre-link score."""
    z = _logit(params, features)
    if params.link == "logistic":
        a = _sigmoid(z)
        return 2.0 * (a - true_accuracy) * a * (1.0 - a)
    if z <= 0.0 or z >= 1.0:
        return 0.0
    return 2.0 * (z - true_accuracy)


def sgd_update(
    params: PredictorParams,
    features: FeatureVector,
    true_accuracy: float,
    eta: float,
    inplace: bool = False,
) -> PredictorParams:
    """One squared-error SGD step. Only coordinates present in ``features`` move."""
    if not 0.0 <= true_accuracy <= 1.0:
        raise ValueError(f"true accuracy must lie in [0, 1], got {true_accuracy}")
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    g = _residual_gradient(params, features, true_accuracy)
    out = params if inplace else params.copy()
    if g != 0.0:
        out.weights[features.indices] -= eta * g * features.values
        out.bias -= eta * g
    out.updates_applied += 1
    return out


def batch_loss(params: PredictorParams, examples: Sequence[tuple[FeatureVector, float]]) -> float:
    """Mean squared prediction error over ``examples``."""
    if len(examples) == 0:
        raise ValueError("batch_loss needs at least one example")
    total = 0.0
    for features, target in examples:
        total += (predict(params, features) - target) ** 2
    return total / len(examples)


@dataclass
class OnlinePredictor:
    """The per-model estimators for one zoo, trained in place during a run."""

    params: list[PredictorParams]
    eta: float = 1.0
    dim: int = DEFAULT_DIM
    hash_seed: int = 0
    _cache: dict[str, FeatureVector] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, num_models: int, eta: float = 1.0, dim: int = DEFAULT_DIM,
               seed: int = 0, hash_seed: int = 0, link: str = "logistic") -> "OnlinePredictor":
        return cls(init_params(num_models, dim, seed, link=link), eta, dim, hash_seed)

    def features(self, text: str) -> FeatureVector:
        fv = self._cache.get(text)
        if fv is None:
            fv = featurize(text, self.dim, self.hash_seed)
            self._cache[text] = fv
        return fv

    def predict_all(self, features: FeatureVector) -> list[float]:
        return [predict(p, features) for p in self.params]

    def update_all(self, features: FeatureVector, accuracies: Sequence[float]) -> None:
        if len(accuracies) != len(self.params):
            raise ValueError("one accuracy per model is required")
        for p, a in zip(self.params, accuracies):
            sgd_update(p, features, a, self.eta, inplace=True)

    def losses(self, holdout: "HoldoutSet") -> list[float]:
        return [holdout.loss(p, m) for m, p in enumerate(self.params)]


@dataclass
class HoldoutSet:
    """Held-out requests stacked into one sparse matrix for fast loss evaluation."""

    X: sparse.csr_matrix
    targets: np.ndarray  # (n, M) true accuracies

    @classmethod
    def build(cls, features: Sequence[FeatureVector], targets) -> "HoldoutSet":
        if not features:
            raise ValueError("holdout set is empty")
        dim = features[0].dim
        indptr = np.cumsum([0] + [len(f.indices) for f in features])
        X = sparse.csr_matrix(
            (np.concatenate([f.values for f in features]),
             np.concatenate([f.indices for f in features]), indptr),
            shape=(len(features), dim))
        return cls(X, np.asarray(targets, dtype=float).reshape(len(features), -1))

    def loss(self, params: PredictorParams, model: int) -> float:
        z = self.X @ params.weights + params.bias
        if params.link == "logistic":
            pred = 1.0 / (1.0 + np.exp(-z))
        else:
            pred = np.clip(z, 0.0, 1.0)
        return float(np.mean((pred - self.targets[:, model]) ** 2))


# Text format: a header line, then one "index value" line per nonzero weight.
_HEADER = "messplus-predictor 1"


def save_params(params: PredictorParams, path: str | Path) -> None:
    nz = np.flatnonzero(params.weights)
    lines = [
        _HEADER,
        f"dim {params.dim}",
        f"link {params.link}",
        f"updates {params.updates_applied}",
        f"bias {params.bias!r}",
    ]
    lines += [f"{int(i)} {float(params.weights[i])!r}" for i in nz]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> PredictorParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _HEADER:
        raise ValueError(f"{path}: not a predictor parameter file")
    meta = dict(line.split(" ", 1) for line in lines[1:5])
    dim = int(meta["dim"])
    _check_dim(dim)
    weights = np.zeros(dim)
    for lineno, line in enumerate(lines[5:], start=6):
        idx, value = line.split()
        i = int(idx)
        if not 0 <= i < dim:
            raise ValueError(f"{path}:{lineno}: index {i} outside [0, {dim})")
        weights[i] = float(value)
    return PredictorParams(weights, float(meta["bias"]), int(meta["updates"]), meta["link"])


def iter_examples(texts: Iterable[str], targets: Iterable[float], dim: int = DEFAULT_DIM,
                  hash_seed: int = 0) -> list[tuple[FeatureVector, float]]:
    return [(featurize(t, dim, hash_seed), float(y)) for t, y in zip(texts, targets)]
