"""Shared builders for tests."""

import numpy as np

from messplus.predictor import DEFAULT_DIM, FeatureVector, featurize

WORDS = [f"w{i:02d}" for i in range(20)]


def realizable_stream(n, seed=0, dim=DEFAULT_DIM, noise=0.05):
    """Texts whose targets are sigmoid(w* . phi) plus bounded noise.

    w* puts weight only on the hashed unigram buckets, so a linear model over
    the same features can represent the target exactly.
    """
    rng = np.random.default_rng(seed)
    w_star = np.zeros(dim)
    for word in WORDS:
        idx = featurize(word, dim).indices[0]
        w_star[idx] = rng.normal(0.0, 3.0)
    texts, targets = [], []
    for _ in range(n):
        k = rng.integers(6, 13)
        text = " ".join(rng.choice(WORDS, size=k))
        fv = featurize(text, dim)
        clean = 1.0 / (1.0 + np.exp(-np.dot(w_star[fv.indices], fv.values)))
        y = float(np.clip(clean + rng.uniform(-noise, noise), 0.0, 1.0))
        texts.append(text)
        targets.append(y)
    return texts, targets


def random_features(rng, dim=1024, nnz=None) -> FeatureVector:
    nnz = nnz if nnz is not None else int(rng.integers(1, 30))
    idx = np.sort(rng.choice(dim, size=nnz, replace=False))
    vals = rng.normal(size=nnz)
    vals /= np.linalg.norm(vals)
    return FeatureVector(idx.astype(np.int64), vals, dim)


# (criterion, passed, detail) lines collected by the acceptance suite and
# echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []
