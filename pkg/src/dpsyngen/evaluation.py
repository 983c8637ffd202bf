"""Desk-scale sample-quality metrics.

The Frechet distance is computed on PCA projections of raw pixels rather than
Inception features, so absolute values are only comparable within one
experiment (same fitted extractor).
"""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInputError
from .numerics import autodiff as ad
from .numerics.optim import AdamState, adam_step

COV_JITTER = 1e-6
REPORT_FIELDS = ("method", "epsilon", "seed", "frechet_feature_distance", "cas_logreg", "cas_mlp")


@dataclass(frozen=True)
class FeatureExtractor:
    """Top-k principal directions of the real training images, frozen after fitting."""

    mean: np.ndarray
    basis: np.ndarray  # (pixels, k), orthonormal columns

    @classmethod
    def fit(cls, images, k=64):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        mean = x.mean(axis=0)
        _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
        k = min(k, vt.shape[0])
        return cls(mean, vt[:k].T.copy())

    def __call__(self, images):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return (x - self.mean) @ self.basis


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def of(cls, feats, jitter=COV_JITTER):
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < d + 1:
            raise RejectedInputError(f"need at least {d + 1} samples for a {d}-d fit, got {n}")
        cov = np.cov(feats, rowvar=False).reshape(d, d) + jitter * np.eye(d)
        return cls(feats.mean(axis=0), cov, n)


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric product S_a^(1/2) S_b S_a^(1/2), negative ones clamped to 0.
    """
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def frechet_feature_distance(extractor, real_images, gen_images):
    return frechet_distance(GaussianFit.of(extractor(real_images)), GaussianFit.of(extractor(gen_images)))


# -- classifiers ------------------------------------------------------------

@dataclass
class Classifier:
    """Dense softmax classifier (no hidden layers = logistic regression)."""

    sizes: tuple
    theta: np.ndarray

    @classmethod
    def init(cls, d_in, num_classes, hidden=(), rng=None):
        rng = np.random.default_rng(rng)
        sizes = (d_in, *hidden, num_classes)
        chunks = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            chunks += [rng.normal(0.0, 1.0 / math.sqrt(a), size=a * b), np.zeros(b)]
        return cls(sizes, np.concatenate(chunks))

    def with_theta(self, theta):
        return Classifier(self.sizes, theta)

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            w = theta[off:off + a * b].reshape(a, b)
            off += a * b
            yield w, theta[off:off + b].reshape(1, b)
            off += b

    def logits_graph(self, wvars, x):
        h = ad.constant(x)
        for i, (w, b) in enumerate(wvars):
            h = h @ w + b
            if i < len(wvars) - 1:
                h = ad.tanh(h)
        return h

    def predict(self, x):
        h = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        layers = list(self.layers())
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = np.tanh(h)
        return np.argmax(h, axis=1)

    def loss_and_grad(self, x, y):
        wvars = [(ad.Var(w, True), ad.Var(b, True)) for w, b in self.layers()]
        loss = ad.softmax_cross_entropy(self.logits_graph(wvars, x), y)
        loss.backward()
        g = np.concatenate([v.grad.ravel() for pair in wvars for v in pair])
        return float(loss.value), g


CLASSIFIERS = {"logreg": (), "mlp": (128,), "mlp_wide": (512, 256)}


def train_classifier(x, y, num_classes, kind="mlp", epochs=20, batch_size=128, lr=5e-4, seed=0):
    """Adam on softmax cross-entropy; ``batch_size=None`` trains full-batch."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=int)
    rng = np.random.default_rng(seed)
    clf = Classifier.init(x.shape[1], num_classes, CLASSIFIERS[kind], rng)
    state = AdamState.zeros(clf.theta.size, lr=lr)
    n = len(x)
    for _ in range(epochs):
        if batch_size is None:
            _, g = clf.loss_and_grad(x, y)
            clf, state = adam_step(state, clf, g)
            continue
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = clf.loss_and_grad(x[idx], y[idx])
            clf, state = adam_step(state, clf, g)
    return clf


def accuracy(clf, x, y):
    return 100.0 * float(np.mean(clf.predict(x) == np.asarray(y)))


@dataclass
class CasReport:
    accuracy: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def cas(gen_images, gen_labels, test_images, test_labels, kinds=("logreg", "mlp"),
        epochs=20, batch_size=128, lr=5e-4, seed=0, num_classes=None):
    """Accuracy on real test data of classifiers trained only on generated data."""
    gen_labels = np.asarray(gen_labels, dtype=int)
    test_labels = np.asarray(test_labels, dtype=int)
    num_classes = num_classes or int(max(gen_labels.max(), test_labels.max()) + 1)
    report = CasReport()
    missing = sorted(set(test_labels.tolist()) - set(gen_labels.tolist()))
    if missing:
        msg = f"generated set lacks classes {missing}; classifier training is degenerate"
        report.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    for kind in kinds:
        clf = train_classifier(gen_images, gen_labels, num_classes, kind, epochs, batch_size, lr, seed)
        report.accuracy[kind] = accuracy(clf, test_images, test_labels)
    return report


def write_metrics_report(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in REPORT_FIELDS})
