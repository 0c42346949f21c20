"""Inception score, the desk-scale scene classifier and land-cover classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Protocol

import numpy as np

from . import nn
from .core_types import CLASSES, OVERHEAD_SIDE, make_rng

PROB_FLOOR = 1e-12
PATCH = 10


class ClassifierInterface(Protocol):
    n_classes: int

    def predict_proba(self, images) -> np.ndarray:
        """(N, H, W, 3) images in [-1, 1] -> (N, n_classes) rows summing to 1."""


class InvalidDistribution(ValueError):
    def __init__(self, index, message):
        super().__init__(f"classifier output for image {index} is not a distribution: {message}")
        self.index = index


@dataclass
class ScoreReport:
    inception_score_mean: float
    inception_score_std: float
    n_images: int
    n_splits: int


@dataclass
class ClassificationReport:
    accuracy: float
    confusion: List[List[int]]
    n_train: int
    n_test: int
    feature_source: str
    classes: List[str] = field(default_factory=lambda: list(CLASSES))


# --- inception score -----------------------------------------------------------------

def validate_distributions(probs, tol=1e-6):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError(f"expected (N, C>=2) probabilities, got shape {probs.shape}")
    for i, row in enumerate(probs):
        if not np.isfinite(row).all():
            raise InvalidDistribution(i, "non-finite entries")
        if row.min() < 0:
            raise InvalidDistribution(i, f"negative entry {row.min()}")
        if abs(row.sum() - 1.0) > tol:
            raise InvalidDistribution(i, f"sums to {row.sum()}")
    return probs


def split_scores(probs, n_splits):
    """exp(mean KL(p(y|x) || p(y))) for each of ``n_splits`` contiguous splits."""
    scores = []
    for part in np.array_split(probs, n_splits):
        marginal = part.mean(axis=0)
        logp = np.log(np.maximum(part, PROB_FLOOR))
        logm = np.log(np.maximum(marginal, PROB_FLOOR))
        kl = (part * (logp - logm)).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return scores


def inception_score(images, classifier, n_splits=10, seed=0, batch_size=128) -> ScoreReport:
    images = np.asarray(images)
    n = len(images)
    if not 1 <= n_splits <= n:
        raise ValueError(f"need n_images >= n_splits >= 1 (got {n} images, {n_splits} splits)")
    probs = np.concatenate([classifier.predict_proba(images[i : i + batch_size])
                            for i in range(0, n, batch_size)])
    probs = validate_distributions(probs)
    order = make_rng(seed, 0x15).permutation(n)
    scores = split_scores(probs[order], n_splits)
    return ScoreReport(float(np.mean(scores)), float(np.std(scores)), n, n_splits)


# --- classifiers ----------------------------------------------------------------------

class ConstantClassifier:
    """Returns the same distribution for every image (a test stub)."""

    def __init__(self, distribution):
        d = np.asarray(distribution, dtype=np.float64)
        validate_distributions(d[None])
        self.distribution = d
        self.n_classes = len(d)

    def predict_proba(self, images):
        return np.tile(self.distribution, (len(images), 1))


SCENE_LAYERS = [
    nn.Layer("c1", "conv", bn=False, act="lrelu"),
    nn.Layer("c2", "conv", bn=False, act="lrelu"),
    nn.Layer("c3", "conv", bn=False, act="lrelu"),
]
SCENE_WIDTHS = (8, 16, 16)


class SceneClassifier:
    """Three strided convolutions, global average pooling and a softmax layer."""

    def __init__(self, params, n_classes=2, holdout_accuracy=float("nan")):
        self.params = params
        self.n_classes = n_classes
        self.holdout_accuracy = holdout_accuracy

    def _forward(self, images):
        x = np.asarray(images, dtype=np.float32)
        outs, caches = nn.chain_forward(self.params, SCENE_LAYERS, x, False, False, {})
        pooled = outs[-1].mean(axis=(1, 2))
        logits = pooled @ self.params["fc.weight"] + self.params["fc.bias"]
        return logits, pooled, outs[-1].shape, caches

    def predict_proba(self, images):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        logits = self._forward(images)[0]
        return nn.softmax(logits.astype(np.float64))

    def predict(self, images):
        return self.predict_proba(images).argmax(axis=1)


def init_scene_classifier(seed, n_classes=2):
    rng = make_rng(seed, 0xC1A5)
    params, cin = {}, 3
    for layer, cout in zip(SCENE_LAYERS, SCENE_WIDTHS):
        params.update(nn.init_layer(rng, layer, cin, cout, 5, std=np.sqrt(2.0 / (25 * cin))))
        cin = cout
    params["fc.weight"] = rng.normal(0, np.sqrt(1.0 / cin), size=(cin, n_classes)).astype(np.float32)
    params["fc.bias"] = np.zeros(n_classes, dtype=np.float32)
    return params


class ClassifierTrainingError(RuntimeError):
    pass


def _scene_grads(clf, images, labels):
    logits, pooled, hshape, caches = clf._forward(images)
    probs = nn.softmax(logits.astype(np.float64))
    n = len(labels)
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-12)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits = (dlogits / n).astype(np.float32)
    grads = {"fc.weight": pooled.T @ dlogits, "fc.bias": dlogits.sum(axis=0)}
    dpooled = dlogits @ clf.params["fc.weight"].T
    dh = np.ascontiguousarray(np.broadcast_to(dpooled[:, None, None, :] / (hshape[1] * hshape[2]), hshape))
    nn.chain_backward(SCENE_LAYERS, caches, grads, dout_last=dh, need_dx=False)
    return loss, grads


def train_scene_classifier(dataset, seed=0, holdout_fraction=0.2, epochs=25, batch_size=32,
                           learning_rate=2e-3, target_accuracy=0.95):
    """Fit a SceneClassifier on the ground views of a labeled dataset.

    Raises ClassifierTrainingError when the holdout accuracy stays below
    ``target_accuracy``; with the synthetic scenes that signals a broken dataset.
    """
    from .training import adam_update

    labels = np.array([CLASSES.index(s.label) for s in dataset if s.label is not None])
    if len(labels) != len(dataset):
        raise ValueError("every sample needs a label to train the scene classifier")
    if len(np.unique(labels)) < 2:
        raise ValueError("scene classifier needs at least two classes present")
    images = np.stack([s.ground for s in dataset])
    rng = make_rng(seed, 0xC1A6)
    perm = rng.permutation(len(images))
    n_hold = max(1, int(round(holdout_fraction * len(images))))
    hold, fit = perm[:n_hold], perm[n_hold:]
    clf = SceneClassifier(init_scene_classifier(seed))
    m = {k: np.zeros_like(v) for k, v in clf.params.items()}
    v = {k: np.zeros_like(p) for k, p in clf.params.items()}
    t = 0
    for _ in range(epochs):
        order = fit[rng.permutation(len(fit))]
        for b in range(0, len(order) - batch_size + 1, batch_size):
            idx = np.sort(order[b : b + batch_size])
            _, grads = _scene_grads(clf, images[idx], labels[idx])
            t += 1
            clf.params, m, v = adam_update(clf.params, grads, m, v, t, learning_rate, 0.9, 0.999, 1e-8)
    acc = float((clf.predict(images[hold]) == labels[hold]).mean())
    clf.holdout_accuracy = acc
    if acc < target_accuracy:
        raise ClassifierTrainingError(
            f"scene classifier reached {acc:.3f} holdout accuracy, below {target_accuracy}")
    return clf


# --- land-cover classification --------------------------------------------------------

def grayscale_patch_features(overhead):
    """Centre 10x10 patch of the overhead image, RGB-averaged, flattened row-major."""
    o = np.asarray(overhead)
    single = o.ndim == 3
    if single:
        o = o[None]
    lo = OVERHEAD_SIDE // 2 - PATCH // 2
    patch = o[:, lo : lo + PATCH, lo : lo + PATCH, :].mean(axis=-1)
    feats = patch.reshape(len(o), PATCH * PATCH)
    return feats[0] if single else feats


def _label_ids(labels):
    out = []
    for lab in labels:
        if isinstance(lab, str):
            out.append(CLASSES.index(lab))
        else:
            out.append(int(lab))
    return np.array(out)


def classify_land_cover(features, labels, n_train, seed=0, feature_source="cgan_features",
                        regularization=1.0) -> ClassificationReport:
    """Train a linear hinge-loss SVM on the first ``n_train`` shuffled samples, test on the rest."""
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import LinearSVC

    x = np.asarray(features, dtype=np.float64)
    y = _label_ids(labels)
    n = len(x)
    if len(y) != n:
        raise ValueError(f"{n} feature vectors but {len(y)} labels")
    if not 0 < n_train < n:
        raise ValueError(f"n_train must lie in (0, {n}), got {n_train}")
    perm = make_rng(seed, 0x5C).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    if len(np.unique(y[tr])) < 2:
        raise ValueError("training slice holds a single class; both rural and urban are required")
    model = make_pipeline(
        StandardScaler(),
        LinearSVC(C=regularization, loss="hinge", dual=True, max_iter=200_000,
                  random_state=int(seed) % 2**32),
    )
    model.fit(x[tr], y[tr])
    pred = model.predict(x[te])
    confusion = np.zeros((2, 2), dtype=int)
    for t_, p_ in zip(y[te], pred):
        confusion[t_, p_] += 1
    return ClassificationReport(
        accuracy=float((pred == y[te]).mean()),
        confusion=confusion.tolist(),
        n_train=int(n_train),
        n_test=int(len(te)),
        feature_source=feature_source,
    )
