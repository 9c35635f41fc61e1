"""Diagnostics over trained embeddings.

Layer-wise alignment/uniformity, a fixed-bandwidth neighborhood entropy
estimator, augmentation robustness, similarity-error correlation and the
median error split, kNN and linear evaluation, the algebraic identity
checks that tie cosine similarity to squared Euclidean distance on the
unit sphere, and plot-ready polar/PCA exports.

All probes are pure, read-only functions of embeddings (plus a seed where
sampling is involved).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import objectives
from .model import SslModel


def unit_rows(x: np.ndarray, strict: bool = False) -> np.ndarray:
    """Row-normalized copy of ``x``. Zero rows stay zero unless ``strict``,
    in which case they raise (they have no direction)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if strict and np.any(norms <= ad.ROW_NORM_FLOOR):
        raise ad.DomainError("unit_rows: zero row cannot be normalized")
    safe = np.where(norms > ad.ROW_NORM_FLOOR, norms, 1.0)
    return x / safe


# ---------------------------------------------------------------------------
# layer-wise alignment / uniformity


@dataclass
class LayerMetrics:
    layer_name: str
    alignment: float
    uniformity: float


@dataclass
class LayerwiseResult:
    """Per-layer metrics plus the entry/exit deltas for each stage.

    Encoder deltas compare the last encoder layer against the first; the
    projector deltas compare the projector output against its input (the
    representation), which keeps them meaningful for single-layer heads.
    """

    layers: list[LayerMetrics]
    encoder_delta_alignment: float
    encoder_delta_uniformity: float
    projector_delta_alignment: float
    projector_delta_uniformity: float

    def by_name(self, name: str) -> LayerMetrics:
        for m in self.layers:
            if m.layer_name == name:
                return m
        raise KeyError(name)

    @property
    def representation(self) -> LayerMetrics:
        return [m for m in self.layers if m.layer_name.startswith("encoder.")][-1]

    @property
    def projection(self) -> LayerMetrics:
        return self.layers[-1]


def _pair_metrics(a: np.ndarray, b: np.ndarray, tau: float) -> tuple[float, float]:
    """Mean positive-pair similarity (scaled 1/tau) and mean log-sum-exp
    uniformity over the stacked rows; zero rows are dropped pairwise."""
    ok = (np.linalg.norm(a, axis=1) > ad.ROW_NORM_FLOOR) \
        & (np.linalg.norm(b, axis=1) > ad.ROW_NORM_FLOOR)
    a, b = unit_rows(a[ok]), unit_rows(b[ok])
    alignment = float(np.mean(np.sum(a * b, axis=1)) / tau)
    tape = ad.Tape()
    stacked = tape.constant(np.vstack([a, b]))
    uniformity = float(objectives.uniformity_mean(stacked, tau).values)
    return alignment, uniformity


def layerwise_metrics(model: SslModel, dataset: data_mod.Dataset, tau: float,
                      sigma_eps: float, seed: int,
                      max_samples: int = 512) -> LayerwiseResult:
    """Alignment and uniformity at every layer output, computed on a seeded
    subsample with two augmented views per point."""
    points = dataset.points
    if len(dataset) > max_samples:
        idx = data_mod.stream(seed, "layerwise-subsample").permutation(len(dataset))
        points = points[idx[:max_samples]]
    v1 = data_mod.augment_gaussian(points, sigma_eps, seed, "probe-view1")
    v2 = data_mod.augment_gaussian(points, sigma_eps, seed, "probe-view2")
    trace1 = model.forward(ad.Tape(), v1)
    trace2 = model.forward(ad.Tape(), v2)

    layers = []
    for (name, out1), (_, out2) in zip(trace1.layer_outputs(), trace2.layer_outputs()):
        alignment, uniformity = _pair_metrics(out1, out2, tau)
        layers.append(LayerMetrics(name, alignment, uniformity))

    enc = [m for m in layers if m.layer_name.startswith("encoder.")]
    proj_out = layers[-1]
    return LayerwiseResult(
        layers=layers,
        encoder_delta_alignment=enc[-1].alignment - enc[0].alignment,
        encoder_delta_uniformity=enc[-1].uniformity - enc[0].uniformity,
        projector_delta_alignment=proj_out.alignment - enc[-1].alignment,
        projector_delta_uniformity=proj_out.uniformity - enc[-1].uniformity,
    )


# ---------------------------------------------------------------------------
# entropy


@dataclass
class EntropyResult:
    entropy: float
    evaluated: int
    skipped: int


def entropy_estimate(embeddings: np.ndarray, labels: np.ndarray,
                     bandwidth: float, min_neighbors: int = 5) -> EntropyResult:
    """Mean label entropy of fixed-radius neighborhoods.

    Embeddings are L2-normalized first; sample i's neighborhood is every
    other sample within Euclidean distance ``bandwidth``. Neighborhoods
    smaller than ``min_neighbors`` are skipped; the entropy of each kept
    neighborhood is -sum p log p over the label frequencies (natural log).
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    e = unit_rows(embeddings)
    labels = np.asarray(labels)
    n = e.shape[0]
    sq = np.sum(e * e, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (e @ e.T), 0.0)
    within = d2 <= bandwidth * bandwidth
    np.fill_diagonal(within, False)

    entropies = []
    skipped = 0
    for i in range(n):
        neighbor_labels = labels[within[i]]
        if neighbor_labels.size < min_neighbors:
            skipped += 1
            continue
        _, counts = np.unique(neighbor_labels, return_counts=True)
        p = counts / counts.sum()
        entropies.append(float(-(p * np.log(p)).sum()))
    if not entropies:
        raise ValueError("bandwidth too small: every neighborhood was skipped")
    return EntropyResult(float(np.mean(entropies)), len(entropies), skipped)


# ---------------------------------------------------------------------------
# augmentation robustness


def augmentation_robustness(model: SslModel, dataset: data_mod.Dataset,
                            augmentations: list[tuple[str, str, dict]],
                            seed: int, max_samples: int = 512,
                            ) -> dict[str, tuple[float, float]]:
    """Mean positive-pair cosine per augmentation, at the representation and
    the projection layer.

    A positive pair is a clean sample and its augmented version; the special
    kind ``"train"`` applies the training-style Gaussian noise whose sigma is
    in params. Cosines at the representation layer use normalized rows.
    """
    points = dataset.points
    if len(dataset) > max_samples:
        idx = data_mod.stream(seed, "robustness-subsample").permutation(len(dataset))
        points = points[idx[:max_samples]]
    repr_clean, proj_clean = model.embed(points)
    repr_clean = unit_rows(repr_clean)

    table: dict[str, tuple[float, float]] = {}
    for name, kind, params in augmentations:
        if kind == "train":
            augmented = data_mod.augment_gaussian(points, params["sigma"], seed, name)
        else:
            augmented = data_mod.augment_unseen(points, kind, params,
                                                seed=data_mod.stream(seed, name).integers(2**31))
        repr_aug, proj_aug = model.embed(augmented)
        repr_cos = float(np.mean(np.sum(repr_clean * unit_rows(repr_aug), axis=1)))
        proj_cos = float(np.mean(np.sum(proj_clean * proj_aug, axis=1)))
        table[name] = (repr_cos, proj_cos)
    return table


# ---------------------------------------------------------------------------
# similarity vs downstream error


def mean_pairwise_similarity(embeddings: np.ndarray) -> np.ndarray:
    """Per-sample mean cosine similarity to all other samples (divisor n-1)."""
    e = unit_rows(embeddings)
    n = e.shape[0]
    if n < 2:
        raise ValueError("mean_pairwise_similarity needs at least 2 samples")
    gram = e @ e.T
    return (gram.sum(axis=1) - np.diag(gram)) / (n - 1)


def correlation_with_error(s: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation between similarity scores and 0/1 error labels."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError("s and y must have equal length")
    if np.ptp(s) == 0 or np.ptp(y) == 0:
        raise ValueError("undefined correlation: constant input")
    sc, yc = s - s.mean(), y - y.mean()
    return float((sc @ yc) / (np.linalg.norm(sc) * np.linalg.norm(yc)))


def error_rate_split(s: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Error rates of the above-median and at-or-below-median groups.

    Group 1 is strict ``s > median(s)``; its complement is group 2. Each
    rate is the mean of ``y`` over the group.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError("s and y must have equal length")
    median = float(np.median(s))
    g1 = s > median
    if not g1.any() or g1.all():
        raise ValueError("degenerate split: one group is empty")
    return float(y[g1].mean()), float(y[~g1].mean())


# ---------------------------------------------------------------------------
# downstream evaluation


def knn_predict(train_embeddings: np.ndarray, train_labels: np.ndarray,
                test_embeddings: np.ndarray, k: int) -> np.ndarray:
    """Exact cosine-distance kNN with majority vote.

    Vote ties break by smaller summed distance, then by lower label id.
    Neighbor selection is a stable sort, so equal distances resolve to the
    earlier training row.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if train_embeddings.shape[0] == 0:
        raise ValueError("empty training set")
    if k > train_embeddings.shape[0]:
        raise ValueError(f"k={k} exceeds training size {train_embeddings.shape[0]}")
    train = unit_rows(train_embeddings)
    test = unit_rows(test_embeddings)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    dist = 1.0 - test @ train.T
    neighbor_idx = np.argsort(dist, axis=1, kind="stable")[:, :k]

    predictions = np.empty(test.shape[0], dtype=np.int64)
    for i in range(test.shape[0]):
        nb = neighbor_idx[i]
        nb_labels = train_labels[nb]
        nb_dist = dist[i, nb]
        best_label, best_key = -1, None
        for label in np.unique(nb_labels):
            mask = nb_labels == label
            key = (-int(mask.sum()), float(nb_dist[mask].sum()), int(label))
            if best_key is None or key < best_key:
                best_key, best_label = key, int(label)
        predictions[i] = best_label
    return predictions


def knn_classify(train_embeddings: np.ndarray, train_labels: np.ndarray,
                 test_embeddings: np.ndarray, test_labels: np.ndarray,
                 k: int) -> float:
    predictions = knn_predict(train_embeddings, train_labels, test_embeddings, k)
    return float(np.mean(predictions == np.asarray(test_labels)))


def linear_probe(train_embeddings: np.ndarray, train_labels: np.ndarray,
                 test_embeddings: np.ndarray, test_labels: np.ndarray,
                 epochs: int = 500, lr: float = 0.1) -> float:
    """Multinomial logistic regression on frozen embeddings.

    Full-batch gradient descent from zero init, no regularization.
    Prediction ties resolve to the lowest label id (so zero epochs predict
    label 0 everywhere).
    """
    x = np.asarray(train_embeddings, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes in training data")
    num_classes = int(classes.max()) + 1
    onehot = np.zeros((x.shape[0], num_classes))
    onehot[np.arange(x.shape[0]), y] = 1.0

    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    n = x.shape[0]
    for _ in range(epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= lr * (x.T @ delta)
        b -= lr * delta.sum(axis=0)

    test_logits = np.asarray(test_embeddings, dtype=np.float64) @ w + b
    predictions = np.argmax(test_logits, axis=1)  # argmax takes the first max
    return float(np.mean(predictions == np.asarray(test_labels)))


# ---------------------------------------------------------------------------
# algebraic identities on the unit sphere


@dataclass
class IdentityResiduals:
    """Residuals of the two similarity/distance identities.

    ``residual_inner_distance``: max |<z_i, z_j> - (1 - ||z_i - z_j||^2 / 2)|
    over pairs. ``residual_kernel_rel``: max relative gap between
    sum_j exp(<z_i, z_j>/tau) and exp(1/tau) sum_j exp(-||z_i - z_j||^2/(2 tau)).
    Both vanish on unit-norm rows.
    """

    residual_inner_distance: float
    residual_kernel_rel: float


def identity_checks(z: np.ndarray, tau: float) -> IdentityResiduals:
    z = np.asarray(z, dtype=np.float64)
    gram = z @ z.T
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    residual_a1 = float(np.max(np.abs(gram - (1.0 - 0.5 * d2))))

    lhs = np.exp(gram / tau).sum(axis=1)
    rhs = math.exp(1.0 / tau) * np.exp(-d2 / (2.0 * tau)).sum(axis=1)
    rel = np.abs(lhs - rhs) / np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1e-300)
    return IdentityResiduals(residual_a1, float(np.max(rel)))


# ---------------------------------------------------------------------------
# exports


def polar_export(embeddings_2d: np.ndarray, labels: np.ndarray,
                 reference="origin") -> list[tuple[float, float, int, bool]]:
    """(radius, angle, label, is_reference_class) rows sorted by radius.

    ``reference`` is either ``"origin"`` (the reference class is the label
    of the sample closest to the origin) or a sample index (coordinates are
    taken relative to that sample). Output is truncated to the closest 1000
    rows; angles lie in (-pi, pi].
    """
    e = np.asarray(embeddings_2d, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if e.ndim != 2 or e.shape[1] != 2:
        raise ValueError("polar_export expects 2-column embeddings")
    if reference == "origin":
        center = np.zeros(2)
        ref_label = int(labels[np.argmin(np.linalg.norm(e, axis=1))])
    else:
        idx = int(reference)
        center = e[idx]
        ref_label = int(labels[idx])
    rel = e - center
    radius = np.linalg.norm(rel, axis=1)
    angle = np.arctan2(rel[:, 1], rel[:, 0])
    angle[angle == -np.pi] = np.pi
    order = np.argsort(radius, kind="stable")[:min(1000, e.shape[0])]
    return [(float(radius[i]), float(angle[i]), int(labels[i]),
             bool(labels[i] == ref_label)) for i in order]


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top-2 principal axes of their covariance.

    Deterministic sign convention: each component's largest-magnitude entry
    is made positive. Returns (coords, components) with components as rows.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(x.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    comps = eigvecs[:, np.argsort(eigvals)[::-1][:2]].T
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return centered @ comps.T, comps
