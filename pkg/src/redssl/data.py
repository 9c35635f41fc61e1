"""Synthetic mixture data, view-pair augmentation, batching, and CSV I/O.

Every operation here is a pure function of its inputs and a seed; see
``redssl.seeding`` for how seeds split into independent streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import stream


class CsvFormatError(ValueError):
    """A CSV file does not match the expected ``label,f0,f1,...`` layout."""


@dataclass
class MixtureComponent:
    mean: np.ndarray
    covariance: np.ndarray
    label: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)


@dataclass
class GaussianMixtureSpec:
    """Per-class Gaussian components plus a per-class sample count."""

    components: list[MixtureComponent]
    samples_per_class: int

    def validate(self) -> None:
        if not self.components:
            raise ValueError("mixture spec needs at least one component")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        dim = self.components[0].mean.shape[0]
        for c in self.components:
            if c.mean.shape != (dim,):
                raise ValueError("all component means must share one dimensionality")
            if c.covariance.shape != (dim, dim):
                raise ValueError(f"covariance for label {c.label} must be {dim}x{dim}")
            _psd_factor(c.covariance, c.label)


def _psd_factor(cov: np.ndarray, label: int) -> np.ndarray:
    """Cholesky factor of a covariance, falling back to an eigendecomposition
    square root for semi-definite matrices (e.g. the zero matrix)."""
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError(f"covariance for label {label} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(cov)
        if np.min(eigvals) < -1e-10:
            raise ValueError(
                f"covariance for label {label} is not positive semi-definite")
        return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


@dataclass
class Dataset:
    """Labeled points: an n x d matrix plus n integer class ids."""

    points: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2:
            raise ValueError("points must be a 2-D matrix")
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels disagree on sample count")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class ViewPairBatch:
    """Two stochastically augmented views of the same source rows."""

    anchors: np.ndarray
    positives: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise ValueError("anchors and positives must have identical shape")

    def __len__(self) -> int:
        return self.anchors.shape[0]


def generate_mixture(spec: GaussianMixtureSpec, seed: int) -> Dataset:
    """Draw samples_per_class points from each component, labeled by class.

    Sampling transforms standard normals by each component's PSD factor, so
    the same seed always yields the bitwise-identical dataset.
    """
    spec.validate()
    blocks, labels = [], []
    for idx, comp in enumerate(spec.components):
        factor = _psd_factor(comp.covariance, comp.label)
        rng = stream(seed, "mixture", idx)
        z = rng.standard_normal((spec.samples_per_class, comp.mean.shape[0]))
        blocks.append(comp.mean + z @ factor.T)
        labels.append(np.full(spec.samples_per_class, comp.label, dtype=np.int64))
    return Dataset(np.concatenate(blocks), np.concatenate(labels), name="mixture")


def augment_gaussian(points: np.ndarray, sigma_eps: float, seed: int,
                     *labels) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise with std sigma_eps per coordinate.

    Extra ``labels`` select independent sub-streams (e.g. view id, epoch).
    """
    if sigma_eps < 0:
        raise ValueError("sigma_eps must be non-negative")
    points = np.asarray(points, dtype=np.float64)
    if sigma_eps == 0.0:
        return points.copy()
    rng = stream(seed, "augment", *labels)
    return points + sigma_eps * rng.standard_normal(points.shape)


UNSEEN_KINDS = ("rotate2d", "uniform_scale", "coordinate_dropout", "gaussian_noise")


def augment_unseen(points: np.ndarray, kind: str, params: dict,
                   seed: int) -> np.ndarray:
    """Apply one transform from the probe catalog of held-out augmentations.

    Kinds: ``rotate2d`` (exact planar rotation of the first two coordinates,
    ``angle_degrees``), ``uniform_scale`` (``factor``), ``coordinate_dropout``
    (``probability``, dropped entries set to 0), and ``gaussian_noise``
    (``sigma``, meant to be larger than the training noise).
    """
    points = np.asarray(points, dtype=np.float64)
    if kind == "rotate2d":
        theta = math.radians(float(params["angle_degrees"]))
        if points.shape[1] < 2:
            raise ValueError("rotate2d needs at least two coordinates")
        out = points.copy()
        c, s = math.cos(theta), math.sin(theta)
        x, y = points[:, 0], points[:, 1]
        out[:, 0] = c * x - s * y
        out[:, 1] = s * x + c * y
        return out
    if kind == "uniform_scale":
        factor = float(params["factor"])
        if factor == 0.0:
            raise ValueError("uniform_scale factor must be nonzero")
        return points * factor
    if kind == "coordinate_dropout":
        p = float(params["probability"])
        if not 0.0 <= p <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        rng = stream(seed, "dropout")
        keep = rng.random(points.shape) >= p
        return np.where(keep, points, 0.0)
    if kind == "gaussian_noise":
        sigma = float(params["sigma"])
        return augment_gaussian(points, sigma, seed, "unseen")
    raise ValueError(f"unknown augmentation kind {kind!r}")


# default probe catalog; parameters were chosen to keep the transforms
# label-preserving at the scale of the bundled mixture data
DEFAULT_UNSEEN_CATALOG: list[tuple[str, str, dict]] = [
    ("rotate2d_30", "rotate2d", {"angle_degrees": 30.0}),
    ("uniform_scale_1.5", "uniform_scale", {"factor": 1.5}),
    ("coordinate_dropout_0.25", "coordinate_dropout", {"probability": 0.25}),
    ("gaussian_noise_0.5", "gaussian_noise", {"sigma": 0.5}),
]


def make_batches(dataset: Dataset, batch_size: int, sigma_eps: float,
                 seed: int, epoch: int = 0) -> list[ViewPairBatch]:
    """Shuffle once per epoch and pair each batch with two independent
    augmentations. Trailing batches smaller than 2 are dropped (a contrastive
    loss has no negatives without at least two samples)."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    n = len(dataset)
    order = stream(seed, "shuffle", epoch).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:
            break
        rows = dataset.points[idx]
        batches.append(ViewPairBatch(
            anchors=augment_gaussian(rows, sigma_eps, seed, "view1", epoch, start),
            positives=augment_gaussian(rows, sigma_eps, seed, "view2", epoch, start),
            source_indices=idx,
        ))
    return batches


def train_test_split(dataset: Dataset, test_fraction: float,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; the first (1 - test_fraction) goes to train."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(dataset)
    order = stream(seed, "split").permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (Dataset(dataset.points[train_idx], dataset.labels[train_idx],
                    name=f"{dataset.name}-train"),
            Dataset(dataset.points[test_idx], dataset.labels[test_idx],
                    name=f"{dataset.name}-test"))


# ---------------------------------------------------------------------------
# CSV interchange: header `label,f0,f1,...` (or `f0,f1,...` for bare
# matrices), UTF-8, `\n` endings, floats written with 17 significant digits
# so a round trip is exact.


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_csv(data, path: str) -> None:
    """Write a Dataset (with a label column) or a bare matrix to CSV."""
    if isinstance(data, Dataset):
        header = ["label"] + [f"f{j}" for j in range(data.dim)]
        rows = ([str(int(label))] + [_fmt(v) for v in row]
                for label, row in zip(data.labels, data.points))
    else:
        matrix = np.asarray(data, dtype=np.float64)
        header = [f"f{j}" for j in range(matrix.shape[1])]
        rows = ([_fmt(v) for v in row] for row in matrix)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def load_csv(path: str) -> Dataset:
    """Read a labeled CSV back into a Dataset.

    Malformed rows raise ``CsvFormatError`` naming the 1-based file line.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CsvFormatError(f"{path}: no data rows")
    header = lines[0].split(",")
    if header[0] != "label" or len(header) < 2:
        raise CsvFormatError(
            f"{path}: line 1: expected header 'label,f0,f1,...', got {lines[0]!r}")
    width = len(header)
    labels, points = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise CsvFormatError(
                f"{path}: line {lineno}: expected {width} columns, got {len(cells)}")
        try:
            labels.append(int(cells[0]))
            points.append([float(c) for c in cells[1:]])
        except ValueError as e:
            raise CsvFormatError(f"{path}: line {lineno}: non-numeric cell ({e})") from e
    if not points:
        raise CsvFormatError(f"{path}: no data rows")
    return Dataset(np.array(points), np.array(labels), name=path)
