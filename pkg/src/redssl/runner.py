"""Configuration, the training loop, probe orchestration, and the
gradient-check suite.

A run is fully determined by (config, seed): data generation, shuffling,
augmentation, and initialization all draw from named sub-streams of the
config seed, and persisted outputs use canonical serialization, so two runs
of the same config produce byte-identical files.
"""

from __future__ import annotations

import copy
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import jsonio
from . import objectives
from . import probes
from .model import ForwardTrace, MlpSpec, SslModel, load_checkpoint, save_checkpoint
from .objectives import LossConfig, Optimizer, OptimizerSettings

CONFIG_VERSION = 1
SEED_ENV_VAR = "RED_SSL_SEED"

# the bundled three-component benchmark mixture
DEFAULT_MIXTURE_MEANS = [[0.5, 0.7], [3.5, 0.7], [2.0, 3.3]]


@dataclass
class DataConfig:
    """Either a mixture to generate or a CSV to load."""

    kind: str = "mixture"  # "mixture" | "csv"
    means: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_MIXTURE_MEANS))
    covariances: list | None = None  # None = identity per component
    samples_per_class: int = 1000
    path: str | None = None
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.kind not in ("mixture", "csv"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ValueError("csv data needs a path")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "means": self.means,
                "covariances": self.covariances,
                "samples_per_class": self.samples_per_class,
                "path": self.path, "test_fraction": self.test_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        cfg = cls(**{k: d[k] for k in cls().to_dict() if k in d})
        cfg.validate()
        return cfg

    def mixture_spec(self) -> data_mod.GaussianMixtureSpec:
        dim = len(self.means[0])
        covs = self.covariances or [np.eye(dim).tolist()] * len(self.means)
        components = [data_mod.MixtureComponent(np.array(m), np.array(c), i)
                      for i, (m, c) in enumerate(zip(self.means, covs))]
        return data_mod.GaussianMixtureSpec(components, self.samples_per_class)

    def load(self, seed: int) -> data_mod.Dataset:
        if self.kind == "csv":
            return data_mod.load_csv(self.path)
        return data_mod.generate_mixture(self.mixture_spec(), seed)


@dataclass
class ProbeConfig:
    bandwidth: float = 0.1
    knn_k: int = 5
    linear_epochs: int = 500
    linear_lr: float = 0.1
    max_samples: int = 512
    augmentations: list = field(
        default_factory=lambda: copy.deepcopy(data_mod.DEFAULT_UNSEEN_CATALOG))

    def to_dict(self) -> dict:
        return {"bandwidth": self.bandwidth, "knn_k": self.knn_k,
                "linear_epochs": self.linear_epochs, "linear_lr": self.linear_lr,
                "max_samples": self.max_samples,
                "augmentations": [list(a) for a in self.augmentations]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        kwargs = {k: d[k] for k in ("bandwidth", "knn_k", "linear_epochs",
                                    "linear_lr", "max_samples") if k in d}
        if "augmentations" in d:
            kwargs["augmentations"] = [tuple(a) for a in d["augmentations"]]
        return cls(**kwargs)


@dataclass
class TrainConfig:
    """Everything a run needs; serializable to/from a single JSON document."""

    data: DataConfig = field(default_factory=DataConfig)
    model: MlpSpec = field(default_factory=lambda: MlpSpec(
        input_dim=2, encoder_layers=[10, 10, 10], projector_layers=[2]))
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    epochs: int = 200
    batch_size: int = 256
    sigma_eps: float = 0.1
    seed: int = 0
    eval_every: int = 20
    output_dir: str = "runs/default"
    momentum_coefficient: float = 0.99
    queue_capacity: int = 1024

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.loss.validate()
        self.optimizer.validate()
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be non-negative")
        contrastive = self.loss.method in ("infonce", "infonce_momentum_queue")
        if contrastive and self.batch_size < 2:
            raise ValueError("contrastive methods need batch_size >= 2")
        if self.loss.method == "infonce_momentum_queue" and self.queue_capacity < 1:
            raise ValueError("queue capacity must be at least 1")

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "probe": self.probe.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "sigma_eps": self.sigma_eps,
            "eval_every": self.eval_every,
            "output_dir": self.output_dir,
            "momentum_coefficient": self.momentum_coefficient,
            "queue_capacity": self.queue_capacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        if "seed" in d and d["seed"] is not None:
            cfg.seed = int(d["seed"])
        elif os.environ.get(SEED_ENV_VAR):
            cfg.seed = int(os.environ[SEED_ENV_VAR])
        if "data" in d:
            cfg.data = DataConfig.from_dict(d["data"])
        if "model" in d:
            cfg.model = MlpSpec.from_dict(d["model"])
        if "loss" in d:
            cfg.loss = LossConfig.from_dict(d["loss"])
        if "optimizer" in d:
            cfg.optimizer = OptimizerSettings.from_dict(d["optimizer"])
        if "probe" in d:
            cfg.probe = ProbeConfig.from_dict(d["probe"])
        for key in ("epochs", "batch_size", "eval_every",
                    "momentum_coefficient", "queue_capacity"):
            if key in d:
                setattr(cfg, key, type(getattr(cfg, key))(d[key]))
        if "sigma_eps" in d:
            cfg.sigma_eps = float(d["sigma_eps"])
        if "output_dir" in d:
            cfg.output_dir = str(d["output_dir"])
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path: str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(jsonio.loads(fh.read()))


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``--set dotted.key=value`` overrides to a config document.

    Values parse as JSON when possible, otherwise they stay strings.
    """
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = jsonio.loads(raw)
        except ValueError:
            value = raw
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return doc


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    alignment: float
    uniformity: float
    weight_term: float
    knn_accuracy: float
    elapsed_seconds: float

    def to_dict(self) -> dict:
        # elapsed time is deliberately left out of the persisted line so two
        # identical runs write byte-identical logs
        return {"epoch": self.epoch, "loss": self.loss,
                "alignment": self.alignment, "uniformity": self.uniformity,
                "weight_term": self.weight_term,
                "knn_accuracy": self.knn_accuracy}


@dataclass
class TrainResult:
    model: SslModel
    metrics: list[MetricsRecord]
    checkpoint_path: str
    metrics_path: str
    train_set: data_mod.Dataset
    test_set: data_mod.Dataset

    @property
    def final_knn_accuracy(self) -> float:
        return self.metrics[-1].knn_accuracy


def _held_out_knn(model: SslModel, train_set, test_set, k: int) -> float:
    train_repr, _ = model.embed(train_set.points)
    test_repr, _ = model.embed(test_set.points)
    return probes.knn_classify(train_repr, train_set.labels,
                               test_repr, test_set.labels, k)


def run_training(config: TrainConfig, quiet: bool = True) -> TrainResult:
    """Train per config and write checkpoint + JSONL metrics to output_dir.

    Per batch: two augmented views, forward, loss (re-weighting inside the
    graph when enabled), backward, optimizer step, then momentum and queue
    updates for the momentum method. Held-out kNN accuracy is logged every
    ``eval_every`` epochs and at the end. A non-finite loss aborts the run
    with the failing epoch/batch named.
    """
    config.validate()
    use_momentum = config.loss.method == "infonce_momentum_queue"
    dataset = config.data.load(config.seed)
    train_set, test_set = data_mod.train_test_split(
        dataset, config.data.test_fraction, config.seed)

    model = SslModel.initialize(
        config.model, config.seed, with_momentum=use_momentum,
        queue_capacity=config.queue_capacity if use_momentum else None)
    optimizer = Optimizer(config.optimizer)
    param_names = model.parameter_names()

    os.makedirs(config.output_dir, exist_ok=True)
    metrics_path = os.path.join(config.output_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(config.output_dir, "checkpoint.json")
    with open(os.path.join(config.output_dir, "resolved_config.json"),
              "w", encoding="utf-8", newline="\n") as fh:
        fh.write(jsonio.dumps(config.to_dict()) + "\n")

    records: list[MetricsRecord] = []
    start = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as log:
        for epoch in range(1, config.epochs + 1):
            batches = data_mod.make_batches(
                train_set, config.batch_size, config.sigma_eps,
                config.seed, epoch=epoch)
            epoch_stats = np.zeros(4)
            for batch_idx, batch in enumerate(batches):
                tape = ad.Tape()
                trace1 = model.forward(tape, batch.anchors)
                trace2 = model.forward(tape, batch.positives,
                                       use_momentum=use_momentum)
                extra = model.queue_negatives() if use_momentum else None
                breakdown = objectives.compute_loss(
                    trace1, trace2, config.loss, extra_negatives=extra)
                if not np.isfinite(breakdown.value):
                    raise RuntimeError(
                        f"non-finite loss {breakdown.value} at epoch {epoch}, "
                        f"batch {batch_idx}")
                tape.backward(breakdown.total)
                grads = model.bound_gradients()
                flat_params = [model.params[n][key]
                               for n in param_names for key in ("w", "b")]
                flat_grads = [grads[n][key]
                              for n in param_names for key in ("w", "b")]
                optimizer.step(flat_params, flat_grads)
                if use_momentum:
                    model.momentum_update(config.momentum_coefficient)
                    model.queue_push(trace2.projection.values)
                epoch_stats += (breakdown.value, breakdown.alignment,
                                breakdown.uniformity, breakdown.weight_term)
            epoch_stats /= max(len(batches), 1)

            if epoch % config.eval_every == 0 or epoch == config.epochs:
                knn = _held_out_knn(model, train_set, test_set, config.probe.knn_k)
                record = MetricsRecord(epoch, *epoch_stats, knn,
                                       time.perf_counter() - start)
                records.append(record)
                log.write(jsonio.dumps(record.to_dict()) + "\n")
                log.flush()
                if not quiet:
                    print(f"epoch {epoch:4d}  loss {record.loss:.4f}  "
                          f"knn {record.knn_accuracy:.4f}  "
                          f"[{record.elapsed_seconds:.1f}s]")

    save_checkpoint(model, checkpoint_path)
    return TrainResult(model, records, checkpoint_path, metrics_path,
                       train_set, test_set)


# ---------------------------------------------------------------------------
# probe orchestration


@dataclass
class ProbeReport:
    """Aggregated diagnostics for one checkpoint on one dataset."""

    layer_metrics: probes.LayerwiseResult
    entropy_representation: probes.EntropyResult
    entropy_projection: probes.EntropyResult
    knn_accuracy_representation: float
    knn_accuracy_projection: float
    linear_accuracy_representation: float
    linear_accuracy_projection: float
    correlation_representation: float | None
    correlation_projection: float | None
    error_split_representation: tuple[float, float] | None
    error_split_projection: tuple[float, float] | None
    augmentation_table: dict[str, tuple[float, float]]
    identity_residuals: probes.IdentityResiduals
    parameter_std: list[tuple[str, float]]

    def to_dict(self) -> dict:
        return {
            "layer_metrics": [
                {"layer": m.layer_name, "alignment": m.alignment,
                 "uniformity": m.uniformity}
                for m in self.layer_metrics.layers],
            "encoder_delta_alignment": self.layer_metrics.encoder_delta_alignment,
            "encoder_delta_uniformity": self.layer_metrics.encoder_delta_uniformity,
            "projector_delta_alignment": self.layer_metrics.projector_delta_alignment,
            "projector_delta_uniformity": self.layer_metrics.projector_delta_uniformity,
            "entropy_representation": self.entropy_representation.entropy,
            "entropy_representation_skipped": self.entropy_representation.skipped,
            "entropy_projection": self.entropy_projection.entropy,
            "entropy_projection_skipped": self.entropy_projection.skipped,
            "knn_accuracy_representation": self.knn_accuracy_representation,
            "knn_accuracy_projection": self.knn_accuracy_projection,
            "linear_accuracy_representation": self.linear_accuracy_representation,
            "linear_accuracy_projection": self.linear_accuracy_projection,
            "correlation_representation": self.correlation_representation,
            "correlation_projection": self.correlation_projection,
            "error_split_representation": self.error_split_representation,
            "error_split_projection": self.error_split_projection,
            "augmentation_table": {k: list(v)
                                   for k, v in self.augmentation_table.items()},
            "identity_residual_inner_distance":
                self.identity_residuals.residual_inner_distance,
            "identity_residual_kernel_rel":
                self.identity_residuals.residual_kernel_rel,
            "parameter_std": {name: std for name, std in self.parameter_std},
        }


def build_probe_report(model: SslModel, train_set: data_mod.Dataset,
                       test_set: data_mod.Dataset, config: TrainConfig) -> ProbeReport:
    pc = config.probe
    train_repr, train_proj = model.embed(train_set.points)
    test_repr, test_proj = model.embed(test_set.points)

    layer_metrics = probes.layerwise_metrics(
        model, test_set, config.loss.tau, config.sigma_eps, config.seed,
        max_samples=pc.max_samples)

    entropy_repr = probes.entropy_estimate(test_repr, test_set.labels, pc.bandwidth)
    entropy_proj = probes.entropy_estimate(test_proj, test_set.labels, pc.bandwidth)

    knn_repr = probes.knn_classify(train_repr, train_set.labels,
                                   test_repr, test_set.labels, pc.knn_k)
    knn_proj = probes.knn_classify(train_proj, train_set.labels,
                                   test_proj, test_set.labels, pc.knn_k)
    linear_repr = probes.linear_probe(train_repr, train_set.labels,
                                      test_repr, test_set.labels,
                                      pc.linear_epochs, pc.linear_lr)
    linear_proj = probes.linear_probe(train_proj, train_set.labels,
                                      test_proj, test_set.labels,
                                      pc.linear_epochs, pc.linear_lr)

    # downstream misclassification labels come from the representation-based
    # kNN on the held-out split
    predictions = probes.knn_predict(train_repr, train_set.labels, test_repr, pc.knn_k)
    errors = (predictions != test_set.labels).astype(np.float64)
    s_repr = probes.mean_pairwise_similarity(test_repr)
    s_proj = probes.mean_pairwise_similarity(test_proj)

    def maybe(fn, *args):
        try:
            return fn(*args)
        except ValueError:
            return None

    correlation_repr = maybe(probes.correlation_with_error, s_repr, errors)
    correlation_proj = maybe(probes.correlation_with_error, s_proj, errors)
    split_repr = maybe(probes.error_rate_split, s_repr, errors)
    split_proj = maybe(probes.error_rate_split, s_proj, errors)

    augmentation_table = probes.augmentation_robustness(
        model, test_set, pc.augmentations, config.seed, max_samples=pc.max_samples)
    identities = probes.identity_checks(test_proj, config.loss.tau)

    return ProbeReport(layer_metrics, entropy_repr, entropy_proj,
                       knn_repr, knn_proj, linear_repr, linear_proj,
                       correlation_repr, correlation_proj,
                       split_repr, split_proj,
                       augmentation_table, identities,
                       model.parameter_std_profile())


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def run_probe(checkpoint_path: str, config: TrainConfig,
              out_dir: str) -> ProbeReport:
    """Load a checkpoint, probe it on the config's dataset split, and write
    the report JSON plus plot-ready CSV side files."""
    model = load_checkpoint(checkpoint_path)
    dataset = config.data.load(config.seed)
    train_set, test_set = data_mod.train_test_split(
        dataset, config.data.test_fraction, config.seed)
    report = build_probe_report(model, train_set, test_set, config)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "probe_report.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(jsonio.dumps(report.to_dict()) + "\n")

    _write_csv(os.path.join(out_dir, "layer_metrics.csv"),
               ["layer", "alignment", "uniformity"],
               [(m.layer_name, format(m.alignment, ".17g"),
                 format(m.uniformity, ".17g"))
                for m in report.layer_metrics.layers])
    _write_csv(os.path.join(out_dir, "augmentation_table.csv"),
               ["augmentation", "representation_cosine", "projection_cosine"],
               [(name, format(r, ".17g"), format(p, ".17g"))
                for name, (r, p) in report.augmentation_table.items()])
    _write_csv(os.path.join(out_dir, "parameter_std.csv"),
               ["layer", "std"],
               [(name, format(std, ".17g")) for name, std in report.parameter_std])

    test_repr, test_proj = model.embed(test_set.points)
    proj2d = test_proj if test_proj.shape[1] == 2 else probes.pca_2d(test_proj)[0]
    repr2d = test_repr if test_repr.shape[1] == 2 else probes.pca_2d(test_repr)[0]
    for tag, coords in (("projection", proj2d), ("representation", repr2d)):
        rows = probes.polar_export(coords, test_set.labels)
        _write_csv(os.path.join(out_dir, f"polar_{tag}.csv"),
                   ["radius", "angle", "label", "is_reference_class"],
                   [(format(r, ".17g"), format(a, ".17g"), label, int(ref))
                    for r, a, label, ref in rows])
    return report


# ---------------------------------------------------------------------------
# gradient-check suite


def _synthetic_traces(tape: ad.Tape, x: ad.Tensor, n: int, d: int):
    """Split a (2n, d) leaf into two views and wrap them as traces whose
    representation is the raw view and whose projection is its
    row-normalized image."""
    # matmul with constant selectors slices the leaf without a gather op
    top = tape.constant(np.hstack([np.eye(n), np.zeros((n, n))]))
    bottom = tape.constant(np.hstack([np.zeros((n, n)), np.eye(n)]))
    v1 = ad.matmul(top, x)
    v2 = ad.matmul(bottom, x)

    def trace(view):
        return ForwardTrace(
            inputs=view, encoder_pre=[], encoder_post=[],
            projector_pre=[], projector_post=[],
            representation=view, projection=ad.row_l2_normalize(view))

    return trace(v1), trace(v2)


@dataclass
class GradCheckSummary:
    max_rel_error: float
    per_case: dict[str, float]
    skipped: int
    elapsed_seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def run_gradient_check_suite(seeds: int = 20, batch: int = 8, dim: int = 4,
                             eps: float = 1e-5) -> GradCheckSummary:
    """Central-difference verification of every differentiable primitive and
    of the plain and re-weighted contrastive losses.

    Random inputs per seed; coordinates that cross a relu kink or flip a
    percentile selection are detected via branch signatures and skipped.
    """
    start = time.perf_counter()
    worst: dict[str, float] = {}
    skipped = 0

    def check(name, f, x0):
        nonlocal skipped
        result = ad.finite_difference_check(f, x0, eps=eps)
        skipped += result.n_skipped
        worst[name] = max(worst.get(name, 0.0), result.max_rel_error)

    for seed in range(seeds):
        rng = np.random.Generator(np.random.Philox(key=seed))
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 3))
        c = rng.standard_normal((3, 4))

        check("matmul",
              lambda t, x: ad.matmul(x, t.constant(b)).sum(), a)
        check("matmul_transpose_b",
              lambda t, x: ad.matmul(x, t.constant(c), transpose_b=True).sum(), a)
        row = rng.standard_normal((1, 4))
        check("add", lambda t, x: (x + t.constant(c)).sum(), a)
        check("add_broadcast", lambda t, x: (x + t.constant(row)).sum(), a)
        check("sub", lambda t, x: (x - t.constant(c)).mean(), a)
        check("mul", lambda t, x: (x * t.constant(c)).sum(), a)
        check("scale", lambda t, x: (2.5 * x).sum(), a)
        check("relu", lambda t, x: x.relu().sum(), a)
        check("exp", lambda t, x: x.exp().sum(), 0.5 * a)
        check("log", lambda t, x: x.log().sum(), np.abs(a) + 0.5)
        check("sum", lambda t, x: x.sum(), a)
        check("mean", lambda t, x: x.mean(), a)
        check("row_l2_normalize",
              lambda t, x: (ad.row_l2_normalize(x)
                            * t.constant(c)).sum(), a + 2.0)
        check("dot_rows",
              lambda t, x: ad.dot_rows(x, t.constant(c)).sum(), a)
        check("dot_rows_both",
              lambda t, x: ad.dot_rows(x, x).sum(), a)
        check("percentile_select",
              lambda t, x: ad.percentile_select(x, 40.0 + 55.0 * (seed / seeds))[0],
              rng.standard_normal(11))

        views = rng.standard_normal((2 * batch, dim))
        plain = LossConfig(method="infonce", tau=0.5, symmetrize=True)
        red = LossConfig(method="infonce", tau=0.5, red_enabled=True,
                         eta=20.0, k_percent=95.0, symmetrize=True)

        def loss_fn(cfg):
            def f(tape, x):
                t1, t2 = _synthetic_traces(tape, x, batch, dim)
                return objectives.compute_loss(t1, t2, cfg).total
            return f

        check("info_nce", loss_fn(plain), views)
        check("red_info_nce", loss_fn(red), views)

    overall = max(worst.values())
    return GradCheckSummary(overall, worst, skipped,
                            time.perf_counter() - start)


# ---------------------------------------------------------------------------
# (eta, k) grid helper


def run_grid(base_config: TrainConfig, etas: list[float],
             k_percents: list[float]) -> list[dict]:
    """Train the re-weighted contrastive model over an (eta, k) grid and
    collect final held-out kNN accuracies."""
    rows = []
    for eta in etas:
        for k in k_percents:
            config = TrainConfig.from_dict(base_config.to_dict())
            config.loss.red_enabled = True
            config.loss.eta = float(eta)
            config.loss.k_percent = float(k)
            config.output_dir = os.path.join(
                base_config.output_dir, f"grid_eta{eta}_k{k}")
            result = run_training(config)
            rows.append({"eta": float(eta), "k_percent": float(k),
                         "knn_accuracy": result.final_knn_accuracy})
    return rows
