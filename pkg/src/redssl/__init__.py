"""redssl: a desk-scale self-supervised learning lab for vector data.

Contrastive and non-contrastive training on a small tape-based autodiff
engine, percentile re-weighting of the positive alignment term, and a
diagnostic probe suite (layer-wise alignment/uniformity, neighborhood
entropy, augmentation robustness, error-split analysis, kNN and linear
evaluation).
"""

from .autodiff import (DomainError, ShapeError, Tape, Tensor, dot_rows,
                       finite_difference_check, percentile_select,
                       row_l2_normalize, stop_gradient)
from .data import (CsvFormatError, Dataset, GaussianMixtureSpec,
                   MixtureComponent, ViewPairBatch, augment_gaussian,
                   augment_unseen, generate_mixture, load_csv, make_batches,
                   save_csv, train_test_split)
from .model import (CheckpointError, ForwardTrace, MlpSpec, SslModel,
                    load_checkpoint, save_checkpoint)
from .objectives import (LossBreakdown, LossConfig, Optimizer,
                         OptimizerSettings, alignment_term, compute_loss,
                         info_nce, noncontrastive_loss, red_info_nce,
                         red_weights, uniformity_term)
from .probes import (EntropyResult, IdentityResiduals, LayerMetrics,
                     LayerwiseResult, augmentation_robustness,
                     correlation_with_error, entropy_estimate,
                     error_rate_split, identity_checks, knn_classify,
                     knn_predict, layerwise_metrics, linear_probe,
                     mean_pairwise_similarity, pca_2d, polar_export)
from .runner import (DataConfig, MetricsRecord, ProbeConfig, ProbeReport,
                     TrainConfig, TrainResult, build_probe_report, run_grid,
                     run_gradient_check_suite, run_probe, run_training)

__version__ = "0.1.0"
