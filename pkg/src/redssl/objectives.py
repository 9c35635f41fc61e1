"""Contrastive and non-contrastive losses with percentile re-weighting,
plus the optimizers that consume their gradients.

The contrastive loss follows the NT-Xent convention: for each anchor the
positive is its counterpart view and the denominator sums exp-similarities
to all other rows of the doubled batch (self excluded, positive included).
Re-weighting multiplies each positive term by

    w_i = 1 / percentile_j(exp(<r_i, r_j> / eta), k%),   j != i,

computed from the batch's representation vectors, which gives the loss a
gradient path into the encoder output that bypasses the projection head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardTrace

METHODS = ("infonce", "infonce_momentum_queue", "noncontrastive")


@dataclass
class LossConfig:
    """Hyperparameters shared by every loss variant.

    ``tau`` scales projection similarities, ``eta`` scales representation
    similarities inside the re-weighting term, and ``k_percent`` picks the
    nearest-rank percentile. ``detach_weights`` keeps the weight values but
    blocks their gradient path; ``include_self`` keeps the anchor's own
    exp(1/tau) term in the denominator; ``raw_representation_products``
    skips the normalization of representation rows inside the weights.
    """

    method: str = "infonce"
    tau: float = 0.5
    red_enabled: bool = False
    eta: float = 20.0
    k_percent: float = 95.0
    detach_weights: bool = False
    symmetrize: bool = True
    include_self: bool = False
    raw_representation_products: bool = False
    symmetrize_weights: bool = False

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 < self.k_percent <= 100.0:
            raise ValueError("k_percent must lie in (0, 100]")

    def to_dict(self) -> dict:
        return {
            "method": self.method, "tau": self.tau,
            "red_enabled": self.red_enabled, "eta": self.eta,
            "k_percent": self.k_percent, "detach_weights": self.detach_weights,
            "symmetrize": self.symmetrize, "include_self": self.include_self,
            "raw_representation_products": self.raw_representation_products,
            "symmetrize_weights": self.symmetrize_weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        cfg = cls(**{k: d[k] for k in cls().to_dict() if k in d})
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    """Scalar loss tensor plus its reported decomposition.

    ``alignment`` and ``uniformity`` are means over the anchor set (matching
    the mean-over-anchors ``total``), so for the plain contrastive loss
    ``total == -alignment + uniformity`` up to float rounding. ``weights``
    and ``selected_pair_indices`` are populated only when re-weighting is on.
    """

    total: Tensor
    alignment: float
    uniformity: float
    weight_term: float = 0.0
    weights: np.ndarray | None = None
    selected_pair_indices: np.ndarray | None = None

    @property
    def value(self) -> float:
        return float(self.total.values)


# ---------------------------------------------------------------------------
# alignment / uniformity terms


def alignment_term(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Sum over the batch of positive-pair similarities scaled by 1/tau."""
    return ad.tensor_sum(ad.dot_rows(z1, z2)) * (1.0 / tau)


def alignment_mean(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Mean-per-sample variant of ``alignment_term``, used for reporting."""
    return ad.tensor_mean(ad.dot_rows(z1, z2)) * (1.0 / tau)


def _logsumexp_rows(anchors: Tensor, others: list[tuple[Tensor, bool]],
                    tau: float) -> Tensor:
    """log sum_j exp(<anchor_i, other_j> / tau) per anchor row, as (n, 1).

    ``others`` pairs each block of rows with a flag telling whether the
    block's diagonal is the anchor itself and must be dropped.
    """
    tape = anchors.tape
    n = anchors.values.shape[0]
    total = None
    for block, drop_diag in others:
        sims = ad.matmul(anchors, block, transpose_b=True) * (1.0 / tau)
        e = sims.exp()
        if drop_diag:
            e = e * tape.constant(1.0 - np.eye(n))
        ones = tape.constant(np.ones((block.values.shape[0], 1)))
        rowsum = ad.matmul(e, ones)
        total = rowsum if total is None else total + rowsum
    return total.log()


def uniformity_term(z_all: Tensor, tau: float, exclude_self: bool = True) -> Tensor:
    """Sum over anchors of the log-sum-exp of pairwise similarities.

    ``z_all`` stacks every row the negative set ranges over (both views of
    the batch); with ``exclude_self`` each anchor's own row is dropped from
    its sum.
    """
    if z_all.values.shape[0] < 2:
        raise ad.ShapeError("uniformity_term needs at least 2 rows")
    return ad.tensor_sum(_logsumexp_rows(z_all, [(z_all, exclude_self)], tau))


def uniformity_mean(z_all: Tensor, tau: float, exclude_self: bool = True) -> Tensor:
    return uniformity_term(z_all, tau, exclude_self) * (1.0 / z_all.values.shape[0])


# ---------------------------------------------------------------------------
# re-weighting


@dataclass
class RedWeights:
    """Per-sample weights with their gradient-carrying tensors.

    ``neg_log_weights`` is the (n, 1) tensor of -log w_i that enters the
    losses; ``weights`` is the same information as w_i. ``indices`` holds
    the selected partner j* per sample.
    """

    weights: Tensor
    neg_log_weights: Tensor
    values: np.ndarray
    indices: np.ndarray


def red_weights(representations: Tensor, eta: float, k_percent: float,
                detach: bool = False, raw_products: bool = False) -> RedWeights:
    """Reciprocal nearest-rank percentile of exp(<r_i, r_j> / eta), j != i.

    Rows are L2-normalized before the products (unless ``raw_products``), so
    exp stays bounded by exp(1/eta). The selection is made per row over the
    n-1 candidates excluding self; gradient flows into r_i and the selected
    r_j* only, or nowhere when ``detach`` is set.
    """
    n = representations.values.shape[0]
    if n < 2:
        raise ad.ShapeError("red_weights needs a batch of at least 2")
    base = (representations if raw_products
            else ad.row_l2_normalize_safe(representations))
    if detach:
        base = ad.stop_gradient(base)

    sims = base.values @ base.values.T
    candidates = np.exp(sims / eta)[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    # vectorized nearest-rank selection, same semantics as percentile_select:
    # ceil(k/100 * (n-1))-th smallest, ties to the lowest candidate index
    rank = min(max(math.ceil(k_percent / 100.0 * (n - 1)), 1), n - 1)
    selected_values = np.sort(candidates, axis=1)[:, rank - 1]
    cand_idx = np.argmax(candidates == selected_values[:, None], axis=1)
    indices = np.where(cand_idx < np.arange(n), cand_idx, cand_idx + 1)
    representations.tape.record_branch("red_select", tuple(int(j) for j in indices))

    selector = np.zeros((n, n))
    selector[np.arange(n), indices] = 1.0
    partners = ad.matmul(representations.tape.constant(selector), base)
    neg_log_w = ad.dot_rows(base, partners) * (1.0 / eta)
    w = (-1.0 * neg_log_w).exp()
    return RedWeights(w, neg_log_w, w.values.ravel().copy(), indices)


def _pick_weights(trace1: ForwardTrace, trace2: ForwardTrace,
                  config: LossConfig) -> tuple[RedWeights, RedWeights | None]:
    w1 = red_weights(trace1.representation, config.eta, config.k_percent,
                     detach=config.detach_weights,
                     raw_products=config.raw_representation_products)
    w2 = None
    if config.symmetrize_weights:
        w2 = red_weights(trace2.representation, config.eta, config.k_percent,
                         detach=config.detach_weights,
                         raw_products=config.raw_representation_products)
    return w1, w2


def _weight_penalty(w1: RedWeights, w2: RedWeights | None) -> Tensor:
    """Mean of -log w_i over the batch (averaged across views if two sets)."""
    penalty = ad.tensor_mean(w1.neg_log_weights)
    if w2 is not None:
        penalty = (penalty + ad.tensor_mean(w2.neg_log_weights)) * 0.5
    return penalty


# ---------------------------------------------------------------------------
# losses


def _nt_xent(trace1: ForwardTrace, trace2: ForwardTrace, config: LossConfig,
             extra_negatives: np.ndarray | None = None,
             red: RedWeights | None = None,
             red2: RedWeights | None = None) -> LossBreakdown:
    z1, z2 = trace1.projection, trace2.projection
    n = z1.values.shape[0]
    if n < 2:
        raise ad.ShapeError("contrastive loss needs a batch of at least 2")
    tape = z1.tape
    tau = config.tau
    drop_self = not config.include_self

    extra = None
    if extra_negatives is not None and extra_negatives.shape[0] > 0:
        extra = tape.constant(extra_negatives)

    def anchor_losses(za, zb):
        # positive is the counterpart row; negatives are all other rows of
        # both views plus any queue entries
        pos = ad.dot_rows(za, zb) * (1.0 / tau)
        others = [(za, drop_self), (zb, False)]
        if extra is not None:
            others.append((extra, False))
        log_den = _logsumexp_rows(za, others, tau)
        return pos, log_den

    pos1, den1 = anchor_losses(z1, z2)
    losses = [den1 - pos1]
    pos_terms, den_terms = [pos1], [den1]
    if config.symmetrize:
        pos2, den2 = anchor_losses(z2, z1)
        losses.append(den2 - pos2)
        pos_terms.append(pos2)
        den_terms.append(den2)

    total = ad.tensor_sum(losses[0])
    for extra_loss in losses[1:]:
        total = total + ad.tensor_sum(extra_loss)
    n_anchors = n * len(losses)
    total = total * (1.0 / n_anchors)

    alignment = float(np.mean([t.values.mean() for t in pos_terms]))
    uniformity = float(np.mean([t.values.mean() for t in den_terms]))

    if red is None:
        return LossBreakdown(total, alignment, uniformity)

    penalty = _weight_penalty(red, red2)
    total = total + penalty
    return LossBreakdown(total, alignment, uniformity,
                         weight_term=float(penalty.values),
                         weights=red.values,
                         selected_pair_indices=red.indices)


def info_nce(trace1: ForwardTrace, trace2: ForwardTrace, config: LossConfig,
             extra_negatives: np.ndarray | None = None) -> LossBreakdown:
    """Plain contrastive loss, mean over anchors."""
    return _nt_xent(trace1, trace2, config, extra_negatives)


def red_info_nce(trace1: ForwardTrace, trace2: ForwardTrace, config: LossConfig,
                 extra_negatives: np.ndarray | None = None) -> LossBreakdown:
    """Contrastive loss with the percentile re-weighting penalty added.

    Per anchor this is -log w_i plus the plain per-anchor term; weights come
    from view-1 representations unless ``symmetrize_weights`` is set.
    """
    if not config.red_enabled:
        raise ValueError("red_info_nce requires red_enabled=true")
    w1, w2 = _pick_weights(trace1, trace2, config)
    return _nt_xent(trace1, trace2, config, extra_negatives, red=w1, red2=w2)


def noncontrastive_loss(trace1: ForwardTrace, trace2: ForwardTrace,
                        config: LossConfig) -> LossBreakdown:
    """Negative positive-pair similarity with a stopped second branch.

    Per sample: -<branch1_i, stop_gradient(z2_i)> / tau, symmetrized when
    configured; the gradient-carrying branch is the predictor output when a
    predictor is present. With ``red_enabled`` the -log w_i penalty is added
    (needs a batch of at least 2 to form the percentile).
    """
    z1, z2 = trace1.projection, trace2.projection
    n = z1.values.shape[0]
    tau = config.tau

    branch1 = trace1.predictor_out if trace1.predictor_out is not None else z1
    sim = ad.dot_rows(branch1, ad.stop_gradient(z2)) * (1.0 / tau)
    if config.symmetrize:
        branch2 = trace2.predictor_out if trace2.predictor_out is not None else z2
        sim = (sim + ad.dot_rows(branch2, ad.stop_gradient(z1)) * (1.0 / tau)) * 0.5

    total = -1.0 * ad.tensor_mean(sim)
    alignment = float(sim.values.mean())

    # uniformity is not part of this objective; measure it for reporting
    stacked = z1.tape.constant(np.vstack([z1.values, z2.values]))
    uniformity = float(uniformity_mean(stacked, tau).values)

    if not config.red_enabled:
        return LossBreakdown(total, alignment, uniformity)
    if n < 2:
        raise ad.ShapeError("re-weighting needs a batch of at least 2")
    w1, w2 = _pick_weights(trace1, trace2, config)
    penalty = _weight_penalty(w1, w2)
    total = total + penalty
    return LossBreakdown(total, alignment, uniformity,
                         weight_term=float(penalty.values),
                         weights=w1.values,
                         selected_pair_indices=w1.indices)


def compute_loss(trace1: ForwardTrace, trace2: ForwardTrace, config: LossConfig,
                 extra_negatives: np.ndarray | None = None) -> LossBreakdown:
    """Dispatch on ``config.method`` (and ``red_enabled``)."""
    config.validate()
    if config.method == "noncontrastive":
        return noncontrastive_loss(trace1, trace2, config)
    if config.red_enabled:
        return red_info_nce(trace1, trace2, config, extra_negatives)
    return info_nce(trace1, trace2, config, extra_negatives)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerSettings:
    algo: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.algo not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algo!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {"algo": self.algo, "lr": self.lr, "momentum": self.momentum,
                "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSettings":
        kwargs = {k: d[k] for k in ("algo", "lr", "momentum", "eps", "weight_decay")
                  if k in d}
        if "betas" in d:
            kwargs["betas"] = tuple(d["betas"])
        settings = cls(**kwargs)
        settings.validate()
        return settings


class Optimizer:
    """SGD (optional momentum) or Adam over a fixed list of parameter arrays.

    ``step`` updates the arrays in place; state slots are keyed by position,
    so callers must pass parameters in a stable order.
    """

    def __init__(self, settings: OptimizerSettings):
        settings.validate()
        self.settings = settings
        self.step_count = 0
        self._velocity: list[np.ndarray] | None = None
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params and grads must pair up")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ad.ShapeError(
                    f"gradient shape {g.shape} does not match parameter {p.shape}")
        s = self.settings
        self.step_count += 1
        if s.weight_decay:
            grads = [g + s.weight_decay * p for p, g in zip(params, grads)]
        if s.algo == "sgd":
            if s.momentum:
                if self._velocity is None:
                    self._velocity = [np.zeros_like(p) for p in params]
                for p, g, v in zip(params, grads, self._velocity):
                    v *= s.momentum
                    v += g
                    p -= s.lr * v
            else:
                for p, g in zip(params, grads):
                    p -= s.lr * g
            return
        # adam with standard bias correction
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        b1, b2 = s.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)
