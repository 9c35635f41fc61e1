"""MLP encoder + projection head with optional predictor, momentum copy,
and negatives queue.

The encoder is a stack of linear layers with ReLU after each; the projector
is a stack with ReLU between layers and a linear final layer whose output is
row-normalized. Forward passes run on an autodiff tape and keep every
intermediate so the probes can inspect any layer.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import jsonio
from .seeding import stream

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its spec."""


@dataclass
class MlpSpec:
    """Layer widths for encoder, projector, and the optional predictor."""

    input_dim: int
    encoder_layers: list[int]
    projector_layers: list[int]
    predictor_layers: list[int] | None = None

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be at least 1")
        if not self.encoder_layers or not self.projector_layers:
            raise ValueError("encoder and projector each need at least one layer")
        for width in (*self.encoder_layers, *self.projector_layers,
                      *(self.predictor_layers or [])):
            if width < 1:
                raise ValueError("all layer widths must be at least 1")

    def layer_plan(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every linear layer in storage order:
        encoder, then projector, then predictor."""
        plan = []
        fan_in = self.input_dim
        for i, width in enumerate(self.encoder_layers):
            plan.append((f"encoder.{i}", fan_in, width))
            fan_in = width
        for i, width in enumerate(self.projector_layers):
            plan.append((f"projector.{i}", fan_in, width))
            fan_in = width
        for i, width in enumerate(self.predictor_layers or []):
            plan.append((f"predictor.{i}", fan_in, width))
            fan_in = width
        return plan

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "encoder_layers": list(self.encoder_layers),
            "projector_layers": list(self.projector_layers),
            "predictor_layers": (list(self.predictor_layers)
                                 if self.predictor_layers else None),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        spec = cls(input_dim=int(d["input_dim"]),
                   encoder_layers=[int(w) for w in d["encoder_layers"]],
                   projector_layers=[int(w) for w in d["projector_layers"]],
                   predictor_layers=([int(w) for w in d["predictor_layers"]]
                                     if d.get("predictor_layers") else None))
        spec.validate()
        return spec


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass.

    ``representation`` is the raw encoder output consumed downstream;
    ``projection`` is the row-normalized projector output consumed by the
    pre-training losses.
    """

    inputs: ad.Tensor
    encoder_pre: list[ad.Tensor]
    encoder_post: list[ad.Tensor]
    projector_pre: list[ad.Tensor]
    projector_post: list[ad.Tensor]
    representation: ad.Tensor
    projection: ad.Tensor
    predictor_out: ad.Tensor | None = None

    def layer_outputs(self) -> list[tuple[str, np.ndarray]]:
        """Post-activation values per layer, encoder first then projector
        (the final projector entry is the normalized projection)."""
        out = [(f"encoder.{i}", t.values) for i, t in enumerate(self.encoder_post)]
        out.extend((f"projector.{i}", t.values)
                   for i, t in enumerate(self.projector_post[:-1]))
        out.append((f"projector.{len(self.projector_post) - 1}",
                    self.projection.values))
        return out


class SslModel:
    """Parameter store plus the forward rule; training mutates it in place.

    Parameters live in ``params[name] = {"w": ..., "b": ...}`` following
    ``spec.layer_plan()`` order. The optional momentum copy mirrors encoder
    and projector layers; the optional queue is a FIFO of row-normalized
    projection vectors.
    """

    def __init__(self, spec: MlpSpec, params: dict[str, dict[str, np.ndarray]],
                 momentum_params: dict[str, dict[str, np.ndarray]] | None = None,
                 queue_capacity: int | None = None):
        self.spec = spec
        self.params = params
        self.momentum_params = momentum_params
        self.queue: collections.deque | None = None
        if queue_capacity is not None:
            if queue_capacity < 1:
                raise ValueError("queue capacity must be at least 1")
            self.queue = collections.deque(maxlen=queue_capacity)
        self._bound_tape: ad.Tape | None = None
        self._binding: dict[str, tuple[ad.Tensor, ad.Tensor]] | None = None

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, spec: MlpSpec, seed: int, with_momentum: bool = False,
                   queue_capacity: int | None = None) -> "SslModel":
        """Glorot-uniform weights, zero biases; the momentum copy (when
        enabled) starts equal to the online parameters."""
        spec.validate()
        params = {}
        for name, fan_in, fan_out in spec.layer_plan():
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            rng = stream(seed, "init", name)
            params[name] = {
                "w": rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                "b": np.zeros(fan_out),
            }
        momentum = None
        if with_momentum:
            momentum = {name: {"w": p["w"].copy(), "b": p["b"].copy()}
                        for name, p in params.items()
                        if not name.startswith("predictor.")}
        return cls(spec, params, momentum, queue_capacity)

    def parameter_names(self) -> list[str]:
        return [name for name, _, _ in self.spec.layer_plan()]

    def parameter_count(self) -> int:
        return sum(p["w"].size + p["b"].size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def bind(self, tape: ad.Tape) -> dict[str, tuple[ad.Tensor, ad.Tensor]]:
        """Register the online parameters as gradient leaves on ``tape``.

        Binding is cached per tape so the two view passes of one step share
        leaves and their gradients accumulate.
        """
        if self._bound_tape is tape and self._binding is not None:
            return self._binding
        self._binding = {
            name: (tape.variable(p["w"]), tape.variable(p["b"]))
            for name, p in self.params.items()
        }
        self._bound_tape = tape
        return self._binding

    def bound_gradients(self) -> dict[str, dict[str, np.ndarray]]:
        """Gradients of the currently bound leaves, in parameter layout."""
        if self._binding is None:
            raise RuntimeError("no parameters bound; run forward/backward first")
        return {name: {"w": w.grad, "b": b.grad}
                for name, (w, b) in self._binding.items()}

    def forward(self, tape: ad.Tape, x, use_momentum: bool = False) -> ForwardTrace:
        """Run encoder, projector, and (if configured) predictor.

        ``use_momentum`` routes through the momentum parameters as constants,
        so no gradient can reach them.
        """
        if use_momentum:
            if self.momentum_params is None:
                raise ValueError("momentum copy is not enabled on this model")
            lookup = {name: (tape.constant(p["w"]), tape.constant(p["b"]))
                      for name, p in self.momentum_params.items()}
        else:
            lookup = self.bind(tape)

        if not isinstance(x, ad.Tensor):
            x = tape.constant(np.asarray(x, dtype=np.float64))
        if x.values.ndim != 2 or x.values.shape[1] != self.spec.input_dim:
            raise ad.ShapeError(
                f"forward expects (n, {self.spec.input_dim}) inputs, got {x.shape}")

        h = x
        encoder_pre, encoder_post = [], []
        for i in range(len(self.spec.encoder_layers)):
            w, b = lookup[f"encoder.{i}"]
            pre = ad.matmul(h, w) + b
            h = pre.relu()
            encoder_pre.append(pre)
            encoder_post.append(h)
        representation = h

        projector_pre, projector_post = [], []
        n_proj = len(self.spec.projector_layers)
        for i in range(n_proj):
            w, b = lookup[f"projector.{i}"]
            pre = ad.matmul(h, w) + b
            h = pre if i == n_proj - 1 else pre.relu()
            projector_pre.append(pre)
            projector_post.append(h)
        # dead rows (a ReLU stack can zero a sample out entirely) pass
        # through as zero vectors; a model that kills every row is degenerate
        norms = np.linalg.norm(h.values, axis=1)
        if np.all(norms <= ad.ROW_NORM_FLOOR):
            raise ad.DomainError(
                "row_l2_normalize: every projection row has norm below 1e-12")
        projection = ad.row_l2_normalize_safe(h)

        predictor_out = None
        if self.spec.predictor_layers and not use_momentum:
            p = projection
            n_pred = len(self.spec.predictor_layers)
            for i in range(n_pred):
                w, b = lookup[f"predictor.{i}"]
                pre = ad.matmul(p, w) + b
                p = pre if i == n_pred - 1 else pre.relu()
            predictor_out = ad.row_l2_normalize_safe(p)

        return ForwardTrace(x, encoder_pre, encoder_post, projector_pre,
                            projector_post, representation, projection,
                            predictor_out)

    def embed(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Representation and projection values for plain inputs (no grads)."""
        trace = self.forward(ad.Tape(), x)
        return trace.representation.values, trace.projection.values

    # -- momentum copy and queue --------------------------------------------

    def momentum_update(self, m: float) -> None:
        """momentum <- m * momentum + (1 - m) * online, elementwise."""
        if self.momentum_params is None:
            raise ValueError("momentum copy is not enabled on this model")
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1]")
        for name, p in self.momentum_params.items():
            online = self.params[name]
            p["w"] = m * p["w"] + (1.0 - m) * online["w"]
            p["b"] = m * p["b"] + (1.0 - m) * online["b"]

    def queue_push(self, projections: np.ndarray) -> None:
        """Append unit-norm rows, evicting the oldest past capacity.

        Zero rows (dead samples) are dropped so queue entries stay unit-norm.
        """
        if self.queue is None:
            raise ValueError("negatives queue is not enabled on this model")
        projections = np.asarray(projections, dtype=np.float64)
        norms = np.linalg.norm(projections, axis=1)
        live = norms > 1e-12
        if not np.allclose(norms[live], 1.0, atol=1e-9):
            raise ValueError("queue entries must be unit-norm rows")
        for row in projections[live]:
            self.queue.append(row.copy())

    def queue_negatives(self) -> np.ndarray:
        """Current queue contents oldest-first (0-row matrix when empty)."""
        if self.queue is None:
            raise ValueError("negatives queue is not enabled on this model")
        if not self.queue:
            return np.zeros((0, self.spec.projector_layers[-1]))
        return np.stack(list(self.queue))

    # -- diagnostics ---------------------------------------------------------

    def parameter_std_profile(self) -> list[tuple[str, float]]:
        """Population standard deviation of each layer's weight entries, in
        storage order (encoder, projector, predictor)."""
        return [(name, float(np.std(self.params[name]["w"])))
                for name in self.parameter_names()]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SslModel, path: str) -> None:
    """Write the model as versioned JSON; serialization is canonical, so
    save -> load -> save reproduces the file byte for byte."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "params": {name: {"w": model.params[name]["w"], "b": model.params[name]["b"]}
                   for name in model.parameter_names()},
    }
    if model.momentum_params is not None:
        doc["momentum_params"] = {
            name: {"w": p["w"], "b": p["b"]}
            for name, p in model.momentum_params.items()
        }
    if model.queue is not None:
        doc["queue"] = {
            "capacity": model.queue.maxlen,
            "rows": list(model.queue),
        }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(jsonio.dumps(doc))
        fh.write("\n")


def _load_layer(name: str, entry: dict, fan_in: int, fan_out: int) -> dict:
    try:
        w = np.asarray(entry["w"], dtype=np.float64)
        b = np.asarray(entry["b"], dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"params.{name}: missing or malformed w/b") from e
    if w.shape != (fan_in, fan_out):
        raise CheckpointError(
            f"params.{name}.w: expected shape {(fan_in, fan_out)}, got {w.shape}")
    if b.shape != (fan_out,):
        raise CheckpointError(
            f"params.{name}.b: expected shape {(fan_out,)}, got {b.shape}")
    return {"w": w, "b": b}


def load_checkpoint(path: str) -> SslModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = jsonio.loads(fh.read())
    except ValueError as e:
        raise CheckpointError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version: expected {CHECKPOINT_VERSION}, got "
            f"{doc.get('version') if isinstance(doc, dict) else doc!r}")
    try:
        spec = MlpSpec.from_dict(doc["spec"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: spec: {e}") from e

    plan = {name: (fan_in, fan_out) for name, fan_in, fan_out in spec.layer_plan()}
    raw_params = doc.get("params")
    if not isinstance(raw_params, dict) or set(raw_params) != set(plan):
        raise CheckpointError(f"{path}: params: layer names do not match spec")
    params = {name: _load_layer(name, raw_params[name], *plan[name])
              for name in plan}

    momentum = None
    if doc.get("momentum_params") is not None:
        momentum = {name: _load_layer(name, entry, *plan[name])
                    for name, entry in doc["momentum_params"].items()
                    if name in plan}
        if set(momentum) != {n for n in plan if not n.startswith("predictor.")}:
            raise CheckpointError(f"{path}: momentum_params: layer names do not match spec")

    queue_capacity = None
    queue_rows = None
    if doc.get("queue") is not None:
        queue_capacity = int(doc["queue"]["capacity"])
        queue_rows = [np.asarray(r, dtype=np.float64) for r in doc["queue"]["rows"]]

    model = SslModel(spec, params, momentum, queue_capacity)
    if queue_rows:
        model.queue_push(np.stack(queue_rows))
    return model
