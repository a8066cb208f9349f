"""Small feed-forward classifiers and the trainable/frozen parameter split.

Hidden blocks are ``linear -> [standardize -> scale/shift] -> activation``
and the last block is a linear head producing class logits. Normalization
standardizes each example over its features, so a single weight sample can
be evaluated on a single input without batch statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamVector, Tape, Var
from .errors import ShapeError

NORM_EPS = 1e-5
ACTIVATIONS = ("tanh", "relu")
POLICIES = ("norm+head", "head", "all")


@dataclass(frozen=True)
class Model:
    input_dim: int
    hidden: tuple[int, ...]
    classes: int
    norm: tuple[bool, ...]
    activation: str = "tanh"
    registry: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        reg, cursor = {}, 0

        def add(name, shape):
            nonlocal cursor
            size = int(np.prod(shape))
            reg[name] = (cursor, cursor + size, tuple(shape))
            cursor += size

        fan_in = self.input_dim
        for k, (width, use_norm) in enumerate(zip(self.hidden, self.norm), start=1):
            add(f"layer{k}.weight", (fan_in, width))
            add(f"layer{k}.bias", (width,))
            if use_norm:
                add(f"norm{k}.scale", (width,))
                add(f"norm{k}.shift", (width,))
            fan_in = width
        add("head.weight", (fan_in, self.classes))
        add("head.bias", (self.classes,))
        object.__setattr__(self, "registry", reg)

    @property
    def num_params(self) -> int:
        return max(end for _, end, _ in self.registry.values())

    def init_params(self, seed: int) -> ParamVector:
        """Glorot-uniform weights, zero biases, unit norm scale, zero shift."""
        rng = np.random.default_rng(seed)
        values = np.zeros(self.num_params)
        for name, (start, end, shape) in self.registry.items():
            if name.endswith(".weight"):
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                values[start:end] = rng.uniform(-limit, limit, size=end - start)
            elif name.endswith(".scale"):
                values[start:end] = 1.0
        return ParamVector(values, self.registry)

    def zero_params(self) -> ParamVector:
        return ParamVector(np.zeros(self.num_params), self.registry)

    def logits(self, tape: Tape, X) -> Var:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError("input node #0", f"expected (n, {self.input_dim}) inputs, got {X.shape}")
        h = tape.const(X, batched=True)
        for k, use_norm in enumerate(self.norm, start=1):
            h = h @ tape.param(f"layer{k}.weight") + tape.param(f"layer{k}.bias")
            if use_norm:
                h = tape.standardize(h, NORM_EPS) * tape.param(f"norm{k}.scale") + tape.param(f"norm{k}.shift")
            h = tape.tanh(h) if self.activation == "tanh" else tape.relu(h)
        return h @ tape.param("head.weight") + tape.param("head.bias")

    def loss_fn(self, X, y, weight_decay: float = 0.0, trainable: np.ndarray | None = None):
        """Differentiable mean cross-entropy (+ optional weight decay) as ``fn(tape)``."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)

        def fn(tape: Tape) -> Var:
            loss = tape.nll(tape.log_softmax(self.logits(tape, X)), y)
            if weight_decay:
                if trainable is None:
                    names = list(self.registry)
                else:
                    names = [n for n in self.registry if np.isin(_indices(self.registry, n), trainable).any()]
                for name in names:
                    w = tape.param(name)
                    if trainable is not None:
                        mask = np.isin(_indices(self.registry, name), trainable).reshape(w.shape)
                        w = w * tape.const(mask.astype(np.float64), batched=False)
                    loss = loss + tape.scale(tape.sum(w * w), 0.5 * weight_decay)
            return loss

        return fn


def _indices(registry, name):
    start, end, _ = registry[name]
    return np.arange(start, end)


def build_mlp(input_dim: int, hidden, classes: int, norm=True, activation: str = "tanh") -> Model:
    """Build a classifier; ``norm`` is a bool or one bool per hidden layer."""
    hidden = tuple(int(h) for h in hidden)
    if input_dim < 1 or any(h < 1 for h in hidden):
        raise ValueError("layer widths must be >= 1")
    if classes < 2:
        raise ValueError("a classifier needs at least 2 classes")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if isinstance(norm, bool):
        norm = (norm,) * len(hidden)
    norm = tuple(bool(n) for n in norm)
    if len(norm) != len(hidden):
        raise ValueError("norm flags must match the number of hidden layers")
    return Model(int(input_dim), hidden, int(classes), norm, activation)


def predict(model: Model, params: ParamVector, X) -> np.ndarray:
    """Class logits for each row of ``X``."""
    return model.logits(Tape(params), X).value


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nll_loss(model: Model, params: ParamVector, batch, weight_decay: float = 0.0, partition=None) -> float:
    """Mean cross-entropy plus ``weight_decay/2 * |w_trainable|^2``."""
    logits = predict(model, params, batch.X)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = np.asarray(batch.y)
    loss = -logp[np.arange(len(y)), y].mean()
    if weight_decay:
        w = params.values if partition is None else params.values[partition.trainable]
        loss += 0.5 * weight_decay * float(w @ w)
    return float(loss)


@dataclass(frozen=True)
class ParamPartition:
    """Index split of the parameter vector into trainable ``w_s`` and frozen ``w_f``."""

    trainable: np.ndarray
    frozen: np.ndarray
    policy: str = "custom"

    def __post_init__(self):
        t = np.asarray(self.trainable, dtype=np.int64)
        f = np.asarray(self.frozen, dtype=np.int64)
        object.__setattr__(self, "trainable", t)
        object.__setattr__(self, "frozen", f)
        both = np.concatenate([t, f])
        if np.unique(both).size != both.size:
            raise ValueError("trainable and frozen index sets overlap")
        if both.size and (both.min() != 0 or both.max() != both.size - 1):
            raise ValueError("partition does not cover [0, p)")

    @property
    def p1(self) -> int:
        return self.trainable.size

    @property
    def p2(self) -> int:
        return self.frozen.size

    @property
    def p(self) -> int:
        return self.p1 + self.p2


def partition_params(model: Model, policy: str) -> ParamPartition:
    if policy not in POLICIES:
        raise ValueError(f"unknown partition policy {policy!r}; expected one of {POLICIES}")

    def selected(name):
        if policy == "all":
            return True
        if name.startswith("head."):
            return True
        return policy == "norm+head" and name.startswith("norm")

    trainable, frozen = [], []
    for name, (start, end, _) in model.registry.items():
        (trainable if selected(name) else frozen).append(np.arange(start, end))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return ParamPartition(cat(trainable), cat(frozen), policy)


def head_mask(registry, indices: np.ndarray) -> np.ndarray:
    """Boolean mask over ``indices`` marking last-layer entries."""
    head = np.zeros(max(end for _, end, _ in registry.values()), dtype=bool)
    for name, (start, end, _) in registry.items():
        if name.startswith("head."):
            head[start:end] = True
    return head[indices]
