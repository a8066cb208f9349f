"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` is built by running ops on it (define-by-run). Parameter
leaves are named slices of a bound :class:`ParamVector`; ``Tape.backward``
returns the gradient as a ParamVector over the same registry.

Differentiable functions throughout the package have the signature
``fn(tape) -> Var`` and read parameters via ``tape.param(name)``. This keeps
``value_and_grad``, ``hvp`` and the finite-difference oracles agnostic of
what the function computes.

>>> pv = ParamVector.from_arrays({"x": np.array([3.0])})
>>> value, grad = value_and_grad(lambda t: t.sum(t.param("x") * t.param("x")), pv)
>>> float(value), grad.values.tolist()
(9.0, [6.0])
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "ParamVector",
    "Tape",
    "Var",
    "value_and_grad",
    "evaluate",
    "hvp",
    "finite_diff_grad",
]


class ParamVector:
    """Flat float64 parameter vector with a name -> slice registry.

    Registry entries map a layer name to ``(start, end, shape)``. Entries must
    be disjoint and cover ``[0, p)``.
    """

    __slots__ = ("values", "registry")

    def __init__(self, values, registry: Mapping[str, tuple]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        reg = {name: (int(start), int(end), tuple(int(s) for s in shape))
               for name, (start, end, shape) in registry.items()}
        cursor = 0
        for name, (start, end, shape) in sorted(reg.items(), key=lambda kv: kv[1][0]):
            if start != cursor or end < start or end - start != int(np.prod(shape, dtype=int)):
                raise ValueError(f"registry entry {name!r} does not tile the vector at {cursor}")
            cursor = end
        if cursor != values.size:
            raise ValueError(f"registry covers {cursor} entries, vector has {values.size}")
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NumericError("non-finite parameter value", index=bad)
        self.values = values
        self.registry = reg

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        registry, chunks, cursor = {}, [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            registry[name] = (cursor, cursor + arr.size, arr.shape)
            chunks.append(arr.ravel())
            cursor += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, registry)

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return list(self.registry)

    def get(self, name: str) -> np.ndarray:
        start, end, shape = self.registry[name]
        return self.values[start:end].reshape(shape)

    def indices(self, name: str) -> np.ndarray:
        start, end, _ = self.registry[name]
        return np.arange(start, end)

    def replace(self, values) -> "ParamVector":
        """Same registry, new values (validated)."""
        return ParamVector(values, self.registry)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.registry)

    def __repr__(self) -> str:
        return f"ParamVector(p={self.size}, layers={list(self.registry)})"


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.id]

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __add__(self, other):
        return self.tape.add(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __repr__(self):
        return f"Var(#{self.id} {self.tape._ops[self.id]} shape={self.shape})"


class Tape:
    """Records ops and their cached forward values for one backward pass.

    Nodes are appended in execution order, so the node list is already
    topologically sorted. A tape is single-use and not thread-safe.

    ``batched`` marks nodes whose leading axis is the example axis. It is
    what lets :meth:`backward` return per-example parameter gradients
    (``per_sample=True``) for row-separable graphs.
    """

    def __init__(self, params: ParamVector | None = None):
        self.params = params
        self._values: list = []
        self._ops: list[str] = []
        self._parents: list[tuple] = []
        self._backward: list = []
        self._batched: list[bool] = []
        self._leaves: dict[int, tuple[int, int, tuple]] = {}
        self._per_sample = False

    def __len__(self):
        return len(self._values)

    # -- node construction -------------------------------------------------

    def _push(self, op, value, parents=(), backward=None, batched=False) -> Var:
        self._values.append(value)
        self._ops.append(op)
        self._parents.append(tuple(parents))
        self._backward.append(backward)
        self._batched.append(batched)
        return Var(self, len(self._values) - 1)

    def _node(self, var: Var, op: str) -> str:
        return f"{op} node #{len(self._values)} (input #{var.id} {self._ops[var.id]})"

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.const(x)

    def const(self, value, batched: bool | None = None) -> Var:
        """A non-differentiable input. 2-D arrays are treated as batches."""
        value = np.asarray(value, dtype=np.float64)
        if batched is None:
            batched = value.ndim == 2
        return self._push("const", value, batched=batched)

    def param(self, name: str) -> Var:
        """Leaf for the registry entry ``name`` of the bound ParamVector."""
        if self.params is None:
            raise ValueError("tape has no bound ParamVector")
        if name not in self.params.registry:
            raise ShapeError(f"param node #{len(self._values)}", f"unknown layer {name!r}")
        var = self._push("param:" + name, self.params.get(name))
        self._leaves[var.id] = self.params.registry[name]
        return var

    # -- ops ---------------------------------------------------------------

    def matmul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(self._node(a, "matmul"), f"cannot multiply {av.shape} by {bv.shape}")
        a_b, b_b = self._batched[a.id], self._batched[b.id]

        def backward(g):
            if self._per_sample and not a_b and b_b:
                raise NotImplementedError("per-sample gradients need the batch on the left operand")
            ga = g @ bv.T
            if self._per_sample and a_b and not b_b:
                gb = av[:, :, None] * g[:, None, :]
            else:
                gb = av.T @ g
            return ga, gb

        return self._push("matmul", av @ bv, (a, b), backward, a_b or b_b)

    def _broadcast_reduce(self, grad, target_shape, target_batched):
        # Under per-sample mode an unbatched target's gradient carries a leading example axis.
        skip = 1 if self._per_sample and not target_batched else 0
        extra = grad.ndim - skip - len(target_shape)
        if extra > 0:
            grad = grad.sum(axis=tuple(range(skip, skip + extra)))
        for axis, size in enumerate(target_shape):
            if size == 1 and grad.shape[axis + skip] != 1:
                grad = grad.sum(axis=axis + skip, keepdims=True)
        return grad

    def _binary(self, op, a, b, fn, grads) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        try:
            out = fn(av, bv)
        except ValueError as exc:
            raise ShapeError(self._node(a, op), f"operands {av.shape} and {bv.shape}: {exc}") from None
        if out.shape != np.broadcast_shapes(av.shape, bv.shape) or (
            av.ndim and bv.ndim and av.shape[-1] != bv.shape[-1]
        ):
            raise ShapeError(self._node(a, op), f"operands {av.shape} and {bv.shape} do not align")
        a_b, b_b = self._batched[a.id], self._batched[b.id]
        out_b = a_b or b_b

        def backward(g):
            ga, gb = grads(g, av, bv)
            return (
                self._broadcast_reduce(ga, av.shape, a_b),
                self._broadcast_reduce(gb, bv.shape, b_b),
            )

        return self._push(op, out, (a, b), backward, out_b)

    def add(self, a, b) -> Var:
        return self._binary("add", a, b, np.add, lambda g, x, y: (g, g))

    def mul(self, a, b) -> Var:
        return self._binary("mul", a, b, np.multiply, lambda g, x, y: (g * y, g * x))

    def scale(self, a, c: float) -> Var:
        a = self._lift(a)
        c = float(c)
        return self._push("scale", a.value * c, (a,), lambda g: (g * c,), self._batched[a.id])

    def relu(self, a) -> Var:
        a = self._lift(a)
        mask = a.value > 0
        return self._push("relu", a.value * mask, (a,), lambda g: (g * mask,), self._batched[a.id])

    def tanh(self, a) -> Var:
        a = self._lift(a)
        out = np.tanh(a.value)
        return self._push("tanh", out, (a,), lambda g: (g * (1.0 - out * out),), self._batched[a.id])

    def standardize(self, a, eps: float = 1e-5) -> Var:
        """Per-row standardization over the last axis (no running statistics)."""
        a = self._lift(a)
        x = a.value
        if x.ndim != 2:
            raise ShapeError(self._node(a, "standardize"), f"expected a 2-D batch, got {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        std = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        y = (x - mean) / std

        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return ((g - gm - y * gy) / std,)

        return self._push("standardize", y, (a,), backward, self._batched[a.id])

    def log_softmax(self, a) -> Var:
        a = self._lift(a)
        x = a.value
        if x.ndim != 2:
            raise ShapeError(self._node(a, "log_softmax"), f"expected 2-D logits, got {x.shape}")
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        probs = np.exp(out)
        return self._push(
            "log_softmax", out, (a,),
            lambda g: (g - probs * g.sum(axis=-1, keepdims=True),),
            self._batched[a.id],
        )

    def nll(self, logp, labels) -> Var:
        """Mean negative log-likelihood of integer ``labels`` under ``logp`` rows."""
        logp = self._lift(logp)
        lp = logp.value
        labels = np.asarray(labels)
        if lp.ndim != 2 or labels.shape != (lp.shape[0],):
            raise ShapeError(self._node(logp, "nll"), f"logp {lp.shape} vs labels {labels.shape}")
        if labels.size == 0:
            raise ShapeError(self._node(logp, "nll"), "empty batch")
        if labels.min() < 0 or labels.max() >= lp.shape[1]:
            raise ShapeError(self._node(logp, "nll"), "label outside class range")
        n = lp.shape[0]
        rows = np.arange(n)
        value = np.asarray(-lp[rows, labels].mean())

        def backward(g):
            grad = np.zeros_like(lp)
            # per-sample mode differentiates each example's own loss, not the mean
            grad[rows, labels] = -(1.0 if self._per_sample else g / n)
            return (grad,)

        return self._push("nll", value, (logp,), backward, False)

    def sum(self, a) -> Var:
        a = self._lift(a)
        if self._batched[a.id]:
            raise ShapeError(self._node(a, "sum"), "reducing over a batch axis; use nll")
        shape = a.value.shape

        def backward(g):
            if self._per_sample:
                raise NotImplementedError("sum over parameters is not separable per example")
            return (np.broadcast_to(g, shape).copy(),)

        return self._push("sum", np.asarray(a.value.sum()), (a,), backward)

    # -- backward ----------------------------------------------------------

    def backward(self, root: Var, per_sample: bool = False):
        """Gradient of scalar ``root`` w.r.t. every parameter leaf.

        Returns a ParamVector (or, with ``per_sample``, an ``(N, p)`` array of
        per-example gradients of each example's own loss).
        """
        if not self._values:
            raise ValueError("backward called on an empty tape")
        root = self._lift(root)
        if np.ndim(root.value) != 0:
            raise ShapeError(f"{self._ops[root.id]} node #{root.id}", "backward root must be a scalar")
        if self.params is None:
            raise ValueError("tape has no bound ParamVector")
        p = self.params.size

        n_batch = None
        if per_sample:
            batch_sizes = {self._values[i].shape[0] for i, b in enumerate(self._batched) if b}
            if len(batch_sizes) != 1:
                raise ValueError("per-sample backward needs exactly one batch size on the tape")
            n_batch = batch_sizes.pop()

        grads: list = [None] * len(self._values)
        grads[root.id] = np.ones(())
        self._per_sample = per_sample
        try:
            for i in range(root.id, -1, -1):
                g = grads[i]
                if g is None:
                    continue
                fn = self._backward[i]
                if fn is None:
                    continue
                for parent, pg in zip(self._parents[i], fn(g)):
                    if pg is None:
                        continue
                    j = parent.id
                    grads[j] = pg if grads[j] is None else grads[j] + pg
        finally:
            self._per_sample = False

        out = np.zeros((n_batch, p)) if per_sample else np.zeros(p)
        for node_id, (start, end, _) in self._leaves.items():
            g = grads[node_id]
            if g is None:
                continue
            if per_sample:
                out[:, start:end] += g.reshape(n_batch, -1)
            else:
                out[start:end] += g.ravel()
        if per_sample:
            return out
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite gradient", index=int(np.flatnonzero(~np.isfinite(out))[0]))
        return ParamVector(out, self.params.registry)


Fn = Callable[[Tape], Var]


def evaluate(fn: Fn, params: ParamVector) -> float:
    """Forward value of ``fn`` at ``params``."""
    value = fn(Tape(params)).value
    return float(value)


def value_and_grad(fn: Fn, params: ParamVector) -> tuple[float, ParamVector]:
    tape = Tape(params)
    root = fn(tape)
    value = float(root.value)
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value, tape.backward(root)


def hvp(fn: Fn, params: ParamVector, v) -> ParamVector:
    """Hessian-vector product by central differences of the analytic gradient.

    ``(g(w + h v/|v|) - g(w - h v/|v|)) * |v| / (2h)`` with
    ``h = 1e-4 * (1 + max|w|)``.
    """
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > 0:
        raise ValueError("hvp direction must be nonzero")
    w = params.values
    h = 1e-4 * (1.0 + float(np.max(np.abs(w), initial=0.0)))
    step = h * (v / norm)
    _, gp = value_and_grad(fn, params.replace(w + step))
    _, gm = value_and_grad(fn, params.replace(w - step))
    out = (gp.values - gm.values) * (norm / (2.0 * h))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Hessian-vector product", index=int(np.flatnonzero(~np.isfinite(out))[0]))
    return params.replace(out)


def finite_diff_grad(fn: Fn, params: ParamVector, h: float = 1e-5, steps: Iterable[float] | None = None) -> ParamVector:
    """Central-difference gradient. Test oracle only: costs 2p forward passes.

    ``h`` is a fixed step unless ``steps`` gives one per coordinate.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    w = params.values
    hs = np.full(w.size, float(h)) if steps is None else np.asarray(list(steps), dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[i] += hs[i]
        wm[i] -= hs[i]
        fp = evaluate(fn, params.replace(wp))
        fm = evaluate(fn, params.replace(wm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite loss in finite differences", index=i)
        out[i] = (fp - fm) / (wp[i] - wm[i])
    return params.replace(out)
