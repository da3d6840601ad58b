"""Minimal dense-tensor math with reverse-mode gradient support.

Tensors are 64-bit float arrays with at most three axes. Operations are
recorded on a :class:`Tape`; calling :func:`backward` on a scalar output
propagates gradients to every leaf in reverse recording order. The primitive
set is intentionally small: exactly what a dense edge-based graph network
needs, plus a central-difference gradient checker.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class GradientCheckError(RuntimeError):
    """Raised when a gradient check hits a non-finite value."""


class Tensor:
    """Dense 64-bit float array with an optional gradient slot.

    `requires_grad=False` marks constant inputs (data matrices, one-hot
    helpers); backward skips gradient computation for them.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = True, validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"tensors support at most 3 axes, got shape {arr.shape}")
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Ordered record of primitive applications.

    Recording order is topological by construction, so the backward pass
    visits nodes in reverse recording order exactly once. A tape is a
    single-threaded object; build a fresh one per forward pass.
    """

    __slots__ = ("nodes", "_touched", "_seen", "_produced")

    def __init__(self):
        # each node: (output tensor, input tensors, backward closure)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._touched: list[Tensor] = []
        self._seen: set[int] = set()
        self._produced: set[int] = set()

    def _emit(self, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
        requires = False
        for t in inputs:
            if t.requires_grad:
                requires = True
                break
        out = Tensor(out_data, requires_grad=requires, validate=False)
        if requires:
            self.nodes.append((out, inputs, backward_fn))
            self._produced.add(id(out))
            for t in (out,) + inputs:
                if id(t) not in self._seen:
                    self._seen.add(id(t))
                    self._touched.append(t)
        return out

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Matrix product for 1-D/2-D operands (np.matmul semantics)."""
        if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
            raise ShapeError("matmul operands must be 1-D or 2-D")
        try:
            out = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

        def backward(g):
            ad, bd = a.data, b.data
            if ad.ndim == 2 and bd.ndim == 2:
                return g @ bd.T, ad.T @ g
            if ad.ndim == 2 and bd.ndim == 1:
                return np.outer(g, bd), ad.T @ g
            if ad.ndim == 1 and bd.ndim == 2:
                return bd @ g, np.outer(ad, g)
            return g * bd, g * ad

        return self._emit(out, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; the smaller operand may broadcast (numpy rules)."""
        try:
            out = a.data + b.data
        except ValueError as exc:
            raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return self._emit(out, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product with numpy broadcasting."""
        try:
            out = a.data * b.data
        except ValueError as exc:
            raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

        def backward(g):
            return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

        return self._emit(out, (a, b), backward)

    def scale(self, a: Tensor, s: float) -> Tensor:
        """Multiply by a python float constant."""
        s = float(s)

        def backward(g):
            return (g * s,)

        return self._emit(a.data * s, (a,), backward)

    def relu(self, a: Tensor) -> Tensor:
        """max(x, 0); the derivative at exactly 0 is defined as 0."""
        out = np.maximum(a.data, 0.0)

        def backward(g):
            return (g * (a.data > 0.0),)

        return self._emit(out, (a,), backward)

    def softmax_lastaxis(self, a: Tensor) -> Tensor:
        """Softmax over the last axis, with max-subtraction for stability."""
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)

        return self._emit(out, (a,), backward)

    def sum(self, a: Tensor) -> Tensor:
        """Total sum of all entries, a 0-d scalar."""
        out = np.asarray(a.data.sum())

        def backward(g):
            return (np.full(a.data.shape, float(g)),)

        return self._emit(out, (a,), backward)

    def mse(self, a: Tensor, b: Tensor) -> Tensor:
        """Mean squared difference over all entries, a 0-d scalar."""
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
        diff = a.data - b.data
        out = np.asarray(np.mean(diff * diff))
        n = diff.size

        def backward(g):
            d = (2.0 * float(g) / n) * diff
            return d, -d

        return self._emit(out, (a, b), backward)

    def l2_norm_sq(self, a: Tensor) -> Tensor:
        """Sum of squared entries, a 0-d scalar."""
        out = np.asarray(np.sum(a.data * a.data))

        def backward(g):
            return ((2.0 * float(g)) * a.data,)

        return self._emit(out, (a,), backward)

    def concat(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        """Concatenate tensors along `axis`."""
        if not parts:
            raise ShapeError("concat needs at least one tensor")
        try:
            out = np.concatenate([t.data for t in parts], axis=axis)
        except ValueError as exc:
            raise ShapeError("concat shape mismatch") from exc
        sizes = [t.data.shape[axis] for t in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            g = np.moveaxis(g, axis, 0)
            return tuple(
                np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis) for i in range(len(parts))
            )

        return self._emit(out, tuple(parts), backward)

    def slice(self, a: Tensor, start: int, stop: int) -> Tensor:
        """Contiguous slice [start, stop) along the first axis."""
        if a.data.ndim == 0:
            raise ShapeError("cannot slice a 0-d tensor")
        if not (0 <= start <= stop <= a.data.shape[0]):
            raise ShapeError(f"slice [{start}:{stop}] out of range for shape {a.shape}")
        out = a.data[start:stop].copy()

        def backward(g):
            full = np.zeros(a.data.shape)
            full[start:stop] = g
            return (full,)

        return self._emit(out, (a,), backward)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        """Reshape without changing the row-major element order."""
        if len(shape) > 3:
            raise ShapeError("tensors support at most 3 axes")
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc

        def backward(g):
            return (g.reshape(a.data.shape),)

        return self._emit(out, (a,), backward)

    def transpose(self, a: Tensor, axes: tuple[int, ...]) -> Tensor:
        """Permute axes."""
        if sorted(axes) != list(range(a.data.ndim)):
            raise ShapeError(f"invalid axes {axes} for shape {a.shape}")
        inverse = tuple(int(i) for i in np.argsort(axes))

        def backward(g):
            return (np.transpose(g, inverse),)

        return self._emit(np.transpose(a.data, axes), (a,), backward)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(tensor) to every gradient-enabled leaf on the tape.

    `loss` must be a 0-d tensor produced on the tape. After the call every
    tensor touched by the tape has `.grad` set; leaves that do not influence
    the loss get a zero gradient. Returns the leaf gradients keyed by tensor.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")

    produced = tape._produced
    touched = tape._touched
    for t in touched:
        t.grad = None

    loss.grad = np.ones(())
    for out, inputs, backward_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g

    leaves: dict[Tensor, np.ndarray] = {}
    for t in touched:
        if id(t) in produced:
            continue
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros(t.data.shape)
        if t.requires_grad:
            leaves[t] = t.grad
    return leaves


def gradient_check(
    build: Callable[[Tape, list[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients against central finite differences.

    `build(tape, tensors)` must construct a scalar loss from the given leaf
    tensors. Returns the maximum over all input coordinates of
    |analytic - numeric| / max(1, |numeric|). Raises
    :class:`GradientCheckError` (naming the offending coordinate) if any
    value involved is non-finite.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    tape = Tape()
    tensors = [Tensor(x) for x in arrays]
    loss = build(tape, tensors)
    backward(tape, loss)
    analytic = [t.grad.copy() for t in tensors]

    def evaluate(current: list[np.ndarray]) -> float:
        t = Tape()
        out = build(t, [Tensor(x, validate=False) for x in current])
        return float(out.data)

    max_err = 0.0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate(arrays)
            flat[j] = orig - step
            down = evaluate(arrays)
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            analytic_j = analytic[i].reshape(-1)[j]
            if not (np.isfinite(numeric) and np.isfinite(analytic_j)):
                raise GradientCheckError(
                    f"non-finite gradient at input {i}, coordinate {j}: "
                    f"analytic={analytic_j}, numeric={numeric}"
                )
            err = abs(analytic_j - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
