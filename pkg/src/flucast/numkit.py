"""Dense 2-D float64 tensors with reverse-mode gradients, a seeded RNG, and Adam.

All higher-level model code computes on `Tensor2` values. Gradients are
recorded on an explicit `GradTape` at tensor-operation granularity: each
primitive appends one entry, so the tape order is already topological and
`backward` is a single reverse sweep.
"""

from __future__ import annotations

import hashlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class Tensor2:
    """Immutable-by-convention 2-D float64 matrix (row-major)."""

    __slots__ = ("data", "grad")

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 requires 2-D data, got ndim={arr.ndim}")
        self.data = arr
        self.grad = None  # filled in by backward()

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def copy(self) -> "Tensor2":
        return Tensor2(self.data.copy(), copy=False)

    def __repr__(self):
        return f"Tensor2(shape={self.shape})"


def zeros(rows: int, cols: int) -> Tensor2:
    return Tensor2(np.zeros((rows, cols)), copy=False)


def ones(rows: int, cols: int) -> Tensor2:
    return Tensor2(np.ones((rows, cols)), copy=False)


_ACTIVE_TAPE = None


class GradTape:
    """Ordered record of primitive ops; replayed backward once per backward().

    Usable as a context manager; only one tape may be active at a time.
    """

    def __init__(self):
        self._entries = []  # (out, inputs, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a GradTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, inputs, backward_fn):
        self._entries.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._entries)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _emit(out_data, inputs, backward_fn, op: str) -> Tensor2:
    out = Tensor2(_finite(out_data, op), copy=False)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, inputs, backward_fn)
    return out


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return [g @ b.data.T, a.data.T @ g]

    return _emit(a.data @ b.data, [a, b], bw, "matmul")


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, [a, b], lambda g: [g, g], "add")


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.data - b.data, [a, b], lambda g: [g, -g], "sub")


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.data * b.data, [a, b],
                 lambda g: [g * b.data, g * a.data], "mul")


def sigmoid(a: Tensor2) -> Tensor2:
    # Split by sign so exp never overflows.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(out, [a], lambda g: [g * out * (1.0 - out)], "sigmoid")


def tanh(a: Tensor2) -> Tensor2:
    out = np.tanh(a.data)
    return _emit(out, [a], lambda g: [g * (1.0 - out * out)], "tanh")


def elementwise(op: str, a: Tensor2, b: Tensor2 = None) -> Tensor2:
    """Dispatch entrywise ops by name: sigmoid|tanh|mul|add|sub."""
    unary = {"sigmoid": sigmoid, "tanh": tanh}
    binary = {"mul": mul, "add": add, "sub": sub}
    if op in unary:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return unary[op](a)
    if op in binary:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return binary[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def softmax_row(a: Tensor2) -> Tensor2:
    if a.data.size == 0:
        raise ContractError("softmax_row of empty tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return [out * (g - dot)]

    return _emit(out, [a], bw, "softmax_row")


def hstack(tensors) -> Tensor2:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("hstack of nothing")
    r = tensors[0].rows
    if any(t.rows != r for t in tensors):
        raise ShapeError("hstack row mismatch: "
                         + ", ".join(str(t.shape) for t in tensors))
    widths = [t.cols for t in tensors]

    def bw(g):
        outs, j = [], 0
        for w in widths:
            outs.append(g[:, j:j + w])
            j += w
        return outs

    return _emit(np.concatenate([t.data for t in tensors], axis=1),
                 tensors, bw, "hstack")


def col_slice(a: Tensor2, j0: int, j1: int) -> Tensor2:
    if not (0 <= j0 < j1 <= a.cols):
        raise ShapeError(f"col_slice [{j0}:{j1}] out of range for {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        return [full]

    return _emit(a.data[:, j0:j1].copy(), [a], bw, "col_slice")


def mean_all(a: Tensor2) -> Tensor2:
    n = a.data.size

    def bw(g):
        return [np.full_like(a.data, g[0, 0] / n)]

    return _emit(np.array([[a.data.mean()]]), [a], bw, "mean_all")


def backward(tape: GradTape, loss: Tensor2) -> dict:
    """Reverse sweep over the tape; fills .grad on every visited tensor.

    Returns a mapping id(tensor) -> gradient array for convenience.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be scalar 1x1, got {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    tensors = {id(loss): loss}
    for out, inputs, bw in reversed(tape._entries):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, bw(g)):
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            tensors[key] = inp
    for key, t in tensors.items():
        t.grad = grads[key]
    return grads


class Rng:
    """Deterministic seeded RNG; identical seed gives identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, name: str) -> "Rng":
        """Derive an independent child stream keyed by (seed, name)."""
        h = hashlib.sha256(f"{self.seed}/{name}".encode("utf-8")).digest()
        return Rng(int.from_bytes(h[:8], "big"))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return (self._gen.random(size=shape) < p).astype(np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def normal(self, loc: float, scale: float, shape) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)


def glorot_uniform(rng: Rng, rows: int, cols: int) -> Tensor2:
    """Uniform init in +-sqrt(6/(fan_in+fan_out))."""
    limit = np.sqrt(6.0 / (rows + cols))
    return Tensor2(rng.uniform(-limit, limit, (rows, cols)), copy=False)


class AdamState:
    """Per-tensor Adam accumulators with bias correction."""

    def __init__(self, shape, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(state: AdamState, param: Tensor2, grad: np.ndarray) -> Tensor2:
    """One Adam update; returns the updated parameter tensor."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step shape mismatch: param {param.shape}, "
                         f"grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    new = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return Tensor2(_finite(new, "adam_step"), copy=False)


class Adam:
    """Adam over a named parameter dict; updates tensors in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._states = {}

    def step(self, params: dict) -> None:
        """Update every param whose .grad is set; then clear grads."""
        for name, p in params.items():
            if p.grad is None:
                continue
            st = self._states.get(name)
            if st is None:
                st = AdamState(p.shape, self.lr, self.beta1, self.beta2,
                               self.eps)
                self._states[name] = st
            p.data = adam_step(st, p, p.grad).data
            p.grad = None
