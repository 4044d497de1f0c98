"""Reverse-mode autodiff over dense float64 numpy arrays.

Micrograd-style: each op builds a node holding a numpy array plus a
closure that pushes the output gradient onto its parents. backward()
runs a topological sort from the loss. Everything is float64 and
deterministic; there is no device, no dtype zoo, no lazy evaluation.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .errors import ContractError, ParameterError, ShapeError, TrainingError

# Non-finite values abort immediately rather than corrupting a run.
# Exported knob so long sweeps can trade the check away once trusted.
CHECK_FINITE = os.environ.get("MGPOLICY_CHECK_FINITE", "1") != "0"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise TrainingError(f"non-finite values out of op '{_op}'")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ---- graph construction helpers -------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = Tensor(self.data + other.data, _parents=(self, other), _op="add")

        def back(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,), _op="neg")
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data * other.data, _parents=(self, other), _op="mul")

        def back(g):
            self._accum(_unbroadcast(g * other.data, self.data.shape))
            other._accum(_unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = Tensor(self.data / other.data, _parents=(self, other), _op="div")

        def back(g):
            self._accum(_unbroadcast(g / other.data, self.data.shape))
            other._accum(_unbroadcast(-g * self.data / other.data**2, other.data.shape))

        out._backward = back
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ParameterError("pow exponent must be a python scalar")
        out = Tensor(self.data**p, _parents=(self,), _op="pow")
        out._backward = lambda g: self._accum(g * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,), _op="getitem")

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        out._backward = back
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,), _op="reshape")
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _parents=(self,), _op="transpose")
        out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _op="sum")

        def back(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            self._accum(np.broadcast_to(gg, self.data.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def abs(self):
        out = Tensor(np.abs(self.data), _parents=(self,), _op="abs")
        out._backward = lambda g: self._accum(g * np.sign(self.data))
        return out

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,), _op="exp")
        out._backward = lambda g: self._accum(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), _op="log")
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), _parents=(self,), _op="tanh")
        out._backward = lambda g: self._accum(g * (1.0 - out.data**2))
        return out

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(self.data * sig, _parents=(self,), _op="silu")
        out._backward = lambda g: self._accum(g * sig * (1.0 + self.data * (1.0 - sig)))
        return out

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # ---- reverse pass ----------------------------------------------------

    def backward(self):
        """Seed d(self)=1 and push gradients to every reachable parent.

        self must be scalar (the training loss)."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def stop_gradient(x: Tensor) -> Tensor:
    """Value of x detached from the graph (sg[.] in the VQ loss)."""
    return Tensor(x.data.copy())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with numpy matmul semantics (leading batch dims broadcast)."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b), _op="matmul")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.data.ndim > 1 else np.outer(g, b.data)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    out._backward = back
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 _parents=tuple(parts), _op="concat")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accum(piece)

    out._backward = back
    return out


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-stable softmax along the last axis of x / temperature."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, _parents=(x,), _op="softmax_rows")

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        x._accum((g - dot) * p / temperature)

    out._backward = back
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse, _parents=(x,), _op="log_softmax")
    p = np.exp(out.data)

    def back(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    out._backward = back
    return out


def cross_entropy(logits: Tensor, targets, ignore=()) -> Tensor:
    """Mean NLL of integer targets under softmax(logits).

    logits (B, V), targets (B,) int. Rows whose target is in `ignore` drop
    out of both the mean and the gradient. All rows ignored is defined as
    loss 0 with a RuntimeWarning rather than an error.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, V) logits, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.data.shape[0],):
        raise ShapeError(f"targets {targets.shape} vs logits {logits.data.shape}")
    V = logits.data.shape[1]
    keep = ~np.isin(targets, np.fromiter(ignore, dtype=np.int64, count=len(tuple(ignore)))) \
        if len(tuple(ignore)) else np.ones(len(targets), dtype=bool)
    if (targets[keep] < 0).any() or (targets[keep] >= V).any():
        raise ParameterError(f"target id outside [0, {V})")
    n = int(keep.sum())
    if n == 0:
        warnings.warn("cross_entropy: every position ignored; loss defined as 0", RuntimeWarning)
        out = Tensor(0.0, _parents=(logits,), _op="cross_entropy")
        out._backward = lambda g: logits._accum(np.zeros_like(logits.data))
        return out
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - z[np.arange(len(targets)), targets.clip(0, V - 1)]
    out = Tensor(nll[keep].mean(), _parents=(logits,), _op="cross_entropy")
    probs = np.exp(z - lse)

    def back(g):
        grad = probs.copy()
        grad[np.arange(len(targets)), targets.clip(0, V - 1)] -= 1.0
        grad[~keep] = 0.0
        logits._accum(grad * (float(g) / n))

    out._backward = back
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if (ids < 0).any() or (ids >= table.data.shape[0]).any():
        raise ParameterError(f"embedding id outside [0, {table.data.shape[0]})")
    out = Tensor(table.data[ids], _parents=(table,), _op="embedding")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)

    out._backward = back
    return out


def pad1d(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last (time) axis."""
    width = [(0, 0)] * (x.data.ndim - 1) + [(left, right)]
    out = Tensor(np.pad(x.data, width), _parents=(x,), _op="pad1d")
    T = x.data.shape[-1]
    out._backward = lambda g: x._accum(g[..., left:left + T])
    return out


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation. x (B, C_in, T), w (C_out, C_in, k) -> (B, C_out, T').

    No implicit padding: T' = floor((T - k) / stride) + 1. Callers pad
    explicitly (pad1d) when they want "same" length at stride 1.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: x {x.data.shape}, w {w.data.shape}")
    B, C, T = x.data.shape
    O, Cw, k = w.data.shape
    if C != Cw:
        raise ShapeError(f"conv1d channel mismatch: x {x.data.shape} vs w {w.data.shape}")
    if k > T:
        raise ShapeError(f"conv1d kernel {k} wider than input length {T}")
    if stride < 1:
        raise ParameterError(f"conv1d stride must be >= 1, got {stride}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)[:, :, ::stride]
    out = Tensor(np.einsum("bcti,oci->bot", win, w.data, optimize=True),
                 _parents=(x, w), _op="conv1d")
    Tp = out.data.shape[-1]

    def back(g):
        w._accum(np.einsum("bot,bcti->oci", g, win, optimize=True))
        gx = np.zeros_like(x.data)
        for i in range(k):
            # gx[b, c, t*stride + i] += sum_o g[b, o, t] * w[o, c, i]
            contrib = np.einsum("bot,oc->bct", g, w.data[:, :, i], optimize=True)
            gx[:, :, i:i + stride * Tp:stride] += contrib
        x._accum(gx)

    out._backward = back
    return out


def upsample1d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour repeat along the time axis; x (B, C, T) -> (B, C, T*factor)."""
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    out = Tensor(np.repeat(x.data, factor, axis=-1), _parents=(x,), _op="upsample1d")
    B, C, T = x.data.shape

    def back(g):
        x._accum(g.reshape(B, C, T, factor).sum(axis=-1))

    out._backward = back
    return out
