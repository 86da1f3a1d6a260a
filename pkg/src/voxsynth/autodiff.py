"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Sized for this package's needs: dense MLPs, sparse-grid convolutions expressed
as gather + matmul, trilinear interpolation, ray compositing, and scalar
losses. Every op records one node on a Tape; backward walks the tape once in
reverse. All math is float64 and bitwise reproducible for a fixed graph.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np
from scipy import sparse as _sp

__all__ = [
    "Tape", "Var", "ParamStore", "GatherPlan", "backward", "grad_check",
    "adam_step", "save_checkpoint", "load_checkpoint",
    "concat", "gather", "matmul", "relu", "leaky_relu", "sigmoid", "softplus",
    "exp", "log", "square", "absolute", "clip",
]


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("value", "parents", "vjp", "param_name")

    def __init__(self, value, parents=(), vjp=None, param_name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param_name = param_name


class Tape:
    """Ordered record of forward ops; one tape per forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _emit(self, value, parents=(), vjp=None, param_name=None) -> "Var":
        self.nodes.append(_Node(value, parents, vjp, param_name))
        return Var(self, len(self.nodes) - 1)

    def constant(self, x) -> "Var":
        return self._emit(_f64(x))

    def param(self, store: "ParamStore", name: str) -> "Var":
        return self._emit(store.tensors[name], param_name=name)


class Var:
    """Handle to one tape node; supports numpy-style arithmetic."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # keep numpy from absorbing us in mixed expressions

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("cannot mix vars from different tapes")
            return other
        return self.tape.constant(other)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        a, b = self, self._lift(other)
        av, bv = a.value, b.value
        return self.tape._emit(av + bv, (a.idx, b.idx),
                               lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, self._lift(other)
        av, bv = a.value, b.value
        return self.tape._emit(av - bv, (a.idx, b.idx),
                               lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, self._lift(other)
        av, bv = a.value, b.value
        return self.tape._emit(av * bv, (a.idx, b.idx),
                               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, self._lift(other)
        av, bv = a.value, b.value
        return self.tape._emit(av / bv, (a.idx, b.idx),
                               lambda g: (_unbroadcast(g / bv, av.shape),
                                          _unbroadcast(-g * av / (bv * bv), bv.shape)))

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return self * (-1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, key):
        v = self.value
        out = v[key]
        shape = v.shape

        def vjp(g):
            z = np.zeros(shape)
            z[key] = g
            return (z,)

        return self.tape._emit(out, (self.idx,), vjp)

    # -- shape and reductions ----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.value.shape
        return self.tape._emit(self.value.reshape(shape), (self.idx,),
                               lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        v = self.value
        out = v.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, v.shape).copy(),)

        return self.tape._emit(out, (self.idx,), vjp)

    def mean(self, axis=None, keepdims=False):
        v = self.value
        n = v.size if axis is None else v.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis: int):
        v = self.value
        return self.tape._emit(np.cumsum(v, axis=axis), (self.idx,),
                               lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))

    def detach(self) -> "Var":
        return self.tape.constant(self.value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the broadcast-input shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- primitive ops -----------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return a.tape._emit(av @ bv, (a.idx, b.idx),
                        lambda g: (g @ bv.T, av.T @ g))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = list(parts)
    tape = parts[0].tape
    parts = [p if isinstance(p, Var) else tape.constant(p) for p in parts]
    vals = [p.value for p in parts]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._emit(np.concatenate(vals, axis=axis), tuple(p.idx for p in parts), vjp)


class GatherPlan:
    """Reusable row-gather with a precomputed sparse scatter for backward.

    Index -1 (or n_rows) selects an implicit zero row whose gradient is
    discarded; that makes missing-neighbor handling uniform.
    """

    def __init__(self, idx: np.ndarray, n_rows: int):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < -1 or idx.max() > n_rows):
            raise ValueError("gather index out of range")
        self.idx = idx
        self.n_rows = n_rows
        flat = idx.ravel()
        self._valid = flat >= 0
        # forward uses n_rows as the zero-row sentinel
        self._fwd = np.where(self._valid, flat, n_rows)
        cols = np.nonzero(self._valid)[0]
        rows = flat[cols]
        self._scatter = _sp.csr_matrix(
            (np.ones(len(cols)), (rows, cols)), shape=(n_rows, flat.size))

    def take(self, x: np.ndarray) -> np.ndarray:
        xp = np.concatenate([x, np.zeros((1,) + x.shape[1:])], axis=0)
        return xp[self._fwd].reshape(self.idx.shape + x.shape[1:])

    def scatter(self, g: np.ndarray) -> np.ndarray:
        tail = g.shape[len(self.idx.shape):]
        return (self._scatter @ g.reshape(self.idx.size, -1)).reshape((self.n_rows,) + tail)


def gather(x: Var, plan) -> Var:
    """Select rows of x (axis 0) by integer index array or GatherPlan."""
    if not isinstance(plan, GatherPlan):
        plan = GatherPlan(np.asarray(plan), x.value.shape[0])
    if plan.n_rows != x.value.shape[0]:
        raise ValueError("gather plan built for a different row count")
    return x.tape._emit(plan.take(x.value), (x.idx,), lambda g: (plan.scatter(g),))


def relu(x: Var) -> Var:
    v = x.value
    return x.tape._emit(np.maximum(v, 0.0), (x.idx,), lambda g: (g * (v > 0),))


def leaky_relu(x: Var, alpha: float = 0.1) -> Var:
    v = x.value
    return x.tape._emit(np.where(v > 0, v, alpha * v), (x.idx,),
                        lambda g: (g * np.where(v > 0, 1.0, alpha),))


def sigmoid(x: Var) -> Var:
    v = x.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return x.tape._emit(s, (x.idx,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Var) -> Var:
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def vjp(g):
        s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                     np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        return (g * s,)

    return x.tape._emit(out, (x.idx,), vjp)


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return x.tape._emit(out, (x.idx,), lambda g: (g * out,))


def log(x: Var) -> Var:
    v = x.value
    if np.any(v <= 0):
        raise ValueError("log requires strictly positive input")
    return x.tape._emit(np.log(v), (x.idx,), lambda g: (g / v,))


def square(x: Var) -> Var:
    v = x.value
    return x.tape._emit(v * v, (x.idx,), lambda g: (g * 2.0 * v,))


def absolute(x: Var) -> Var:
    v = x.value
    return x.tape._emit(np.abs(v), (x.idx,), lambda g: (g * np.sign(v),))


def clip(x: Var, lo=None, hi=None) -> Var:
    """Clamp to constant bounds; gradient passes only strictly inside."""
    v = x.value
    out = np.clip(v, lo, hi)
    inside = np.ones_like(v, dtype=bool)
    if lo is not None:
        inside &= v > lo
    if hi is not None:
        inside &= v < hi
    return x.tape._emit(out, (x.idx,), lambda g: (g * inside,))


# -- backward ----------------------------------------------------------------


def backward(root: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar root; returns gradients keyed by param name."""
    if root.value.size != 1:
        raise ValueError("backward root must be scalar")
    nodes = root.tape.nodes
    grads: list = [None] * (root.idx + 1)
    grads[root.idx] = np.ones_like(nodes[root.idx].value)
    out: dict[str, np.ndarray] = {}
    for i in range(root.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.param_name is not None:
            prev = out.get(node.param_name)
            out[node.param_name] = g if prev is None else prev + g
        if node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if grads[p] is None:
                grads[p] = pg
            else:
                grads[p] = grads[p] + pg
        grads[i] = None  # free memory as we go
    return out


# -- parameters and optimizer -------------------------------------------------


def xavier_limit(shape) -> float:
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    fan_out = int(shape[-1])
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamStore:
    """Named float64 tensors with trainable flags and Adam state."""

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, shape, rng: np.random.Generator | None = None,
            init: str = "xavier", trainable: bool = True) -> np.ndarray:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "xavier":
            lim = xavier_limit(shape)
            value = rng.uniform(-lim, lim, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.tensors[name] = _f64(value)
        self.trainable[name] = trainable
        self._m[name] = np.zeros(shape)
        self._v[name] = np.zeros(shape)
        self._t[name] = 0
        return self.tensors[name]

    def set_(self, name: str, value: np.ndarray):
        if self.tensors[name].shape != np.shape(value):
            raise ValueError(f"shape mismatch for {name!r}")
        self.tensors[name] = _f64(value)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def state_dict(self, include_opt: bool = True) -> dict[str, np.ndarray]:
        out = dict(self.tensors)
        if include_opt:
            for n in self.tensors:
                if self._t[n] > 0:
                    out[f"opt.m/{n}"] = self._m[n]
                    out[f"opt.v/{n}"] = self._v[n]
                    out[f"opt.t/{n}"] = np.array([float(self._t[n])])
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for n in self.tensors:
            if n not in state:
                raise ValueError(f"checkpoint is missing tensor {n!r}")
            self.set_(n, state[n])
            if f"opt.m/{n}" in state:
                self._m[n] = _f64(state[f"opt.m/{n}"])
                self._v[n] = _f64(state[f"opt.v/{n}"])
                self._t[n] = int(state[f"opt.t/{n}"][0])


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: Sequence[str] | None = None):
    """One bias-corrected Adam update on the named (or all trainable) tensors."""
    targets = list(names) if names is not None else list(grads)
    for name in targets:
        if name not in grads or not store.trainable.get(name, False):
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        t = store._t[name] + 1
        store._t[name] = t
        m = store._m[name] = beta1 * store._m[name] + (1 - beta1) * g
        v = store._v[name] = beta2 * store._v[name] + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        store.tensors[name] = store.tensors[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(fn: Callable[[ParamStore], Var], store: ParamStore,
               names: Sequence[str] | None = None, samples_per_tensor: int = 4,
               h: float = 1e-3, rng: np.random.Generator | None = None) -> float:
    """Compare backward against central differences; returns max relative error.

    fn must rebuild its graph from the store on every call and return a scalar
    Var. Differences below 1e-9 count as exact to keep dead-zero gradients from
    inflating the relative measure.
    """
    rng = rng or np.random.default_rng(0)
    root = fn(store)
    grads = backward(root)
    check = names if names is not None else [n for n in store.tensors if store.trainable[n]]
    worst = 0.0
    for name in check:
        tensor = store.tensors[name]
        analytic = grads.get(name, np.zeros_like(tensor))
        k = min(samples_per_tensor, tensor.size)
        flat_idx = rng.choice(tensor.size, size=k, replace=False)
        for fi in flat_idx:
            ij = np.unravel_index(fi, tensor.shape)
            orig = tensor[ij]
            bumped = tensor.copy()
            bumped[ij] = orig + h
            store.tensors[name] = bumped
            f_plus = float(fn(store).value)
            bumped = tensor.copy()
            bumped[ij] = orig - h
            store.tensors[name] = bumped
            f_minus = float(fn(store).value)
            store.tensors[name] = tensor
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[ij])
            diff = abs(a - numeric)
            if diff < 1e-9:
                continue
            worst = max(worst, diff / max(abs(a), abs(numeric), 1e-8))
    return worst


# -- checkpoint serialization --------------------------------------------------

_MAGIC = b"CNVS"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write tensors in file order = dict order; float64 little-endian payload."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            value = _f64(value)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        value = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = value.astype(np.float64)
    return out
