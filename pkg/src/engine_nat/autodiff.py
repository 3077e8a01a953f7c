"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every op accepts :class:`Tensor` or plain arrays. When none of the inputs lives
on a :class:`Tape` the op runs eagerly and records nothing, so evaluation code
shares the training code path at plain-numpy cost.

    >>> tape = Tape()
    >>> x = tape.watch(np.array([1.0, 2.0]))
    >>> y = sum_(x * x)
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "AutodiffError", "NonFiniteGradient",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "stack", "slice_",
    "take", "reshape", "swapaxes", "tanh", "sigmoid", "relu", "exp", "log",
    "sqrt", "softmax_rows", "log_softmax", "sum_", "mean", "dropout",
    "custom_grad", "CUSTOM_RULES", "grad_check", "AdamState", "adam_step",
    "save_params", "load_params",
]


class AutodiffError(RuntimeError):
    pass


class NonFiniteGradient(AutodiffError):
    pass


class Tensor:
    """A float64 array, optionally bound to a node of a tape."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, index: slice_(self, index)


@dataclass
class _Node:
    op: str
    parents: tuple
    backward: Callable | None


class Tape:
    """Append-only record of ops; backward walks it in strict reverse order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register a leaf (a parameter or an input we want gradients for)."""
        if self._spent:
            raise AutodiffError("tape already consumed by backward; start a new tape")
        self.nodes.append(_Node("leaf", (), None))
        return Tensor(value, self, len(self.nodes) - 1)

    def _record(self, op, value, parents, backward) -> Tensor:
        if self._spent:
            raise AutodiffError("tape already consumed by backward; start a new tape")
        ids = tuple(p.node_id if isinstance(p, Tensor) and p.tape is self else None
                    for p in parents)
        self.nodes.append(_Node(op, ids, backward))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, output: Tensor, seed=None) -> dict[int, np.ndarray]:
        if output.tape is not self:
            raise AutodiffError("output was not computed on this tape")
        if self._spent:
            raise AutodiffError("backward already ran on this tape; run a new forward first")
        self._spent = True
        if seed is None:
            if output.data.size != 1:
                raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {output.node_id: np.asarray(seed, dtype=np.float64)}
        for nid in range(output.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            del grads[nid]
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        return grads

    def gradient(self, output: Tensor, wrt):
        """Gradients of scalar ``output`` for each tensor in ``wrt`` (list or mapping)."""
        grads = self.backward(output)

        def lookup(t: Tensor):
            if t.tape is not self:
                raise AutodiffError("gradient requested for a tensor not on this tape")
            g = grads.get(t.node_id)
            return np.zeros_like(t.data) if g is None else g

        if isinstance(wrt, Mapping):
            return {k: lookup(t) for k, t in wrt.items()}
        return [lookup(t) for t in wrt]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise AutodiffError("operands live on different tapes")
    return tape


def _req(x) -> bool:
    return isinstance(x, Tensor) and x.tape is not None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(op, value, parents, backward):
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape._record(op, value, parents, backward)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    ra, rb = _req(a), _req(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None)

    return _emit("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    ra, rb = _req(a), _req(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if ra else None, _unbroadcast(-g, sb) if rb else None)

    return _emit("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ra, rb = _req(a), _req(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if ra else None,
                _unbroadcast(g * ad, bd.shape) if rb else None)

    return _emit("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ra, rb = _req(a), _req(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if ra else None,
                _unbroadcast(-g * out / bd, bd.shape) if rb else None)

    return _emit("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics for operands with ndim >= 2 (batch dims broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ra, rb = _req(a), _req(b)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if ra else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if rb else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    reqs = [_req(t) for t in ts]

    def back(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if r else None for p, r in zip(parts, reqs))

    return _emit("concat", out, tuple(ts), back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: incompatible shapes {sorted(shapes)}")
    reqs = [_req(t) for t in ts]

    def back(g):
        return tuple(np.take(g, i, axis=axis) if r else None for i, r in enumerate(reqs))

    return _emit("stack", np.stack([t.data for t in ts], axis=axis), tuple(ts), back)


def slice_(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ValueError(f"slice: bad index {index!r} for shape {shape}: {exc}") from None

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("slice", out, (a,), back)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` (embedding lookup)."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take", table.data[idx], (table,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = _as_tensor(a)
    return _emit("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax_rows(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    q = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (q * (g - (g * q).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", q, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), back)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    a = _as_tensor(a)
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- custom jacobians

def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


CUSTOM_RULES = ("identity-passthrough", "softmax-jacobian-at-z", "softmax-jacobian-at-shifted-z")


def custom_grad(forward_value, input, rule: str, shift=None) -> Tensor:
    """Return ``forward_value`` while routing gradients to ``input`` through ``rule``.

    ``identity-passthrough`` hands the upstream gradient through unchanged.
    ``softmax-jacobian-at-z`` applies the softmax Jacobian evaluated at ``input``;
    ``softmax-jacobian-at-shifted-z`` evaluates it at ``input + shift``.
    The true derivative of the forward map is ignored.
    """
    x = _as_tensor(input)
    value = np.asarray(forward_value.data if isinstance(forward_value, Tensor) else forward_value,
                       dtype=np.float64)
    if value.shape != x.shape:
        raise ValueError(f"custom_grad: value shape {value.shape} != input shape {x.shape}")
    if rule == "identity-passthrough":
        back = lambda g: (g,)
    elif rule in ("softmax-jacobian-at-z", "softmax-jacobian-at-shifted-z"):
        if rule == "softmax-jacobian-at-shifted-z":
            if shift is None:
                raise ValueError("softmax-jacobian-at-shifted-z needs a shift")
            q = _softmax_np(x.data + shift)
        else:
            q = _softmax_np(x.data)
        back = lambda g: (q * (g - (g * q).sum(axis=-1, keepdims=True)),)
    else:
        raise ValueError(f"unknown custom gradient rule {rule!r}; expected one of {CUSTOM_RULES}")
    return _emit(f"custom:{rule}", value, (x,), back)


# ---------------------------------------------------------------- checking

def grad_check(scalar_fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Worst coordinate-wise relative error between reverse mode and central differences."""
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    tape = Tape()
    x = tape.watch(x0.copy())
    out = scalar_fn(x)
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got output shape {out.shape}")
    if out.tape is tape:
        analytic = tape.gradient(out, [x])[0]
    else:
        analytic = np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += epsilon
        xm[i] -= epsilon
        fp = float(_as_tensor(scalar_fn(Tensor(xp.reshape(x0.shape)))).data)
        fm = float(_as_tensor(scalar_fn(Tensor(xm.reshape(x0.shape)))).data)
        flat[i] = (fp - fm) / (2 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """One Adam update with bias correction and coupled L2 decay (``grad += wd * param``).

    Only names present in ``grads`` are updated. Parameter arrays are replaced,
    not mutated, so earlier snapshots stay valid.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step refused")
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"ENGCKPT1"


def save_params(params: Mapping[str, np.ndarray], path) -> None:
    """Flat checkpoint: text header of names and shapes, then little-endian float64 data."""
    names = sorted(params)
    header = "\n".join(f"{n}\t{','.join(map(str, params[n].shape))}" for n in names).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = fh.read(n).decode()
        out = {}
        for line in header.splitlines() if header else []:
            name, dims = line.split("\t")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameter data")
    return out


def watch_all(tape: Tape, params: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> dict:
    """Tape leaves for ``names`` (default all); the rest pass through as constants."""
    chosen = set(params) if names is None else set(names)
    return {k: (tape.watch(v) if k in chosen else v) for k, v in params.items()}
