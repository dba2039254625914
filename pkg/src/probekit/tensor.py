"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure that maps the output cotangent to input
cotangents; :func:`backward` replays those closures in reverse topological
order. :func:`stop_grad` returns a value-identical tensor with no history,
which is how gradient routing through the sampler is expressed.
"""
from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from probekit.errors import ContractError, NumericError, OracleError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32}
# per thread, so worker pools cannot interleave save/restore of the flag
_local = threading.local()


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _state["dtype"] = _DTYPES[mode]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default float width (``"f32"`` or ``"f64"``)."""
    old = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops inside produce detached tensors."""
    old = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return stop_grad(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value in operation input")


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible dims {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise and algebraic ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    _check_finite(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    _check_finite(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")
    _check_finite(a.data, b.data)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    _check_finite(a.data)
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    _check_finite(a.data)
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(z))`` computed without cancellation for large ``|z|``."""
    _check_finite(a.data)
    z = a.data
    return _result(np.logaddexp(z.dtype.type(0), z), (a,), lambda g: (g * _sigmoid_np(z),))


def relu(a: Tensor) -> Tensor:
    _check_finite(a.data)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    _check_finite(a.data)
    z = a.data
    s = _sigmoid_np(z)
    return _result(z * s, (a,), lambda g: (g * (s * (1 + z * (1 - s))),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only; avoids overflow warnings
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible dims {a.shape} and {b.shape}")
    _check_finite(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got dims {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    orig = a.shape
    return _result(out, (a,), lambda g: (g.reshape(orig),))


def take(a: Tensor, index) -> Tensor:
    """Basic indexing / slicing (no fancy-index duplicates)."""
    out = a.data[index]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible dims {[t.shape for t in tensors]}")
    _check_finite(*(t.data for t in tensors))
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(n))


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of logits ``z`` against 0/1 targets ``y``."""
    y = _lift(y, z)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    return mean(sub(softplus(z), mul(y, z)))


def embed_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embed_lookup: table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: index out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation), NCHW input, OIHW weight."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible dims {x.shape} and {w.shape}")
    _check_finite(x.data, w.data)
    xd = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    n, c, h, wd = xd.shape
    o, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # win: (n, c, oh, ow, kh, kw)
    out = np.einsum("ncijkl,ockl->noij", win, w.data, optimize=True)
    wdata = w.data
    xshape = x.shape

    def vjp(g):
        gw = np.einsum("noij,ncijkl->ockl", g, win, optimize=True)
        gxp = np.zeros((n, c, h, wd), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += np.einsum(
                    "noij,oc->ncij", g, wdata[:, :, ki, kj]
                )
        gx = gxp[:, :, pad : pad + xshape[2], pad : pad + xshape[3]] if pad else gxp
        return gx, gw

    return _result(out.astype(x.data.dtype, copy=False), (x, w), vjp)


def stop_grad(x: Tensor) -> Tensor:
    """Identity on values; the returned tensor has no history."""
    return Tensor(x.data)


_FORWARD = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": lambda x, factor: scale(x, factor),
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "silu": silu,
    "mean": mean,
    "sum": sum,
    "mse": mse,
    "bce_with_logits": bce_with_logits,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "reshape": reshape,
    "embed_lookup": embed_lookup,
    "conv2d": conv2d,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("conv2d", [x, w], stride=2, pad=1)``."""
    if kind not in _FORWARD:
        raise ValueError(f"unknown op kind {kind!r}")
    return _FORWARD[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# parameters and backward


class ParamStore:
    """Ordered name -> Tensor map; frozen entries never receive gradient."""

    def __init__(self, entries: Mapping[str, np.ndarray | Tensor] | None = None):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen_names: set[str] = set()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=get_dtype()))
        t.name = name
        t.requires_grad = not frozen
        self.entries[name] = t
        if frozen:
            self.frozen_names.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def trainable(self) -> list[str]:
        return [n for n in self.entries if n not in self.frozen_names]

    def freeze(self, names: Iterable[str] | None = None) -> None:
        for n in self.entries if names is None else names:
            self.frozen_names.add(n)
            self.entries[n].requires_grad = False

    def unfreeze(self, names: Iterable[str] | None = None) -> None:
        for n in self.entries if names is None else names:
            self.frozen_names.discard(n)
            self.entries[n].requires_grad = True

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily freeze every entry."""
        before = set(self.frozen_names)
        self.freeze()
        try:
            yield self
        finally:
            self.unfreeze([n for n in self.entries if n not in before])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for n, v in values.items():
            if n not in self.entries:
                raise KeyError(f"unknown parameter {n!r}")
            if np.shape(v) != self.entries[n].shape:
                raise ShapeError(f"{n}: expected {self.entries[n].shape}, got {np.shape(v)}")
            self.entries[n].data = np.array(v, dtype=self.entries[n].data.dtype)

    def astype(self, dtype) -> None:
        for t in self.entries.values():
            t.data = t.data.astype(dtype)


GradMap = dict  # name -> ndarray, keys a subset of the store's trainable names


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(
    loss: Tensor,
    params: ParamStore | None = None,
    inputs: Sequence[Tensor] = (),
) -> GradMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Every reachable leaf that requires grad gets its ``.grad`` overwritten
    with the result of this pass. Returns a GradMap over the trainable names
    of ``params`` (zeros for unreachable entries); leaves listed in
    ``inputs`` are reachable afterwards through their ``.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.shape}")
    for t in inputs:
        t.grad = None
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = _toposort(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.pop(id(node), None) if node._vjp is not None else grads.get(id(node))
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out: GradMap = {}
    if params is not None:
        for name in params.trainable():
            t = params[name]
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
                t.grad = g
            out[name] = g
    return out


def finite_diff_check(
    fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-12)``.
    Raises :class:`OracleError` if ``fn`` is not deterministic.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with no_grad():
        base1 = np.array(fn(params).data, copy=True)
        base2 = np.array(fn(params).data, copy=True)
    if not np.array_equal(base1, base2):
        raise OracleError("function is not deterministic at the base point")
    analytic = backward(fn(params), params)
    worst = 0.0
    with no_grad():
        for name in params.trainable():
            t = params[name]
            flat = t.data.reshape(-1)
            num = np.empty(flat.shape, dtype=np.float64)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = fn(params).item()
                flat[i] = old - eps
                fm = fn(params).item()
                flat[i] = old
                num[i] = (fp - fm) / (2 * eps)
            ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-12)
            if ana.size:
                worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
