"""Reverse-mode differentiation over dense numpy arrays.

Every backward rule is written in terms of recorded ``Tensor`` operations, so
with ``create_graph=True`` the gradients are themselves differentiable. That
is what lets the meta-learner differentiate the query loss through a chain of
inner gradient steps.

Layout conventions: images are NHWC, convolution kernels are
``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

_state = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def set_grad_enabled(mode: bool):
    previous = is_grad_enabled()
    _state.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _state.grad_enabled = previous


def no_grad():
    return set_grad_enabled(False)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, detail: str):
        self.primitive = primitive
        self.detail = detail
        super().__init__(f"{primitive}: {detail}")


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad_fn: Function | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = False
        t.grad_fn = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic; operands of different shape are broadcast explicitly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class ComputationTrace:
    """Ordered record of the primitives executed while the trace is active.

    Only operations whose inputs require gradient are recorded. ``replay``
    re-executes the recorded forward rules from the leaf values and returns
    the recomputed arrays, keyed by position in the trace.
    """

    def __init__(self):
        self.entries: list[tuple[Function, Tensor]] = []

    def __enter__(self):
        stack = getattr(_state, "traces", None)
        if stack is None:
            stack = _state.traces = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.traces.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, fn: "Function", out: Tensor) -> None:
        self.entries.append((fn, out))

    def replay(self) -> list[np.ndarray]:
        values: dict[int, np.ndarray] = {}
        results = []
        for fn, out in self.entries:
            args = [values.get(id(t), t.data) for t in fn.inputs]
            value = fn.forward(*args)
            values[id(out)] = value
            results.append(value)
        return results


def _active_traces():
    return getattr(_state, "traces", None) or ()


class Function:
    """A differentiable primitive.

    ``forward`` maps numpy arrays to a numpy array. ``backward`` receives the
    output gradient as a Tensor and returns one Tensor (or None) per input,
    built from Tensor operations so that it can be recorded in turn.
    """

    name = "op"

    def __init__(self, **attrs):
        self.__dict__.update(attrs)
        self.inputs: tuple[Tensor, ...] = ()

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad: Tensor):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: TensorLike, **attrs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(**attrs)
        out = Tensor._wrap(fn.forward(*(t.data for t in tensors)))
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            out.requires_grad = True
            out.grad_fn = fn
            for trace in _active_traces():
                trace.record(fn, out)
        return out


def _check_same(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(name, f"operand shapes {a.shape} and {b.shape} differ")


class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return g * b, g * a


class Div(Function):
    name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        gb = g / b
        return gb, -(gb * a / b)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Scale(Function):
    """Multiplication by a fixed python scalar."""

    name = "scale"

    def forward(self, a):
        return a * self.factor

    def backward(self, g):
        return (Scale.apply(g, factor=self.factor),)


class Power(Function):
    name = "power"

    def forward(self, a):
        return a ** self.exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.exponent
        return (g * Scale.apply(Power.apply(a, exponent=p - 1), factor=p),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g * Exp.apply(a),)


class Log(Function):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g / a,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    def backward(self, g):
        (a,) = self.inputs
        s = Sigmoid.apply(a)
        return (g * s * (1.0 - s),)


class Softplus(Function):
    """log(1 + exp(a)), evaluated stably."""

    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, g):
        (a,) = self.inputs
        return (g * Sigmoid.apply(a),)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = (a > 0).astype(a.dtype)
        return a * self.mask

    def backward(self, g):
        return (g * Tensor._wrap(self.mask),)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError("matmul", f"expected 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"inner dimensions {a.shape[1]} and {b.shape[0]} differ")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        return g @ transpose(b), transpose(a) @ g


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g):
        inverse = tuple(np.argsort(self.axes)) if self.axes is not None else None
        return (Transpose.apply(g, axes=inverse),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError("reshape", f"cannot reshape {a.shape} into {self.shape}") from None

    def backward(self, g):
        return (Reshape.apply(g, shape=self.in_shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return np.ascontiguousarray(np.broadcast_to(a, self.shape))
        except ValueError:
            raise ShapeError("broadcast_to", f"cannot broadcast {a.shape} to {self.shape}") from None

    def backward(self, g):
        return (SumTo.apply(g, shape=self.in_shape),)


class SumTo(Function):
    """Sum over the axes that a broadcast to ``a.shape`` would have expanded."""

    name = "sum_to"

    def forward(self, a):
        self.in_shape = a.shape
        lead = a.ndim - len(self.shape)
        if lead < 0:
            raise ShapeError("sum_to", f"cannot reduce {a.shape} to {self.shape}")
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(self.shape) if n == 1 and a.shape[lead + i] != 1
        )
        out = a.sum(axis=axes, keepdims=True) if axes else a
        return out.reshape(self.shape)

    def backward(self, g):
        return (BroadcastTo.apply(g, shape=self.in_shape),)


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        if not self.keepdims and self.axis is not None:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            shape = list(self.in_shape)
            for ax in axes:
                shape[ax % len(shape)] = 1
            g = Reshape.apply(g, shape=tuple(shape))
        elif self.axis is None:
            g = Reshape.apply(g, shape=(1,) * len(self.in_shape))
        return (BroadcastTo.apply(g, shape=self.in_shape),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays):
        ref = arrays[0].shape
        ax = self.axis % len(ref)
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(
                arr.shape[i] != ref[i] for i in range(len(ref)) if i != ax
            ):
                raise ShapeError("concat", f"shapes {ref} and {arr.shape} differ off axis {self.axis}")
        self.sizes = [arr.shape[ax] for arr in arrays]
        self.ax = ax
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        grads = []
        start = 0
        for n in self.sizes:
            index = [slice(None)] * g.ndim
            index[self.ax] = slice(start, start + n)
            grads.append(Slice.apply(g, index=tuple(index)))
            start += n
        return tuple(grads)


class Slice(Function):
    name = "slice"

    def forward(self, a):
        self.in_shape = a.shape
        return np.ascontiguousarray(a[self.index])

    def backward(self, g):
        return (Embed.apply(g, index=self.index, shape=self.in_shape),)


class Embed(Function):
    """Place ``a`` at ``index`` inside a zero array of ``shape``; adjoint of Slice."""

    name = "embed"

    def forward(self, a):
        out = np.zeros(self.shape, dtype=a.dtype)
        out[self.index] = a
        return out

    def backward(self, g):
        return (Slice.apply(g, index=self.index),)


class Gather(Function):
    """``out = a.ravel()[index]`` with entries of -1 producing zeros."""

    name = "gather"

    def forward(self, a):
        self.in_shape = a.shape
        flat = np.concatenate([a.ravel(), np.zeros(1, dtype=a.dtype)])
        return flat[self.index]

    def backward(self, g):
        return (ScatterAdd.apply(g, index=self.index, shape=self.in_shape),)


class ScatterAdd(Function):
    """Adjoint of Gather: sum ``a`` into a zero array of ``shape`` at ``index``."""

    name = "scatter_add"

    def forward(self, a):
        n = int(np.prod(self.shape))
        idx = np.where(self.index < 0, n, self.index).ravel()
        out = np.bincount(idx, weights=a.ravel(), minlength=n + 1)[:n]
        return out.astype(a.dtype, copy=False).reshape(self.shape)

    def backward(self, g):
        return (Gather.apply(g, index=self.index),)


# ---------------------------------------------------------------------------
# functional surface


def _binary(cls, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(cls.name, f"operand shapes {a.shape} and {b.shape} differ") from None
        if a.shape != shape:
            a = BroadcastTo.apply(a, shape=shape)
        if b.shape != shape:
            b = BroadcastTo.apply(b, shape=shape)
    return cls.apply(a, b)


def add(a, b):
    return _binary(Add, a, b)


def sub(a, b):
    return _binary(Sub, a, b)


def mul(a, b):
    return _binary(Mul, a, b)


def div(a, b):
    return _binary(Div, a, b)


def scale(a, factor: float):
    return Scale.apply(a, factor=float(factor))


def power(a, exponent: float):
    return Power.apply(a, exponent=exponent)


def square(a):
    a = as_tensor(a)
    return Mul.apply(a, a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def softplus(a):
    return Softplus.apply(a)


def relu(a):
    return Relu.apply(a)


def matmul(a, b):
    return MatMul.apply(a, b)


def transpose(a, axes=None):
    return Transpose.apply(a, axes=tuple(axes) if axes is not None else None)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def broadcast_to(a, shape):
    return BroadcastTo.apply(a, shape=tuple(shape))


def tsum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return Scale.apply(tsum(a, axis, keepdims), factor=1.0 / count)


def concat(tensors: Sequence[TensorLike], axis: int = -1):
    if not tensors:
        raise ShapeError("concat", "no operands")
    return Concat.apply(*tensors, axis=axis)


@lru_cache(maxsize=64)
def _im2col_index(shape, kh, kw, stride, pad):
    n, h, w, c = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    rows = (np.arange(ho) * stride - pad)[:, None] + np.arange(kh)[None, :]  # (ho, kh)
    cols = (np.arange(wo) * stride - pad)[:, None] + np.arange(kw)[None, :]  # (wo, kw)
    r = rows[:, None, :, None, None]
    q = cols[None, :, None, :, None]
    ch = np.arange(c)[None, None, None, None, :]
    valid = (r >= 0) & (r < h) & (q >= 0) & (q < w)
    pix = (r * w + q) * c + ch  # (ho, wo, kh, kw, c)
    pix = np.where(valid, pix, -1)
    offsets = (np.arange(n) * h * w * c)[:, None, None, None, None, None]
    index = np.where(pix[None] >= 0, pix[None] + offsets, -1)
    index = index.reshape(n * ho * wo, kh * kw * c)
    index.setflags(write=False)
    return index, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | str = "same"):
    """2-D cross-correlation of an NHWC batch with a ``(kh, kw, cin, cout)`` kernel.

    Implemented as an im2col gather followed by a matmul, so both passes and
    their derivatives reduce to Gather/ScatterAdd and MatMul.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError("conv2d", f"input must be NHWC, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError("conv2d", f"kernel must be (kh, kw, cin, cout), got shape {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ShapeError("conv2d", f"input has {x.shape[3]} channels, kernel expects {cin}")
    if padding == "same":
        if kh != kw or kh % 2 != 1:
            raise ShapeError("conv2d", f"'same' padding needs an odd square kernel, got {kh}x{kw}")
        padding = kh // 2
    index, ho, wo = _im2col_index(x.shape, kh, kw, stride, int(padding))
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {x.shape[1:3]}")
    cols = Gather.apply(x, index=index)
    out = cols @ reshape(weight, (kh * kw * cin, cout))
    if bias is not None:
        out = out + bias
    return reshape(out, (x.shape[0], ho, wo, cout))


def max_pool2d(x, size: int = 2):
    """Non-overlapping max pooling; the selected winners form a fixed gather."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ShapeError("max_pool2d", f"spatial dims {(h, w)} not divisible by {size}")
    ho, wo = h // size, w // size
    flat_index = np.arange(x.size).reshape(n, ho, size, wo, size, c)
    flat_index = flat_index.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    windows = x.data.ravel()[flat_index]
    winner = np.take_along_axis(flat_index, windows.argmax(axis=-1)[..., None], axis=-1)
    return Gather.apply(x, index=winner[..., 0])


def avg_pool2d(x, size: int):
    x = as_tensor(x)
    if size == 1:
        return x
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ShapeError("avg_pool2d", f"spatial dims {(h, w)} not divisible by {size}")
    blocks = reshape(x, (n, h // size, size, w // size, size, c))
    return mean(blocks, axis=(2, 4))


# ---------------------------------------------------------------------------
# differentiation


WeightCollection = Union[Mapping[str, Tensor], Sequence[Tensor]]


def _as_list(wrt):
    if isinstance(wrt, Mapping):
        return list(wrt.keys()), list(wrt.values())
    if isinstance(wrt, Tensor):
        return None, [wrt]
    return None, list(wrt)


def _rebuild(keys, values, original):
    if keys is not None:
        return dict(zip(keys, values))
    if isinstance(original, Tensor):
        return values[0]
    return values


def _topological(root: Tensor, stop: frozenset = frozenset()) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.grad_fn is not None and id(node) not in stop:
            for parent in node.grad_fn.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _nested(targets: list[Tensor], wanted: set[int]) -> bool:
    """True if some requested tensor is an ancestor of another one."""
    stack = [p for t in targets if t.grad_fn is not None for p in t.grad_fn.inputs]
    seen: set[int] = set()
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        if id(node) in wanted:
            return True
        seen.add(id(node))
        if node.grad_fn is not None:
            stack.extend(node.grad_fn.inputs)
    return False


def grad(loss: Tensor, wrt, create_graph: bool = False, allow_unused: bool = False):
    """Gradient of a scalar ``loss`` with respect to each tensor in ``wrt``.

    ``wrt`` may be a single Tensor, a sequence, or a name -> Tensor mapping;
    the result has the same structure. With ``create_graph`` the gradient
    computation is itself recorded, so the result can be differentiated again.
    A weight the loss does not depend on raises GradientError unless
    ``allow_unused`` is set, in which case its gradient is zeros.
    """
    if loss.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    keys, targets = _as_list(wrt)
    for i, t in enumerate(targets):
        if not t.requires_grad:
            label = keys[i] if keys else i
            raise GradientError(f"weight {label!r} does not require grad")
    wanted = {id(t) for t in targets}
    if not loss.requires_grad:
        order = []
    else:
        # nothing upstream of a requested tensor is needed, unless another
        # requested tensor lives there; fall back to the full graph then
        order = _topological(loss, frozenset(wanted))
        if not wanted <= {id(t) for t in order} or _nested(targets, wanted):
            order = _topological(loss)
    on_trace = {id(t) for t in order}
    grads: dict[int, Tensor] = {}
    kept: dict[int, Tensor] = {}
    if order:
        grads[id(loss)] = Tensor._wrap(np.ones(loss.shape, dtype=loss.data.dtype))
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                kept[id(node)] = g
            fn = node.grad_fn
            if fn is None:
                continue
            for parent, pg in zip(fn.inputs, fn.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else Add.apply(prev, pg)
    results = []
    for i, t in enumerate(targets):
        if id(t) in kept:
            results.append(kept[id(t)])
        elif allow_unused:
            results.append(Tensor._wrap(np.zeros(t.shape, dtype=t.data.dtype)))
        else:
            label = keys[i] if keys else i
            where = "not on the trace" if id(t) not in on_trace else "unreached"
            raise GradientError(f"weight {label!r} is {where} of the loss (detached graph?)")
    return _rebuild(keys, results, wrt)


def finite_difference_gradient(
    fn: Callable, wrt, epsilon: float = 1e-6
):
    """Central-difference gradient of scalar ``fn`` at the values in ``wrt``.

    ``fn`` is called with the same structure as ``wrt`` (fresh tensors with
    perturbed values) and must return a scalar. Returns numpy arrays in the
    structure of ``wrt``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    keys, targets = _as_list(wrt)
    base = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in targets]

    def evaluate(values):
        with no_grad():
            out = fn(_rebuild(keys, [Tensor(v) for v in values], wrt))
        value = float(out.data if isinstance(out, Tensor) else out)
        if not np.isfinite(value):
            raise GradientError(f"non-finite function value {value}")
        return value

    grads = []
    for k, arr in enumerate(base):
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            values = [b.copy() for b in base]
            values[k][i] = arr[i] + epsilon
            plus = evaluate(values)
            values[k][i] = arr[i] - epsilon
            minus = evaluate(values)
            g[i] = (plus - minus) / (2.0 * epsilon)
        grads.append(g)
    return _rebuild(keys, grads, wrt)


def gradients_close(computed, reference, rtol: float = 1e-4, atol: float = 1e-6) -> tuple[bool, float]:
    """Elementwise ``|a - b| <= max(rtol * max(|a|, |b|), atol)``.

    Returns (all close, worst ratio of error to allowance).
    """
    keys, a_list = _as_list(computed)
    b_list = list(reference.values()) if isinstance(reference, Mapping) else (
        [reference] if not isinstance(reference, (list, tuple)) else list(reference)
    )
    worst = 0.0
    for a, b in zip(a_list, b_list):
        a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
        b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
        allowance = np.maximum(rtol * np.maximum(np.abs(a), np.abs(b)), atol)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - b) / allowance)))
    return worst <= 1.0, worst


def parameters(shapes: Mapping[str, Iterable[int]], rng: np.random.Generator, scale: float = 0.1):
    """Random leaf tensors, handy for tests and small experiments."""
    return {
        name: Tensor(rng.normal(0.0, scale, size=tuple(shape)), requires_grad=True)
        for name, shape in shapes.items()
    }
