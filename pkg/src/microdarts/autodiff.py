"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation creates a new :class:`Tensor` holding its value, its parents
and a closure that maps the output gradient to parent gradients.  Tensors get a
monotonically increasing id at creation, so creation order is a topological
order of the recorded graph and the backward sweep simply visits the reachable
nodes in decreasing id.  That makes the traversal deterministic without any
explicit sort by hand.

Convolutions and pools use an explicit patch gather (im2col) and its scatter
adjoint; nothing is fused.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StateError, StructuralError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"precision": "f32", "grad": True}
_ids = itertools.count()
_graphs: list["Graph"] = []
_scope: list[str] = []


def set_precision(tag: str) -> None:
    if tag not in _DTYPES:
        raise StructuralError(f"unknown precision {tag!r}; expected one of {sorted(_DTYPES)}")
    _state["precision"] = tag


def get_precision() -> str:
    return _state["precision"]


def get_dtype():
    return _DTYPES[_state["precision"]]


@contextlib.contextmanager
def precision(tag: str):
    old = get_precision()
    set_precision(tag)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def scope(label: str):
    """Name the region of the computation; used in numeric error messages."""
    _scope.append(label)
    try:
        yield
    finally:
        _scope.pop()


def current_scope() -> str:
    return "/".join(_scope)


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        where = current_scope() or op
        raise NumericError(f"non-finite output of {op}", where=where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._id = next(_ids)
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _graphs:
        _graphs[-1].nodes.append(out)
    return out


def _record_kink(pattern: np.ndarray) -> None:
    if _graphs:
        _graphs[-1].kinks.append(pattern)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise StructuralError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise StructuralError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "mul")


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _make(np.asarray(x.data.mean()), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (int, slice)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), backward, "getitem")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_kink(mask)

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, "relu")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise StructuralError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(data, tuple(tensors), backward, "concat")


def softmax(x: Tensor) -> Tensor:
    """Softmax of a 1-D tensor, computed with max subtraction."""
    z = x.data - x.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def backward(g):
        return (s * (g - np.dot(g, s)),)

    return _make(s, (x,), backward, "softmax")


def weighted_sum(weights: Tensor, tensors) -> Tensor:
    """sum_i weights[i] * tensors[i]; ``None`` entries stand for all-zero tensors."""
    tensors = list(tensors)
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise StructuralError(
            f"weighted_sum: {weights.shape} weights for {len(tensors)} tensors"
        )
    present = [t for t in tensors if t is not None]
    if not present:
        raise StructuralError("weighted_sum needs at least one non-zero operand")
    shape = present[0].shape
    for t in present:
        if t.shape != shape:
            raise StructuralError(f"weighted_sum: operand shapes differ ({t.shape} vs {shape})")
    w = weights.data
    data = np.zeros(shape, dtype=present[0].data.dtype)
    for wi, t in zip(w, tensors):
        if t is not None:
            data += wi * t.data
    parents = (weights,) + tuple(present)

    def backward(g):
        gw = None
        if weights.requires_grad:
            gw = np.array(
                [0.0 if t is None else float(np.vdot(g, t.data)) for t in tensors], dtype=w.dtype
            )
        gt = [w[i] * g if t.requires_grad else None for i, t in enumerate(tensors) if t is not None]
        return (gw, *gt)

    return _make(data, parents, backward, "weighted_sum")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise StructuralError(f"linear: input {x.shape} vs weight {w.shape}")
    data = x.data @ w.data.T
    if b is not None:
        data = data + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise StructuralError(f"global_avg_pool expects 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise StructuralError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / labels.size),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


# ----------------------------------------------------------------------------
# normalization


def static_bn(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch normalization without affine parameters.

    Statistics are taken per channel (axis 1) over every other axis with the
    biased variance.
    """
    if x.ndim < 2:
        raise StructuralError(f"static_bn expects at least 2-D input, got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), backward, "static_bn")


# ----------------------------------------------------------------------------
# convolution and pooling


def _out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, k, stride, dilation, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            r, s = i * dilation, j * dilation
            cols[:, :, i * k + j] = xp[:, :, r : r + stride * (ho - 1) + 1 : stride,
                                       s : s + stride * (wo - 1) + 1 : stride]
    return cols


def _col2im(dcols, padded_shape, k, stride, dilation, ho, wo):
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            r, s = i * dilation, j * dilation
            dxp[:, :, r : r + stride * (ho - 1) + 1 : stride,
                s : s + stride * (wo - 1) + 1 : stride] += dcols[:, :, i * k + j]
    return dxp


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _unpad(xp, p):
    if p == 0:
        return xp
    return xp[:, :, p:-p, p:-p]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-D convolution without bias; ``groups`` is 1 (dense) or the channel count (depthwise)."""
    if x.ndim != 4 or w.ndim != 4:
        raise StructuralError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    b, cin, h, wd = x.shape
    cout, cpg, k, k2 = w.shape
    if k != k2:
        raise StructuralError("conv2d: only square kernels are supported")
    depthwise = groups != 1
    if depthwise and not (groups == cin == cout and cpg == 1):
        raise StructuralError(f"conv2d: groups={groups} supports only depthwise, weight {w.shape}")
    if not depthwise and cpg != cin:
        raise StructuralError(f"conv2d: input has {cin} channels, weight expects {cpg}")
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(wd, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise StructuralError(f"conv2d: input {x.shape} too small for kernel {k}")
    xp = _pad(x.data, padding)
    if depthwise:
        return _depthwise(x, w, xp, k, stride, padding, dilation, ho, wo)
    if k == 1:
        cols = xp[:, :, None, ::stride, ::stride]
    else:
        cols = _im2col(xp, k, stride, dilation, ho, wo)
    wk = w.data.reshape(cout, cin, k * k)
    data = np.ascontiguousarray(np.tensordot(cols, wk, axes=([1, 2], [1, 2])).transpose(0, 3, 1, 2))

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 3, 4])).reshape(w.shape)
        if x.requires_grad:
            dcols = np.tensordot(g, wk, axes=([1], [0])).transpose(0, 3, 4, 1, 2)
            gx = _unpad(_col2im(dcols, xp.shape, k, stride, dilation, ho, wo), padding)
        return gx, gw

    return _make(data, (x, w), backward, "conv2d")


def _window(xp, i, j, k, stride, dilation, ho, wo):
    r, s = i * dilation, j * dilation
    return (slice(None), slice(None), slice(r, r + stride * (ho - 1) + 1, stride),
            slice(s, s + stride * (wo - 1) + 1, stride))


def _depthwise(x, w, xp, k, stride, padding, dilation, ho, wo):
    # per-channel kernels: gather one kernel offset at a time instead of
    # materializing the full column tensor
    wk = w.data.reshape(w.shape[0], k * k)
    windows = [_window(xp, i, j, k, stride, dilation, ho, wo) for i in range(k) for j in range(k)]
    data = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.data.dtype)
    for t, win in enumerate(windows):
        data += xp[win] * wk[None, :, t, None, None]

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.stack([np.einsum("bchw,bchw->c", g, xp[win]) for win in windows], axis=1)
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for t, win in enumerate(windows):
                dxp[win] += g * wk[None, :, t, None, None]
            gx = _unpad(dxp, padding)
        return gx, gw

    return _make(data, (x, w), backward, "conv2d")


def max_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    if x.ndim != 4:
        raise StructuralError(f"max_pool2d expects 4-D input, got {x.shape}")
    ho = _out_size(x.shape[2], k, stride, padding, 1)
    wo = _out_size(x.shape[3], k, stride, padding, 1)
    xp = _pad(x.data, padding, value=-np.inf)
    cols = _im2col(xp, k, stride, 1, ho, wo)
    idx = cols.argmax(axis=2)
    _record_kink(idx)
    data = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        dcols = np.zeros(cols.shape, dtype=g.dtype)
        np.put_along_axis(dcols, idx[:, :, None], g[:, :, None], axis=2)
        return (_unpad(_col2im(dcols, xp.shape, k, stride, 1, ho, wo), padding),)

    return _make(data, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pool; padded cells are excluded from each window's count."""
    if x.ndim != 4:
        raise StructuralError(f"avg_pool2d expects 4-D input, got {x.shape}")
    ho = _out_size(x.shape[2], k, stride, padding, 1)
    wo = _out_size(x.shape[3], k, stride, padding, 1)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1) + x.shape[2:], dtype=x.data.dtype), padding)
    count = _im2col(ones, k, stride, 1, ho, wo).sum(axis=2)
    data = _im2col(xp, k, stride, 1, ho, wo).sum(axis=2) / count

    def backward(g):
        dcols = np.broadcast_to((g / count)[:, :, None], (g.shape[0], g.shape[1], k * k, ho, wo))
        return (_unpad(_col2im(dcols, xp.shape, k, stride, 1, ho, wo), padding),)

    return _make(data, (x,), backward, "avg_pool2d")


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data), dtype=x.data.dtype)


# ----------------------------------------------------------------------------
# graph, backward, gradient check, optimizer


class Graph:
    """A recorded computation.

    ``fn`` receives the named input tensors as keyword arguments and returns
    the output tensor.  Running :meth:`forward` records every produced node in
    execution (= topological) order.
    """

    def __init__(self, fn):
        self.fn = fn
        self.nodes: list[Tensor] | None = None
        self.kinks: list[np.ndarray] = []
        self.output: Tensor | None = None

    def forward(self, inputs: dict) -> Tensor:
        self.nodes = []
        self.kinks = []
        _graphs.append(self)
        try:
            self.output = self.fn(**inputs)
        finally:
            _graphs.pop()
        return self.output

    def backward(self, loss: Tensor | None = None, params=None) -> dict:
        if self.nodes is None:
            raise StateError("backward called before forward")
        return backward(self.output if loss is None else loss, params)


def forward(graph: Graph, inputs: dict) -> Tensor:
    return graph.forward(inputs)


def backward(loss: Tensor, params=None) -> dict:
    """Populate ``.grad`` of every trainable leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated across calls.  Leaves in
    ``params`` that the loss does not touch get an all-zero gradient.  Returns a
    map from leaf name (or id when unnamed) to gradient.
    """
    if loss.size != 1:
        raise StructuralError(f"backward needs a scalar loss, got shape {loss.shape}")
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    pending = {loss._id: np.ones_like(loss.data)}
    leaves = []
    for t in sorted(seen.values(), key=lambda n: n._id, reverse=True):
        g = pending.pop(t._id, None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g
                leaves.append(t)
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._id in pending:
                pending[p._id] = pending[p._id] + gp
            else:
                pending[p._id] = gp
    for p in params or ():
        if p.requires_grad and p not in leaves and all(p is not q for q in leaves):
            p.grad = np.zeros_like(p.data)
    out = {}
    for t in leaves + [p for p in (params or ()) if p.grad is not None]:
        if not np.all(np.isfinite(t.grad)):
            raise NumericError("non-finite gradient", where=t.name or f"leaf {t._id}")
        out[t.name if t.name is not None else t._id] = t.grad
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    compared: int
    excluded: int
    sampled: bool = False


def grad_check(graph: Graph, inputs: dict, tol: float = 1e-5, cap: int = 2000,
               step: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients against central differences.

    Autodiff runs at the inputs' own precision.  The finite-difference
    reference is always evaluated in f64 (tensor inputs are upcast for the
    duration), and central differences at ``step`` and ``step / 2`` are
    combined by Richardson extrapolation, which cancels the O(step^2)
    truncation term.  Entries whose stencil crosses a kink (a relu sign change
    or a max-pool winner change between any two stencil points) are excluded.
    When the trainable inputs hold more than ``cap`` entries an evenly strided
    subset of ``cap`` entries is checked.
    """
    trainable = [t for t in inputs.values() if isinstance(t, Tensor) and t.requires_grad]
    loss = graph.forward(inputs)
    graph.backward(loss, trainable)
    analytic = [t.grad.copy() for t in trainable]
    total = sum(t.size for t in trainable)
    positions = [(ti, j) for ti, t in enumerate(trainable) for j in range(t.size)]
    sampled = total > cap
    if sampled:
        positions = [positions[i] for i in np.linspace(0, total - 1, cap).astype(int)]

    def evaluate():
        with no_grad():
            value = float(graph.forward(inputs).data.sum())
        return value, [k.copy() for k in graph.kinks]

    tensors = [t for t in inputs.values() if isinstance(t, Tensor)]
    saved = [t.data for t in tensors]
    worst, compared, excluded = 0.0, 0, 0
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
        with precision("f64"):
            for ti, j in positions:
                flat = trainable[ti].data.reshape(-1)
                orig = flat[j]
                diffs, kinks = [], []
                for h in (step, step / 2):
                    flat[j] = orig + h
                    fp, kp = evaluate()
                    flat[j] = orig - h
                    fm, km = evaluate()
                    flat[j] = orig
                    diffs.append((fp - fm) / (2 * h))
                    kinks.extend([kp, km])
                if any(not np.array_equal(a, b) for k in kinks[1:] for a, b in zip(kinks[0], k)):
                    excluded += 1
                    continue
                num = (4 * diffs[1] - diffs[0]) / 3
                ana = float(analytic[ti].reshape(-1)[j])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, rel)
                compared += 1
    finally:
        for t, d in zip(tensors, saved):
            t.data = d
    graph.forward(inputs)
    return GradCheckReport(worst, worst < tol, compared, excluded, sampled)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


class SGD:
    """SGD with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``.  Velocity buffers are allocated on first use.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise StructuralError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise StructuralError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: list | None = None):
    """One in-place SGD update; returns the velocity buffers."""
    if lr <= 0:
        raise StructuralError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise StructuralError(f"momentum must lie in [0, 1), got {momentum}")
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise StructuralError(f"{len(params)} params but {len(grads)} gradients")
    if velocity is None:
        velocity = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise StructuralError(f"gradient shape {g.shape} does not match param {p.data.shape}")
        d = g + weight_decay * p.data if weight_decay else g
        if momentum:
            v = d.copy() if velocity[i] is None else momentum * velocity[i] + d
        else:
            v = d
        velocity[i] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)
    return velocity
