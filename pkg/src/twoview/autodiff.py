"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly: every op computes its value immediately and
records a backward closure. Ops that only see constant inputs skip graph
construction entirely, so evaluation without gradients carries no
bookkeeping cost. The module also provides the central finite-difference
checker, the Adam optimizer, and the binary parameter checkpoint format.
"""

import struct

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes violate an op contract."""


class NonScalarLoss(ValueError):
    """backward() started from a tensor that is not a scalar."""


class NotFinite(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(data, op):
    if data.size == 0:
        raise ShapeMismatch(f"{op}: empty tensor")
    # a single reduction: the sum is non-finite iff any entry is NaN/Inf
    if not np.isfinite(np.sum(data)):
        bad = int(np.count_nonzero(~np.isfinite(data)))
        if bad == 0:
            return  # sum overflowed but every entry is finite
        raise NotFinite(f"{op}: {bad} non-finite entries in output of shape {data.shape}")


class Tensor:
    """A dense float64 array plus its place in the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, op)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g, owned=False):
        if self.grad is None:
            # adopt freshly allocated gradients; copy views/shared buffers
            self.grad = g if owned else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(data, parents, op, backward_fn):
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward_fn)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a_shape, b_shape, op):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a_shape} with {b_shape}") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a.shape, b.shape, "add")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accum(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._accum(gb, owned=gb is not g)

    return _make(out, (a, b), "add", bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a.shape, b.shape, "sub")
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accum(ga, owned=ga is not g)
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape), owned=True)

    return _make(out, (a, b), "sub", bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a.shape, b.shape, "mul")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out, (a, b), "mul", bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):  # NotFinite handles it
        out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), owned=True)

    return _make(out, (a, b), "div", bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        a._accum(-g, owned=True)

    return _make(-a.data, (a,), "neg", bwd)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        # subgradient at exactly 0 is defined as 0
        a._accum(np.where(a.data > 0.0, g, 0.0), owned=True)

    return _make(out, (a,), "relu", bwd)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out * out), owned=True)

    return _make(out, (a,), "tanh", bwd)


def softplus(a):
    """log(1 + exp(x)), evaluated stably; backward is the logistic sigmoid."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        a._accum(g * np.exp(a.data - out), owned=True)

    return _make(out, (a,), "softplus", bwd)


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):  # NotFinite handles negatives
        out = np.sqrt(a.data)

    def bwd(g):
        a._accum(g / (2.0 * out), owned=True)

    return _make(out, (a,), "sqrt", bwd)


def minimum_const(a, cap):
    """Elementwise min(x, cap); gradient is 0 on the clamped side (ties clamp)."""
    a = as_tensor(a)
    cap = float(cap)
    out = np.minimum(a.data, cap)

    def bwd(g):
        a._accum(np.where(a.data < cap, g, 0.0), owned=True)

    return _make(out, (a,), "minimum_const", bwd)


# ---------------------------------------------------------------------------
# structural ops


def _matmul_data(x, y):
    """Dense product avoiding numpy's slow batched-GEMM paths."""
    if x.ndim == 3 and y.ndim == 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[0], x.shape[1], y.shape[1])
    if x.ndim == 2 and y.ndim == 3:
        out = np.empty((y.shape[0], x.shape[0], y.shape[2]))
        for i in range(y.shape[0]):
            np.matmul(x, y[i], out=out[i])
        return out
    if x.ndim == 3 and y.ndim == 3:
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"matmul: batch dims differ, {x.shape} @ {y.shape}")
        out = np.empty((x.shape[0], x.shape[1], y.shape[2]))
        for i in range(x.shape[0]):
            np.matmul(x[i], y[i], out=out[i])
        return out
    return x @ y


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = _matmul_data(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = _matmul_data(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            if b.data.ndim == 2 and g.ndim == 3:
                # weight shared across the batch: single fused GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                b._accum(gb, owned=True)
            else:
                gb = _matmul_data(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.shape), owned=True)

    return _make(out, (a, b), "matmul", bwd)


def transpose_last2(a):
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeMismatch(f"transpose_last2: need rank >= 2, got {a.shape}")

    def bwd(g):
        a._accum(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), "transpose_last2", bwd)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return _make(out, (a,), "reshape", bwd)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd:
            raise ShapeMismatch("concat: rank mismatch")
        for i in range(nd):
            if i != ax and t.shape[i] != ts[0].shape[i]:
                raise ShapeMismatch(f"concat: shapes {ts[0].shape} and {t.shape} differ off-axis")
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(out, ts, "concat", bwd)


def slice_last(a, start, stop):
    """Narrow the last axis to [start, stop)."""
    a = as_tensor(a)
    out = a.data[..., start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a._accum(full, owned=True)

    return _make(out, (a,), "slice_last", bwd)


def take_batch(a, index):
    """Select one slice along the leading axis."""
    a = as_tensor(a)
    if not 0 <= index < a.shape[0]:
        raise ShapeMismatch(f"take_batch: index {index} out of range for {a.shape}")
    out = a.data[index].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accum(full, owned=True)

    return _make(out, (a,), "take_batch", bwd)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))  # _accum copies the view

    return _make(out, (a,), "reduce_sum", bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def softmax(a, axis):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        a._accum(out * (g - dot), owned=True)

    return _make(out, (a,), "softmax", bwd)


def _sum_axes(x, axes):
    """Reduce-sum without keepdims; einsum for the hot 3-D layouts."""
    if x.ndim == 3:
        if axes == (1,):
            return np.einsum("bnd->bd", x)
        if axes == (0, 1):
            return np.einsum("bnd->d", x)
    return x.sum(axis=axes)


def _dot_axes(x, y, axes):
    """Reduce-sum of x*y without materializing the product, where possible."""
    if x.ndim == 3 and y.shape == x.shape:
        if axes == (1,):
            return np.einsum("bnd,bnd->bd", x, y)
        if axes == (0, 1):
            return np.einsum("bnd,bnd->d", x, y)
    return (x * y).sum(axis=axes)


def normalize(a, axes, eps=1e-5):
    """Subtract the mean and divide by sqrt(variance + eps) along the given axes."""
    a = as_tensor(a)
    axes = axes if isinstance(axes, tuple) else (axes,)
    inv_n = 1.0 / np.prod([a.shape[i] for i in axes])
    mu = np.expand_dims(_sum_axes(a.data, axes) * inv_n, axes)
    centered = a.data - mu
    var = np.expand_dims(_dot_axes(centered, centered, axes) * inv_n, axes)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def bwd(g):
        gm = np.expand_dims(_sum_axes(g, axes) * inv_n, axes)
        gy = np.expand_dims(_dot_axes(g, out, axes) * inv_n, axes)
        a._accum(inv * (g - gm - out * gy), owned=True)

    return _make(out, (a,), "normalize", bwd)


def detach(a):
    """Gradient barrier: same values, no graph history."""
    a = as_tensor(a)
    return Tensor(a.data, op="detach")


def custom(inputs, out_data, backward_fn, op="custom"):
    """Custom-gradient hook: backward_fn(g) returns one gradient per input (or None)."""
    ts = tuple(as_tensor(t) for t in inputs)

    def bwd(g):
        grads = backward_fn(g)
        for t, gt in zip(ts, grads):
            if t.requires_grad and gt is not None:
                if gt.shape != t.shape:
                    raise ShapeMismatch(f"{op}: backward produced {gt.shape} for input {t.shape}")
                t._accum(gt)

    return _make(np.asarray(out_data, dtype=np.float64), ts, op, bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Reverse accumulation from a scalar loss to all requires_grad tensors."""
    if loss.data.shape != ():
        raise NonScalarLoss(f"loss has shape {loss.data.shape}, expected a scalar")
    topo = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accum(np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def backward_grad(loss):
    """Alias stating the contract: gradients land on every marked tensor's .grad."""
    backward(loss)


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between f's analytic gradient at x and central differences.

    f takes one Tensor and returns a scalar Tensor; x is the flattening
    reference point. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) per component.
    """
    x = np.asarray(x, dtype=np.float64)
    probe = Tensor(x.copy(), requires_grad=True)
    loss = f(probe)
    if loss.data.shape != ():
        raise NonScalarLoss("finite_difference_check needs a scalar-valued function")
    backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x)
    analytic = analytic.reshape(-1)
    flat = x.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        hi = float(f(Tensor(bumped.reshape(x.shape))).data)
        bumped[i] -= 2.0 * h
        lo = float(f(Tensor(bumped.reshape(x.shape))).data)
        numeric[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# parameters, Adam, checkpoints

_ADAM_M = "__adam_m__/"
_ADAM_V = "__adam_v__/"
_STEP_KEY = "__step__"


class ParameterStore:
    """Named parameters and buffers plus Adam state and the step counter."""

    def __init__(self):
        self._tensors = {}
        self._trainable = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def _register(self, name, value, trainable):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if name.startswith("__"):
            raise ValueError(f"parameter name {name!r} uses a reserved prefix")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, op="param")
        self._tensors[name] = t
        self._trainable[name] = trainable
        if trainable:
            self._m[name] = np.zeros_like(t.data)
            self._v[name] = np.zeros_like(t.data)
        return t

    def parameter(self, name, value):
        return self._register(name, value, True)

    def buffer(self, name, value):
        return self._register(name, value, False)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def trainable_names(self):
        return [n for n, t in self._trainable.items() if t]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def parameter_count(self):
        return sum(self._tensors[n].data.size for n in self.trainable_names())


def adam_step(store: ParameterStore, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, grads=None):
    """One bias-corrected Adam update over every trainable entry of the store.

    Gradients come from each tensor's .grad unless an explicit name->array
    dict is given. Missing gradients count as zero.
    """
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in store.trainable_names():
        p = store[name]
        if grads is not None:
            g = grads.get(name)
        else:
            g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


_MAGIC = b"TWVC"
_VERSION = 1


def _write_record(fh, name, array):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", array.ndim))
    for d in array.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def save_checkpoint(store: ParameterStore, path):
    """Binary checkpoint: parameters, buffers, Adam moments, and the step counter."""
    names = store.names()
    records = [(n, store[n].data) for n in names]
    for n in store.trainable_names():
        records.append((_ADAM_M + n, store._m[n]))
        records.append((_ADAM_V + n, store._v[n]))
    records.append((_STEP_KEY, np.array(float(store.step))))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


def read_checkpoint_arrays(path):
    """Raw name -> array contents of a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def load_checkpoint(store: ParameterStore, path):
    """Restore a checkpoint into a store with matching structure."""
    arrays = read_checkpoint_arrays(path)
    for name in store.names():
        if name not in arrays:
            raise ValueError(f"{path}: missing entry {name!r}")
        arr = arrays[name]
        if arr.shape != store[name].data.shape:
            raise ValueError(f"{path}: shape {arr.shape} != expected {store[name].data.shape} for {name!r}")
        store[name].data[...] = arr
    for name in store.trainable_names():
        if _ADAM_M + name in arrays:
            store._m[name][...] = arrays[_ADAM_M + name]
        if _ADAM_V + name in arrays:
            store._v[name][...] = arrays[_ADAM_V + name]
    if _STEP_KEY in arrays:
        store.step = int(arrays[_STEP_KEY])
