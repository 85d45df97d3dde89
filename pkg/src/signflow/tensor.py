"""Dense N-dimensional tensors with recorded-operation reverse-mode autodiff.

Every primitive below computes its forward value eagerly with numpy and, when
any input participates in gradient tracking, records itself so that
``backward`` can replay the tape in exact reverse recording order.  The
primitive set is intentionally small: matrix multiply, volumetric convolution
and pooling, feature normalization, the usual elementwise/shape ops, and the
lookup/gather ops the sequence models need.

Gradients accumulate into ``Tensor.grad`` on leaf tensors (tensors created
directly rather than by an operation).  64-bit floats are the default so that
finite-difference checks have precision headroom; call ``set_default_dtype``
to trade precision for training throughput.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_finite_checks = True
_grad_enabled = True
_seq_counter = itertools.count()


def set_default_dtype(name):
    """Select the storage dtype for newly created tensors ("float64"/"float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


def set_finite_checks(enabled):
    """Toggle the non-finite input validation on every primitive."""
    global _finite_checks
    _finite_checks = bool(enabled)


class NumericError(ValueError):
    """A primitive saw non-finite values (or a log of a non-positive value)."""


class no_grad:
    """Context manager that suspends graph recording (inference / FD probes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense real array, optionally tracked by the autodiff tape.

    ``requires_grad`` marks leaves whose gradient should be accumulated;
    operation outputs inherit tracking from their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_grad_fn",
                 "_seq", "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._grad_fn = None
        self._seq = next(_seq_counter)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def is_leaf(self):
        return self._grad_fn is None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    # -- arithmetic sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op, *arrays):
    if not _finite_checks:
        return
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op}: input contains non-finite values")


def _record(data, parents, grad_fn, op):
    """Wrap an op result; records parents/grad_fn when tracking is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._seq = next(_seq_counter)
    out._backward_done = False
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def backward(output):
    """Accumulate d(output)/d(leaf) into every reachable requires_grad leaf.

    The tape is replayed in exact reverse recording order.  ``output`` must be
    scalar-valued, and a given output may only be differentiated once (rebuild
    the forward pass to differentiate again).
    """
    if not isinstance(output, Tensor):
        raise TypeError("backward expects a Tensor output")
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if output._backward_done:
        raise RuntimeError("backward was already run for this output; "
                           "re-run the forward pass before differentiating again")
    output._backward_done = True

    seed = np.ones_like(output.data)
    if output._grad_fn is None:
        if output.requires_grad:
            output.grad = seed if output.grad is None else output.grad + seed
        return

    # Gather the recorded subgraph feeding this output.
    nodes = []
    seen = set()
    stack = [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._grad_fn is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    pending = {id(output): seed}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._grad_fn is None:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise add.  The only broadcast allowed is a trailing-axis bias."""
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = float(b)
        _check_finite("add", a.data, np.asarray(c))
        return _record(a.data + c, (a,), lambda g: (g,), "add")
    _check_finite("add", a.data, b.data)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        def grad_fn(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return _record(a.data + b.data, (a, b), grad_fn, "add_bias")
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1:] == a.shape:
        return add(b, a)
    raise ValueError(f"add: shapes {a.shape} and {b.shape} do not match "
                     "(only trailing-axis bias broadcast is supported)")


def mul(a, b):
    """Elementwise multiply between same-shape tensors, or by a python scalar."""
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = float(b)
        _check_finite("mul", a.data, np.asarray(c))
        return _record(a.data * c, (a,), lambda g: (g * c,), "scale")
    _check_finite("mul", a.data, b.data)
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not match")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(x):
    x = _wrap(x)
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def power(x, exponent):
    x = _wrap(x)
    k = float(exponent)
    _check_finite("power", x.data)
    out = x.data ** k
    xd = x.data

    def grad_fn(g):
        return (g * k * xd ** (k - 1.0),)

    return _record(out, (x,), grad_fn, "power")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_finite("matmul", a.data, b.data)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), grad_fn, "matmul")


def relu(x):
    x = _wrap(x)
    _check_finite("relu", x.data)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def exp(x):
    x = _wrap(x)
    _check_finite("exp", x.data)
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _record(out, (x,), grad_fn, "exp")


def log(x):
    x = _wrap(x)
    _check_finite("log", x.data)
    if np.any(x.data <= 0):
        raise NumericError("log: input must be strictly positive")
    xd = x.data

    def grad_fn(g):
        return (g / xd,)

    return _record(np.log(xd), (x,), grad_fn, "log")


def softmax(x):
    """Softmax over the last axis.  -inf entries act as masked-out scores."""
    x = _wrap(x)
    if _finite_checks and (np.any(np.isnan(x.data)) or np.any(x.data == np.inf)):
        raise NumericError("softmax: input contains NaN or +inf")
    m = np.max(x.data, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("softmax: a row is entirely masked (-inf)")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), grad_fn, "softmax")


def causal_mask(scores):
    """Set score entries above the main diagonal (column > row) to -inf."""
    scores = _wrap(scores)
    if scores.ndim != 2:
        raise ValueError(f"causal_mask: expected a 2-D score matrix, got {scores.shape}")
    n, m = scores.shape
    keep = np.tril(np.ones((n, m), dtype=bool))
    out = np.where(keep, scores.data, -np.inf)

    def grad_fn(g):
        return (np.where(keep, g, 0.0),)

    return _record(out, (scores,), grad_fn, "causal_mask")


def tensor_sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    _check_finite("sum", x.data)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape).copy(),)

    return _record(np.asarray(out), (x,), grad_fn, "sum")


def tensor_mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(out, (x,), grad_fn, "reshape")


def transpose(x, axes=None):
    x = _wrap(x)
    out = x.data.transpose(axes)
    inverse = None if axes is None else np.argsort(axes)

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _record(out, (x,), grad_fn, "transpose")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    for t in tensors:
        _check_finite("concat", t.data)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), grad_fn, "concat")


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradient to the table."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range for table of {table.shape[0]} rows")
    _check_finite("embedding", table.data)
    shape = table.shape

    def grad_fn(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(table.data[ids], (table,), grad_fn, "embedding")


def take_per_row(x, idx):
    """Pick one column per row: out[i] = x[i, idx[i]]."""
    x = _wrap(x)
    idx = np.asarray(idx)
    if x.ndim != 2:
        raise ValueError(f"take_per_row: expected a 2-D tensor, got {x.shape}")
    if idx.shape != (x.shape[0],):
        raise ValueError(f"take_per_row: expected {x.shape[0]} indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ValueError(f"take_per_row: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, idx] = g
        return (gx,)

    return _record(x.data[rows, idx], (x,), grad_fn, "take_per_row")


def dropout(x, rate, rng, training):
    """Inverted dropout: scaled by 1/(1-rate) at train time, identity at eval."""
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def grad_fn(g):
        return (g * mask,)

    return _record(x.data * mask, (x,), grad_fn, "dropout")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply a per-feature affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    _check_finite("layer_norm", x.data, gain.data, bias.data)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} "
                         f"do not match feature width {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def grad_fn(g):
        gxhat = g * gd
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gain, bias), grad_fn, "layer_norm")


def batch_norm(x, gain, bias, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalization for channels-last volumes.

    Statistics are taken over every non-channel axis of the single sample
    (batch size is 1 throughout this project, so cross-batch statistics are
    undefined).  At train time the sample's own statistics normalize it and
    the running buffers are updated in place; at eval time the running
    buffers are used.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    _check_finite("batch_norm", x.data, gain.data, bias.data)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"batch_norm: gain/bias must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def grad_fn(g):
        gxhat = g * gd
        if training:
            m1 = gxhat.mean(axis=axes)
            m2 = (gxhat * xhat).mean(axis=axes)
            gx = inv * (gxhat - m1 - xhat * m2)
        else:
            gx = gxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gain, bias), grad_fn, "batch_norm")


# ---------------------------------------------------------------------------
# volumetric convolution and pooling (channels-last: T, H, W, C)
# ---------------------------------------------------------------------------

def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or a 3-tuple, got {v!r}")
    return t


def _conv_out_extent(size, kernel, stride, pad):
    ext = (size + 2 * pad - kernel) // stride + 1
    return ext


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Volumetric convolution on a (T, H, W, Cin) sample.

    weight: (kt, kh, kw, Cin, Cout); zero padding; output (T', H', W', Cout).
    """
    x, weight = _wrap(x), _wrap(weight)
    _check_finite("conv3d", x.data, weight.data)
    if x.ndim != 4:
        raise ValueError(f"conv3d: expected input (T, H, W, C), got {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d: expected weight (kt, kh, kw, Cin, Cout), got {weight.shape}")
    kt, kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv3d: input channels {x.shape[-1]} != weight channels {cin}")
    stride = _triple(stride)
    padding = _triple(padding)
    outdims = tuple(_conv_out_extent(x.shape[i], weight.shape[i], stride[i], padding[i])
                    for i in range(3))
    if min(outdims) < 1:
        raise ValueError(f"conv3d: kernel {weight.shape[:3]} with stride {stride} and "
                         f"padding {padding} does not fit input {x.shape}")
    if bias is not None:
        bias = _wrap(bias)
        _check_finite("conv3d", bias.data)
        if bias.shape != (cout,):
            raise ValueError(f"conv3d: bias must have shape ({cout},), got {bias.shape}")

    pt, ph, pw = padding
    xp = np.pad(x.data, ((pt, pt), (ph, ph), (pw, pw), (0, 0))) if any(padding) else x.data
    ot, oh, ow = outdims
    st, sh, sw = stride
    wd = weight.data
    out = np.zeros((ot, oh, ow, cout), dtype=x.data.dtype)
    out_flat = out.reshape(-1, cout)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                xs = xp[dt:dt + (ot - 1) * st + 1:st,
                        dh:dh + (oh - 1) * sh + 1:sh,
                        dw:dw + (ow - 1) * sw + 1:sw, :]
                out_flat += xs.reshape(-1, cin) @ wd[dt, dh, dw]
    if bias is not None:
        out += bias.data

    xshape = x.shape
    has_bias = bias is not None

    def grad_fn(g):
        gflat = g.reshape(-1, cout)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    sl = (slice(dt, dt + (ot - 1) * st + 1, st),
                          slice(dh, dh + (oh - 1) * sh + 1, sh),
                          slice(dw, dw + (ow - 1) * sw + 1, sw))
                    xs = xp[sl]
                    gw[dt, dh, dw] = xs.reshape(-1, cin).T @ gflat
                    gxp[sl] += (gflat @ wd[dt, dh, dw].T).reshape(ot, oh, ow, cin)
        gx = gxp[pt:pt + xshape[0], ph:ph + xshape[1], pw:pw + xshape[2], :] \
            if any(padding) else gxp
        if has_bias:
            return gx, gw, g.sum(axis=(0, 1, 2))
        return gx, gw

    parents = (x, weight, bias) if has_bias else (x, weight)
    return _record(out, parents, grad_fn, "conv3d")


def max_pool3d(x, kernel, stride=None, padding=(0, 0, 0)):
    """Volumetric max pooling on a (T, H, W, C) sample; padding is -inf."""
    x = _wrap(x)
    _check_finite("max_pool3d", x.data)
    if x.ndim != 4:
        raise ValueError(f"max_pool3d: expected input (T, H, W, C), got {x.shape}")
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    padding = _triple(padding)
    for i in range(3):
        if padding[i] >= kernel[i]:
            raise ValueError("max_pool3d: padding must be smaller than the kernel")
    outdims = tuple(_conv_out_extent(x.shape[i], kernel[i], stride[i], padding[i])
                    for i in range(3))
    if min(outdims) < 1:
        raise ValueError(f"max_pool3d: kernel {kernel} with stride {stride} and "
                         f"padding {padding} does not fit input {x.shape}")

    pt, ph, pw = padding
    if any(padding):
        xp = np.pad(x.data, ((pt, pt), (ph, ph), (pw, pw), (0, 0)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    ot, oh, ow = outdims
    st, sh, sw = stride
    c = x.shape[-1]
    out = np.full((ot, oh, ow, c), -np.inf, dtype=x.data.dtype)
    best = np.zeros((ot, oh, ow, c), dtype=np.int16)
    offsets = [(dt, dh, dw)
               for dt in range(kernel[0])
               for dh in range(kernel[1])
               for dw in range(kernel[2])]
    for k, (dt, dh, dw) in enumerate(offsets):
        xs = xp[dt:dt + (ot - 1) * st + 1:st,
                dh:dh + (oh - 1) * sh + 1:sh,
                dw:dw + (ow - 1) * sw + 1:sw, :]
        better = xs > out
        out = np.where(better, xs, out)
        best = np.where(better, k, best)

    xshape = x.shape

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        for k, (dt, dh, dw) in enumerate(offsets):
            sl = (slice(dt, dt + (ot - 1) * st + 1, st),
                  slice(dh, dh + (oh - 1) * sh + 1, sh),
                  slice(dw, dw + (ow - 1) * sw + 1, sw))
            gxp[sl] += g * (best == k)
        if any(padding):
            return (gxp[pt:pt + xshape[0], ph:ph + xshape[1], pw:pw + xshape[2], :],)
        return (gxp,)

    return _record(out, (x,), grad_fn, "max_pool3d")
