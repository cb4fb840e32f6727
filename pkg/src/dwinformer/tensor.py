"""Dense tensors with tape-based reverse-mode differentiation.

Feature maps are channels-last ``(..., H, W, C)``. Only float32 and float64
are supported and a single graph never mixes them. Every differentiable op
returns a new :class:`Tensor`; when any input tracks gradients the result
carries a closure mapping the output gradient to input gradients.
"""

import contextlib
import math

import numpy as np

from dwinformer import kernels
from dwinformer.errors import (
    ConfigError,
    DimensionError,
    DTypeMismatchError,
    NumericError,
    UsageError,
)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            raise DTypeMismatchError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tracks(self):
        return self.requires_grad or self._backward is not None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _check_dtypes(*ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeMismatchError(f"mixed dtypes in one graph: {dt} vs {t.dtype}")


def _result(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.tracks for p in parents):
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw, "div")


def scale(x, s):
    s = float(s)

    def bw(g):
        return (g * x.dtype.type(s),)

    return _result(x.data * x.dtype.type(s), (x,), bw, "scale")


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x):
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def clamp_min(x, lo):
    """max(x, lo); the gradient flows only where x > lo."""
    keep = x.data > lo
    out = np.where(keep, x.data, x.dtype.type(lo))
    return _result(out, (x,), lambda g: (g * keep,), "clamp_min")


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    out = out.astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(x):
    """Derivative of the tanh-approximated GELU."""
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1 + 3 * 0.044715 * x * x)
    return 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    out = 0.5 * xd * (1 + np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3)))
    return _result(out, (x,), lambda g: (g * _gelu_grad(xd),), "gelu")


def softmax_lastdim(x):
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastdim received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def layernorm_lastdim(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply ``gamma``, ``beta``."""
    _check_dtypes(x, gamma, beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}, {beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layernorm")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def reduce_sum(x, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result(out, (x,), bw, "sum")


def reduce_mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axis, keepdims), 1.0 / n)


def take(table, index):
    """Gather rows of a 2-D ``table`` with an integer ``index`` array: out[...] = table[index[...]]."""
    index = np.asarray(index)
    out = table.data[index]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), bw, "take")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.tracks else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.tracks else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; ``weight`` is (c_in, c_out)."""
    _check_dtypes(x, weight)
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.tracks else None
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(lead + (cout,)), parents, bw, "linear")


# ---------------------------------------------------------------- spatial ops


def conv2d(x, kernel, stride=1, padding=0, groups=1, bias=None):
    """Zero-padded 2-D cross-correlation on ``(..., h, w, c_in)`` maps.

    ``kernel`` has shape ``(kh, kw, c_in // groups, c_out)``.
    """
    _check_dtypes(x, kernel)
    if x.ndim < 3:
        raise DimensionError(f"conv2d: input must be (..., h, w, c), got {x.shape}")
    kh, kw, cg, cout = kernel.shape
    *lead, h, w, cin = x.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: channels ({cin} -> {cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape} and groups={groups}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d: non-positive output size {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        out = linear(x, reshape(kernel, (cin, cout)), bias)
        out.op = "conv2d"
        return out

    n = int(np.prod(lead)) if lead else 1
    xd = np.ascontiguousarray(x.data.reshape(n, h, w, cin))
    p = padding
    xpad = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    hp, wp = xpad.shape[1], xpad.shape[2]
    out_shape = tuple(lead) + (oh, ow, cout)
    depthwise = groups == cin and cout == cin and cg == 1

    if depthwise:
        wk = np.ascontiguousarray(kernel.data[:, :, 0, :])
        out = kernels.dwconv_forward(xpad, wk, stride, oh, ow)
        if bias is not None:
            out += bias.data

        def bw(g):
            g4 = np.ascontiguousarray(g.reshape(n, oh, ow, cout))
            dxp, dwk = kernels.dwconv_backward(xpad, wk, g4, stride)
            dx = dxp[:, p:p + h, p:p + w, :].reshape(x.shape)
            grads = [dx, dwk[:, :, None, :]]
            if bias is not None:
                grads.append(g4.sum(axis=(0, 1, 2)))
            return tuple(grads)
    else:
        cols = kernels.im2col(xpad, kh, kw, stride, oh, ow)
        og = cout // groups
        if groups == 1:
            out = cols.reshape(-1, kh * kw * cin) @ kernel.data.reshape(kh * kw * cin, cout)
        else:
            out = np.empty((n * oh * ow, cout), dtype=x.dtype)
            for gi in range(groups):
                cg_cols = cols[..., gi * cg:(gi + 1) * cg].reshape(-1, kh * kw * cg)
                out[:, gi * og:(gi + 1) * og] = cg_cols @ kernel.data[..., gi * og:(gi + 1) * og].reshape(-1, og)
        if bias is not None:
            out += bias.data
        out = out.reshape(n, oh, ow, cout)

        def bw(g):
            g2 = g.reshape(-1, cout)
            if groups == 1:
                cols2 = cols.reshape(-1, kh * kw * cin)
                dk = (cols2.T @ g2).reshape(kernel.shape)
                dcols = (g2 @ kernel.data.reshape(kh * kw * cin, cout).T).reshape(cols.shape)
            else:
                dk = np.empty_like(kernel.data)
                dcols = np.empty_like(cols)
                for gi in range(groups):
                    cg_cols = cols[..., gi * cg:(gi + 1) * cg].reshape(-1, kh * kw * cg)
                    kg = kernel.data[..., gi * og:(gi + 1) * og].reshape(-1, og)
                    gg = g2[:, gi * og:(gi + 1) * og]
                    dk[..., gi * og:(gi + 1) * og] = (cg_cols.T @ gg).reshape(kh, kw, cg, og)
                    dcols[..., gi * cg:(gi + 1) * cg] = (gg @ kg.T).reshape(n, oh, ow, kh, kw, cg)
            dxp = kernels.col2im(np.ascontiguousarray(dcols), hp, wp, stride)
            dx = dxp[:, p:p + h, p:p + w, :].reshape(x.shape)
            grads = [dx, dk]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out.reshape(out_shape), parents, bw, "conv2d")


def maxpool2d(x):
    """2x2 max pooling with stride 2 on ``(..., h, w, c)``. Ties route the gradient to the first maximum."""
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} must be even")
    r = x.data.reshape(*lead, h // 2, 2, w // 2, 2, c)
    r = np.moveaxis(r, -4, -3).reshape(*lead, h // 2, w // 2, 4, c)
    idx = r.argmax(axis=-2)
    out = np.take_along_axis(r, idx[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        onehot = np.zeros(r.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None, :], g[..., None, :], axis=-2)
        gx = onehot.reshape(*lead, h // 2, w // 2, 2, 2, c)
        gx = np.moveaxis(gx, -3, -4).reshape(x.shape)
        return (gx,)

    return _result(out, (x,), bw, "maxpool2d")


def nearest_upsample(x, factor):
    """Repeat each pixel of ``(..., h, w, c)`` into a ``factor`` x ``factor`` block."""
    *lead, h, w, c = x.shape
    f = int(factor)
    if f < 1:
        raise ConfigError(f"nearest_upsample: factor must be >= 1, got {factor}")
    out = np.broadcast_to(x.data[..., :, None, :, None, :], (*lead, h, f, w, f, c)).reshape(*lead, h * f, w * f, c)

    def bw(g):
        return (g.reshape(*lead, h, f, w, f, c).sum(axis=(-4, -2)),)

    return _result(out, (x,), bw, "upsample")


# ---------------------------------------------------------------- autodiff driver


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.tracks and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, inputs=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The graph is freed afterwards; a second call on the same graph raises
    :class:`UsageError`. If ``inputs`` is given, their gradients are returned
    as a list, with zeros for inputs the loss does not depend on.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise UsageError(f"backward() needs a scalar loss, got shape {shape}")
    if loss._consumed:
        raise UsageError("backward() already ran on this graph; rebuild it with a fresh forward pass")
    order = _topological(loss) if loss.tracks else []
    for node in order:
        if node._consumed:
            raise UsageError("backward() reached a node freed by an earlier backward(); rebuild the graph")
    seen = {}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
                seen[id(node)] = node.grad
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.tracks:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True
    if inputs is None:
        return None
    return [seen.get(id(t), np.zeros_like(t.data)) if isinstance(t, Tensor) else None for t in inputs]


def finite_diff_check(f, leaves, h=1e-5, max_coords=None, seed=0, return_details=False):
    """Compare backward() against central differences.

    ``f`` is a zero-argument callable rebuilding the graph and returning a
    scalar :class:`Tensor`. For each checked coordinate the error is
    ``|a - n| / max(1e-8, |a| + |n|)``; the maximum is returned. With
    ``max_coords`` set, at most that many coordinates per leaf are sampled.
    With ``return_details`` the result is ``(error, info)`` where ``info``
    holds the per-leaf maxima and the worst ``(leaf, index, analytic, numeric)``.
    """
    for t in leaves:
        t.grad = None
    loss = f()
    grads = backward(loss, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    where = None
    for li, (t, ga) in enumerate(zip(leaves, grads)):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = ga.reshape(-1)
        leaf_worst = 0.0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(gflat[i])
                err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
                leaf_worst = max(leaf_worst, err)
                if err > worst or where is None:
                    worst = max(worst, err)
                    where = (li, int(i), ana, num)
        details.append(leaf_worst)
    if return_details:
        return worst, {"per_leaf": details, "worst": where}
    return worst
