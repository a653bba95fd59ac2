"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray and, while differentiation is enabled, links to
the operation that produced it.  backward() on a scalar root walks the
graph once in reverse topological order and accumulates gradients into
every requiring leaf.  The op set is exactly what the denoiser and the
guidance energies need: elementwise arithmetic, matmul, reductions,
softmax/sigmoid, convolution, pooling, indexing, and a differentiable
bilinear resampler for attention-map transforms.

Precision policy: tensors carry whatever float dtype their data has.
Oracle and gradient tests run in float64; training and sampling run in
float32 for throughput.
"""

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        self.prev = grad_enabled()
        _state.enabled = False

    def __exit__(self, *exc):
        _state.enabled = self.prev
        return False


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back to `shape`
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=None if hasattr(data, "dtype") else np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, free_graph=True):
        """Accumulate d(self)/d(leaf) into every requiring leaf's .grad.

        Repeated calls on fresh graphs accumulate additively.  The graph
        is released afterwards unless free_graph is False.
        """
        if self.size != 1:
            raise ValueError("backward requires scalar")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node._accumulate(g)
                continue
            contribs = node._vjp(g)
            for p, c in zip(node._parents, contribs):
                if c is None or not p.requires_grad:
                    continue
                acc = flowing.get(id(p))
                if acc is None:
                    # own a writable buffer: a vjp may hand back g itself,
                    # a view, or an immutable numpy scalar
                    if c is g or not isinstance(c, np.ndarray) or c.base is not None:
                        c = np.array(c)
                    flowing[id(p)] = c
                else:
                    acc += c
            if free_graph:
                node._parents = ()
                node._vjp = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return _op(self.data + other.data, (self, other),
                       lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))
        return _op(self.data + other, (self,), lambda g: (_unbroadcast(g, self.shape),))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _op(self.data - other.data, (self, other),
                       lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))
        return _op(self.data - other, (self,), lambda g: (_unbroadcast(g, self.shape),))

    def __rsub__(self, other):
        return _op(other - self.data, (self,), lambda g: (_unbroadcast(-g, self.shape),))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _op(self.data * other.data, (self, other),
                       lambda g: (_unbroadcast(g * other.data, self.shape),
                                  _unbroadcast(g * self.data, other.shape)))
        return _op(self.data * other, (self,), lambda g: (_unbroadcast(g * other, self.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _op(self.data / other.data, (self, other),
                       lambda g: (_unbroadcast(g / other.data, self.shape),
                                  _unbroadcast(-g * self.data / (other.data * other.data), other.shape)))
        return _op(self.data / other, (self,), lambda g: (_unbroadcast(g / other, self.shape),))

    def __rtruediv__(self, other):
        return _op(other / self.data, (self,),
                   lambda g: (_unbroadcast(-g * other / (self.data * self.data), self.shape),))

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        out = self.data ** p
        return _op(out, (self,), lambda g: (g * p * self.data ** (p - 1),))

    def __matmul__(self, other):
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def vjp(g):
            ga = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape) if need_a else None
            gb = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape) if need_b else None
            return ga, gb

        return _op(a @ b, (self, other), vjp)

    def __getitem__(self, idx):
        src_shape = self.data.shape

        def vjp(g):
            out = np.zeros(src_shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)

        return _op(self.data[idx], (self,), vjp)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return _op(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self):
        """Global maximum; gradient flows to the first attaining element."""
        flat_idx = int(self.data.argmax())
        shape = self.data.shape

        def vjp(g):
            out = np.zeros(shape, dtype=g.dtype)
            out.flat[flat_idx] = g
            return (out,)

        return _op(np.asarray(self.data.max()), (self,), vjp)

    def min(self):
        flat_idx = int(self.data.argmin())
        shape = self.data.shape

        def vjp(g):
            out = np.zeros(shape, dtype=g.dtype)
            out.flat[flat_idx] = g
            return (out,)

        return _op(np.asarray(self.data.min()), (self,), vjp)


def _op(data, parents, vjp):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def stop_gradient(x):
    """Identity forward; contributes zero gradient to its input."""
    x = as_tensor(x)
    return Tensor(x.data)


def exp(x):
    y = np.exp(x.data)
    return _op(y, (x,), lambda g: (g * y,))


def log(x):
    return _op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    y = np.sqrt(x.data)
    return _op(y, (x,), lambda g: (g * 0.5 / y,))


def absolute(x):
    s = np.sign(x.data)
    return _op(np.abs(x.data), (x,), lambda g: (g * s,))


def sigmoid(x):
    """Elementwise 1/(1+e^-x), computed without overflow on either tail."""
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0, e) / (1.0 + e)
    return _op(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x, axis=-1):
    """Softmax along `axis` with mandatory subtract-max stabilization."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _op(y, (x,), vjp)


def silu(x):
    """x * sigmoid(x), fused into one node."""
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    sig = np.where(d >= 0, 1.0, e) / (1.0 + e)
    y = d * sig

    def vjp(g):
        return (g * (sig * (1.0 + d * (1.0 - sig))),)

    return _op(y, (x,), vjp)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Channels-last group normalization, (N,H,W,C) with C = groups*cg.

    Statistics are taken over the spatial sites and the channels of each
    group; gamma/beta are per-channel.  Fused forward and backward.
    """
    n, h, w, c = x.data.shape
    cg = c // groups
    xg = x.data.reshape(n, h * w, groups, cg)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(n, h, w, c)
    out = xhat * gamma.data + beta.data
    m = h * w * cg

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 1, 2)) if beta.requires_grad else None
        if x.requires_grad:
            dy = (g * gamma.data).reshape(n, h * w, groups, cg)
            xh = xhat.reshape(n, h * w, groups, cg)
            s1 = dy.sum(axis=(1, 3), keepdims=True)
            s2 = (dy * xh).sum(axis=(1, 3), keepdims=True)
            dx = (rstd / m) * (m * dy - s1 - xh * s2)
            dx = dx.reshape(n, h, w, c)
        else:
            dx = None
        return dx, dgamma, dbeta

    return _op(out, (x, gamma, beta), vjp)


def concatenate(tensors, axis=0):
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _op(np.concatenate(datas, axis=axis), tuple(tensors), vjp)


def _im2col(x, k, pad):
    """Channels-last patch matrix: (N*OH*OW, k*k*C) plus output dims."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    oh, ow = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * oh * ow, k * k * c), oh, ow


def conv2d(x, w, b=None, pad=1):
    """2-D convolution, stride 1, zero padding `pad`, channels last.

    x: (N,H,W,C); w: (k,k,C,O); b: (O,) or None.  dx in the backward
    pass is a correlation of the incoming gradient with the flipped
    kernel (padding k-1-pad), which keeps everything in matmuls.  The
    gradient for a parent that does not require one is skipped, so
    frozen-weight graphs never pay for dw and leaf inputs never pay
    for dx; the patch matrix is kept alive only when dw is needed.
    """
    n, h, wd, c = x.data.shape
    k, _, _, o = w.data.shape
    need_x, need_w = x.requires_grad, w.requires_grad
    if k == 1 and pad == 0:
        wmat1 = w.data.reshape(c, o)
        out = x.data @ wmat1
        if b is not None:
            out = out + b.data

        def vjp1(g):
            dw = ((g.reshape(-1, o).T @ x.data.reshape(-1, c)).T.reshape(1, 1, c, o)
                  if need_w else None)
            dx = g @ wmat1.T if need_x else None
            db = g.sum(axis=(0, 1, 2)) if b is not None and b.requires_grad else None
            return dx, dw, db

        parents1 = (x, w) if b is None else (x, w, b)
        return _op(out, parents1, lambda g: vjp1(g)[: len(parents1)])

    wmat = w.data.reshape(k * k * c, o)
    cols, oh, ow = _im2col(x.data, k, pad)
    out = (cols @ wmat).reshape(n, oh, ow, o)
    if b is not None:
        out = out + b.data
    kept = cols if need_w and grad_enabled() else None

    def vjp(g):
        gm = g.reshape(-1, o)
        dw = (kept.T @ gm).reshape(k, k, c, o) if need_w else None
        if need_x:
            wflip = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
            gcols, _, _ = _im2col(g, k, k - 1 - pad)
            dx = (gcols @ wflip.reshape(k * k * o, c)).reshape(n, h, wd, c)
        else:
            dx = None
        db = g.sum(axis=(0, 1, 2)) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _op(out, parents, lambda g: vjp(g)[: len(parents)])


def avg_pool2(x):
    """2x2 average pooling, stride 2, channels last."""
    n, h, w, c = x.data.shape
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _op(out, (x,), vjp)


def upsample_nearest2(x):
    n, h, w, c = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _op(out, (x,), vjp)


def bilinear_resample(m, transform, out_h, out_w):
    """Resample a 2-D map under an affine transform of its content.

    Coordinates are normalized to [0,1]^2 with pixel centers at
    ((w+0.5)/W, (h+0.5)/H).  Output pixel p takes the bilinear sample of
    the source at transform^-1(p): points inside the source rectangle
    are sampled with edge clamping, points outside read as zero, so mass
    translated off-canvas is dropped.  Differentiable w.r.t. the map.
    Coordinate math is always float64 so power-of-two integer shifts are
    exact.
    """
    m = as_tensor(m)
    h, w = m.data.shape
    inv = transform.inverse()
    jj, ii = np.meshgrid(np.arange(out_w, dtype=np.float64) + 0.5,
                         np.arange(out_h, dtype=np.float64) + 0.5)
    # fuse normalization into the affine so axis-aligned cases hit
    # source pixel centers exactly
    u = inv.m[0, 0] * (w / out_w) * jj + inv.m[0, 1] * (w / out_h) * ii + (inv.b[0] * w - 0.5)
    v = inv.m[1, 0] * (h / out_w) * jj + inv.m[1, 1] * (h / out_h) * ii + (inv.b[1] * h - 0.5)
    inside = (u >= -0.5) & (u <= w - 0.5) & (v >= -0.5) & (v <= h - 0.5)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    u0i = np.clip(u0.astype(np.int64), 0, w - 1)
    u1i = np.clip(u0i + 1, 0, w - 1)
    v0i = np.clip(v0.astype(np.int64), 0, h - 1)
    v1i = np.clip(v0i + 1, 0, h - 1)
    wgt = [(v0i, u0i, (1 - fv) * (1 - fu)), (v0i, u1i, (1 - fv) * fu),
           (v1i, u0i, fv * (1 - fu)), (v1i, u1i, fv * fu)]
    acc = np.zeros((out_h, out_w), dtype=m.data.dtype)
    for vi, ui, wt in wgt:
        acc += m.data[vi, ui] * wt
    acc *= inside

    def vjp(g):
        gm = g * inside
        out = np.zeros((h, w), dtype=g.dtype)
        for vi, ui, wt in wgt:
            np.add.at(out, (vi, ui), gm * wt)
        return (out,)

    return _op(acc, (m,), vjp)


# -- finite-difference checking --------------------------------------------


def numeric_gradient(f, arrays, index, h=1e-6):
    """Central finite differences of scalar f w.r.t. arrays[index], float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    flat = target.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(*base))
        flat[i] = orig - h
        fm = float(f(*base))
        flat[i] = orig
        out.ravel()[i] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(f, arrays, rtol=1e-5, h=1e-6, skip=()):
    """Compare analytic gradients of scalar-valued f against central
    finite differences for every input array.

    f is called with Tensors and must return a scalar Tensor.  The error
    metric is max|analytic - numeric| / (max|numeric| + 1e-12), a global
    relative error that stays meaningful where single entries vanish.
    Inputs listed in `skip` sit behind an intentional stop-gradient:
    they are not FD-compared, but their analytic gradient must be
    exactly zero.  Returns the worst relative error over checked inputs.
    """
    leaves = [tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = f(*leaves)
    if not isinstance(out, Tensor):
        raise TypeError("f must return a Tensor")
    out.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if i in skip:
            if np.any(analytic != 0.0):
                raise AssertionError(f"input {i} is stop-gradient but got nonzero gradient")
            continue

        def fval(*arrs):
            with no_grad():
                return f(*[Tensor(a) for a in arrs]).item()

        numeric = numeric_gradient(fval, [l.data for l in leaves], i, h=h)
        err = np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-12)
        worst = max(worst, float(err))
        if err > rtol:
            raise AssertionError(
                f"gradient mismatch on input {i}: rel err {err:.3g} > {rtol:.3g}")
    return worst
