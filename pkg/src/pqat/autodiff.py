"""Minimal dense-tensor reverse-mode autodiff engine on numpy float32.

Every value in the library is a :class:`Tensor`: a flat float32 ndarray plus
an optional gradient accumulator. Operations build a closure graph; calling
``backward()`` on a scalar loss walks the graph in reverse topological order
and accumulates gradients into every tensor with ``requires_grad``.

Gradients are accumulated per backward pass: two backward calls without
zeroing leave exactly twice the gradient of one call.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "RngStream",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "reshape",
    "concat",
    "clamp",
    "relu",
    "sigmoid",
    "softplus",
    "softplus_inverse",
    "exp",
    "log",
    "sqrt",
    "pow2",
    "absolute",
    "tsum",
    "tmean",
    "round_ste",
    "round_half_away",
    "softmax_cross_entropy",
    "mse",
    "huber",
    "zero_grads",
    "finite_difference_check",
]

LN2 = float(np.log(2.0))


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


class Tensor:
    """Dense n-d float32 array with an optional gradient accumulator."""

    __slots__ = ("_data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        # _backward(flow) distributes the incoming gradient to the parents'
        # flow buffers; leaf tensors have no closure.
        self._backward = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # Always a mutable float32 ndarray, even when assigned a scalar, so
        # in-place updates and flat views stay valid.
        self._data = np.asarray(value, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss.

        Accumulates (sums) into ``grad`` of every reachable tensor with
        ``requires_grad``; never overwrites.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
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
                if id(p) not in seen:
                    stack.append((p, False))

        # Per-pass flow buffers keyed by node identity, so that repeated
        # backward calls add one full gradient each time.
        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._backward is not None:
                node._backward(g, flow)

    # Operator sugar ------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _send(flow: dict[int, np.ndarray], node: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a parent's flow buffer."""
    if not node.requires_grad and node._backward is None:
        return
    key = id(node)
    buf = flow.get(key)
    if buf is None:
        # Always a fresh writable ndarray: numpy ops on 0-d arrays yield
        # immutable scalars, which would silently drop later `buf += g`.
        flow[key] = np.array(g, dtype=np.float32)
    else:
        buf += g


def _needs_graph(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(np.float32)


def _check_broadcast(a_shape, b_shape) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ValueError(f"incompatible broadcast shapes {a_shape} and {b_shape}")


# Elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    if _needs_graph(a, b):
        out._parents = (a, b)

        def bw(g, flow):
            _send(flow, a, _unbroadcast(g, a.shape))
            _send(flow, b, _unbroadcast(g, b.shape))

        out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    if _needs_graph(a, b):
        out._parents = (a, b)

        def bw(g, flow):
            _send(flow, a, _unbroadcast(g, a.shape))
            _send(flow, b, _unbroadcast(-g, b.shape))

        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    if _needs_graph(a, b):
        out._parents = (a, b)

        def bw(g, flow):
            _send(flow, a, _unbroadcast(g * b.data, a.shape))
            _send(flow, b, _unbroadcast(g * a.data, b.shape))

        out._backward = bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data / b.data)
    if _needs_graph(a, b):
        out._parents = (a, b)

        def bw(g, flow):
            _send(flow, a, _unbroadcast(g / b.data, a.shape))
            _send(flow, b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        out._backward = bw
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    if _needs_graph(a):
        out._parents = (a,)
        out._backward = lambda g, flow: _send(flow, a, -g)
    return out


# Linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if _needs_graph(a, b):
        out._parents = (a, b)

        def bw(g, flow):
            _send(flow, a, g @ b.data.T)
            _send(flow, b, a.data.T @ g)

        out._backward = bw
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(
            f"kernel ({kh}x{kw}) larger than padded input ({h + 2 * pad}x{w + 2 * pad})"
        )
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ValueError(
            f"non-integral conv output extent for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct cross-correlation of x[N,C,H,W] with w[F,C,kh,kw]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    f, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wf = w.data.reshape(f, c * kh * kw)
    out_data = np.einsum("fk,nko->nfo", wf, cols).reshape(x.shape[0], f, ho, wo)
    out = Tensor(out_data)
    if _needs_graph(x, w):
        out._parents = (x, w)

        def bw(g, flow):
            gf = g.reshape(g.shape[0], f, ho * wo)
            _send(flow, w, np.einsum("nfo,nko->fk", gf, cols).reshape(w.shape))
            gcols = np.einsum("fk,nfo->nko", wf, gf)
            _send(flow, x, _col2im(gcols, x.shape, kh, kw, stride, pad, ho, wo))

        out._backward = bw
    return out


def avg_pool2d(x, k: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: input {h}x{w} not divisible by window {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k)
    out = Tensor(blocks.mean(axis=(3, 5)))
    if _needs_graph(x):
        out._parents = (x,)

        def bw(g, flow):
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            _send(flow, x, gx.astype(np.float32))

        out._backward = bw
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g.reshape(x.shape))
    return out


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if _needs_graph(*parts):
        out._parents = tuple(parts)
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bw(g, flow):
            for p, gp in zip(parts, np.split(g, splits, axis=axis)):
                _send(flow, p, gp)

        out._backward = bw
    return out


# Nonlinearities -----------------------------------------------------------


def clamp(x, lo: float, hi: float) -> Tensor:
    """Elementwise min/max. Gradient is 1 inside [lo, hi] inclusive, 0 outside."""
    if lo > hi:
        raise ValueError(f"clamp: lo ({lo}) > hi ({hi})")
    x = _as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi))
    if _needs_graph(x):
        out._parents = (x,)
        mask = ((x.data >= lo) & (x.data <= hi)).astype(np.float32)
        out._backward = lambda g, flow: _send(flow, x, g * mask)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    if _needs_graph(x):
        out._parents = (x,)
        mask = (x.data > 0).astype(np.float32)
        out._backward = lambda g, flow: _send(flow, x, g * mask)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g * s * (1.0 - s))
    return out


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    # log(1 + e^x) evaluated stably for large |x|
    out = Tensor(np.logaddexp(0.0, x.data))
    if _needs_graph(x):
        out._parents = (x,)
        s = 1.0 / (1.0 + np.exp(-x.data))
        out._backward = lambda g, flow: _send(flow, x, g * s)
    return out


def softplus_inverse(y: float) -> float:
    """Scalar inverse of softplus: returns x with log(1+e^x) == y (y > 0)."""
    if y <= 0:
        raise ValueError(f"softplus_inverse requires y > 0, got {y}")
    return float(y + np.log1p(-np.exp(-min(y, 80.0))))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    out = Tensor(e)
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g * e)
    return out


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.log(x.data))
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g / x.data)
    return out


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    r = np.sqrt(x.data)
    out = Tensor(r)
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g * (0.5 / r))
    return out


def pow2(x) -> Tensor:
    """2**x with gradient ln(2) * 2**x."""
    x = _as_tensor(x)
    p = np.exp2(x.data)
    out = Tensor(p)
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g * (LN2 * p))
    return out


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.abs(x.data))
    if _needs_graph(x):
        out._parents = (x,)
        s = np.sign(x.data).astype(np.float32)
        out._backward = lambda g, flow: _send(flow, x, g * s)
    return out


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    if _needs_graph(x):
        out._parents = (x,)

        def bw(g, flow):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _send(flow, x, np.broadcast_to(g, x.shape).astype(np.float32))

        out._backward = bw
    return out


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    scale = x.data.size / out.data.size
    if _needs_graph(x):
        out._parents = (x,)

        def bw(g, flow):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _send(flow, x, (np.broadcast_to(g, x.shape) / scale).astype(np.float32))

        out._backward = bw
    return out


def round_ste(x) -> Tensor:
    """Round half away from zero; backward passes the gradient unchanged."""
    x = _as_tensor(x)
    out = Tensor(round_half_away(x.data))
    if _needs_graph(x):
        out._parents = (x,)
        out._backward = lambda g, flow: _send(flow, x, g)
    return out


# Losses -------------------------------------------------------------------


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of logits [N, C] against integer labels [N]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = z.shape[0]
    picked = z[np.arange(n), labels]
    out = Tensor(np.float32((lse - picked).mean()))
    if _needs_graph(logits):
        out._parents = (logits,)
        probs = np.exp(z - zmax)
        probs /= probs.sum(axis=1, keepdims=True)

        def bw(g, flow):
            gz = probs.copy()
            gz[np.arange(n), labels] -= 1.0
            _send(flow, logits, (float(g) / n) * gz)

        out._backward = bw
    return out


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


def huber(x, delta: float) -> Tensor:
    """Mean Huber loss: 0.5 x^2 for |x| <= delta, delta (|x| - 0.5 delta) beyond."""
    if delta <= 0:
        raise ValueError(f"huber requires delta > 0, got {delta}")
    x = _as_tensor(x)
    a = np.abs(x.data)
    vals = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    out = Tensor(np.float32(vals.mean()))
    if _needs_graph(x):
        out._parents = (x,)
        dv = np.clip(x.data, -delta, delta) / x.data.size

        def bw(g, flow):
            _send(flow, x, float(g) * dv)

        out._backward = bw
    return out


# Utilities ----------------------------------------------------------------


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def finite_difference_check(f, params, eps: float = 1e-3):
    """Max error between autodiff gradients and central differences.

    ``f()`` evaluates the scalar loss from the current parameter values and
    must be deterministic (freeze any noise). Gradients are taken from each
    param's ``grad`` after one backward of ``f()``; the numeric side perturbs
    one coordinate at a time. The worst absolute deviation is normalized by
    the largest gradient magnitude across all checked coordinates (floor
    1e-3), the scale at which a float32 forward can resolve differences.
    """
    params = list(params)
    zero_grads(params)
    loss = f()
    if not isinstance(loss, Tensor):
        raise TypeError("f() must return a Tensor loss")
    loss.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst_abs = 0.0
    scale = 1e-3
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _loss_value(f)
            flat[i] = orig - eps
            f_minus = _loss_value(f)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            ad = float(gflat[i])
            worst_abs = max(worst_abs, abs(ad - fd))
            scale = max(scale, abs(ad), abs(fd))
    return worst_abs / scale


def _loss_value(f) -> float:
    out = f()
    return out.item() if isinstance(out, Tensor) else float(out)


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    The same key replays the identical sample sequence regardless of runs or
    thread counts; draws advance a private generator, so independent streams
    never interleave.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.default_rng(
            np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF])
        )

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(np.float32)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape).astype(np.float32)

    def rademacher(self, shape=()) -> np.ndarray:
        return (self._gen.integers(0, 2, size=shape) * 2 - 1).astype(np.float32)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
