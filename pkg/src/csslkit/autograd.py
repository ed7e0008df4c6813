"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable primitive records its backward closure on the tape when at
least one input requires a gradient.  ``Tensor.backward`` replays the recorded
operations reachable from a scalar loss in exact reverse recording order.

Binary operations never broadcast: operands must have identical shapes.  Python
scalars are accepted through the dedicated scalar ops (``scale``, ``add_scalar``,
``rsub_scalar``) which the arithmetic dunders dispatch to.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_smoothed_step = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return rsub_scalar(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _record(a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    return _record(a.data + float(k), (a,), lambda g: (g,))


def rsub_scalar(k: float, a: Tensor) -> Tensor:
    """``k - a``."""
    return _record(float(k) - a.data, (a,), lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _record(y, (a,), lambda g: (0.5 * g / y,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name to one of add, sub, mul, sigmoid, tanh."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("sigmoid", "tanh"):
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------------------
# step function with surrogate gradient


def surrogate_grad(u: np.ndarray, alpha: float) -> np.ndarray:
    """Triangular pseudo-derivative ``max(0, 1 - |u|/alpha) / alpha``."""
    return np.maximum(0.0, 1.0 - np.abs(u) / alpha) / alpha


def smoothed_step(u: np.ndarray, alpha: float) -> np.ndarray:
    """Antiderivative of :func:`surrogate_grad`, a C1 ramp from 0 to 1."""
    a = float(alpha)
    out = np.where(u >= a, 1.0, 0.0)
    left = (u > -a) & (u < 0)
    right = (u >= 0) & (u < a)
    out = np.where(left, (u + a) ** 2 / (2 * a * a), out)
    out = np.where(right, 1.0 - (a - u) ** 2 / (2 * a * a), out)
    return out


@contextlib.contextmanager
def smoothed_heaviside():
    """Within this context the step forward returns :func:`smoothed_step`.

    The backward rule is unchanged, so analytic gradients computed here are the
    exact derivatives of the smoothed forward; finite differences check them.
    """
    global _smoothed_step
    prev = _smoothed_step
    _smoothed_step = True
    try:
        yield
    finally:
        _smoothed_step = prev


def heaviside(u: Tensor, alpha: float = 1.0) -> Tensor:
    """Strict step ``1[u > 0]`` with a triangular surrogate gradient of width ``alpha``."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    ud = u.data
    fwd = smoothed_step(ud, alpha) if _smoothed_step else (ud > 0).astype(DTYPE)
    return _record(fwd, (u,), lambda g: (g * surrogate_grad(ud, alpha),))


heaviside_surrogate = heaviside


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, g.item()),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _record(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, g.item() / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    parts = tuple(parts)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shapes {ref} and {p.shape} disagree off the channel axis")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _record(a.data[:, start:stop].copy(), (a,), bw)


def split_channels(a: Tensor, parts: int = 2) -> tuple[Tensor, ...]:
    c = a.shape[1]
    if c % parts:
        raise ShapeError(f"split_channels: {c} channels do not split into {parts} parts")
    k = c // parts
    return tuple(slice_channels(a, i * k, (i + 1) * k) for i in range(parts))


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    f = int(factor)
    y = a.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = a.shape

    def bw(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _record(y, (a,), bw)


def expand_channels(b: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly expand a per-channel vector to an NCHW ``shape``."""
    n, c, h, w = shape
    if b.shape != (c,):
        raise ShapeError(f"expand_channels: vector of shape {b.shape} cannot fill {c} channels")
    out = np.broadcast_to(b.data[None, :, None, None], (n, c, h, w)).copy()
    return _record(out, (b,), lambda g: (g.sum(axis=(0, 2, 3)),))


def select(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing with a scatter backward."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] += g
        return (full,)

    return _record(np.array(a.data[index], dtype=DTYPE), (a,), bw)


def stack(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack")
    return _record(np.stack([p.data for p in parts]), parts, lambda g: tuple(g))


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, b_shape, stride, padding) -> None:
    if len(x_shape) != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got rank {len(x_shape)}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,kH,kW], got rank {len(w_shape)}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    _, cin, h, w = x_shape
    cout, kcin, kh, kw = w_shape
    if kcin != cin:
        raise ShapeError(f"conv2d: Cin mismatch, input has {cin} channels, kernel expects {kcin}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kH={kh} exceeds padded height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kW={kw} exceeds padded width {w + 2 * padding}")
    if b_shape is not None and tuple(b_shape) != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {tuple(b_shape)}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Rows are output sites (n, i, j); columns are taps ordered (di, dj, cin)."""
    n, cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=DTYPE)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i : i + hs : stride, j : j + ws : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * cin), xp.shape, ho, wo


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv2d_array(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation on raw arrays (no graph recording)."""
    _check_conv(x.shape, w.shape, None if b is None else b.shape, stride, padding)
    cout, _, kh, kw = w.shape
    cols, _, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ _kernel_matrix(w).T
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW cross-correlation with zero padding and recorded gradients."""
    xd, wd = x.data, w.data
    _check_conv(xd.shape, wd.shape, None if b is None else b.shape, stride, padding)
    n, cin, h, wid = xd.shape
    cout, _, kh, kw = wd.shape
    cols, padded_shape, ho, wo = _im2col(xd, kh, kw, stride, padding)
    wmat = _kernel_matrix(wd)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        gx = gw = gb = None
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(padded_shape, dtype=DTYPE)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
        return gx, gw, gb

    if b is None:
        return _record(out, (x, w), lambda g: bw(g)[:2])
    return _record(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Sum of (optionally weighted) binary cross-entropy terms."""
    z = logits.data
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits: target shape {t.shape} != logits {z.shape}")
    wts = np.ones_like(z) if weights is None else np.asarray(weights, dtype=DTYPE)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)
    return _record(np.array((wts * loss).sum()), (logits,), lambda g: (g.item() * wts * (p - t),))


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None, beta: float = 1.0) -> Tensor:
    """Sum of Huber-style smooth L1 terms, restricted to ``mask`` when given."""
    d = pred.data - np.asarray(target, dtype=DTYPE)
    m = np.ones_like(d) if mask is None else np.asarray(mask, dtype=DTYPE)
    ad = np.abs(d)
    val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(ad < beta, d / beta, np.sign(d))
    return _record(np.array((m * val).sum()), (pred,), lambda g: (g.item() * m * grad,))


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each parameter coordinate nudged by +-eps.  With
    ``max_coords`` set, a random subset of coordinates per tensor is checked.
    Relative error uses ``max(|analytic|, |numeric|)`` floored at 1e-8.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = f().item()
            flat[idx] = orig - eps
            fm = f().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
