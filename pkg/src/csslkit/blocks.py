"""Context-aware thresholded convolution, residual and convolutional recurrent blocks.

Every block computes a per-pixel, per-channel threshold with a sigmoid over a
learned convolution, emits where the pre-activation strictly exceeds it, and
passes the pre-activation through only at emitting sites.  Recurrent units take
their threshold from the previous sparse output and keep a dense auxiliary
memory that is soft-reset by the threshold wherever they emitted.

Each block also has a ``relu`` variant (threshold fixed at zero, no threshold
convolution) used as the comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import autograd as ag
from .accounting import SOpLedger
from .autograd import ShapeError, Tensor, conv2d, conv_output_size, heaviside, relu, sigmoid, tanh


@dataclass
class SparseActivation:
    """Block output together with its emission mask.

    ``threshold`` and ``pre`` keep the raw per-pixel threshold and pre-threshold
    values of the step that produced this activation (None for the zero state).
    """

    values: Tensor
    mask: np.ndarray
    threshold: np.ndarray | None = None
    pre: np.ndarray | None = None

    @property
    def density(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.mask.size if self.mask.size else 0.0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class RecurrentState:
    c: Tensor
    y: SparseActivation


def reset_state(n: int, c: int, h: int, w: int) -> RecurrentState:
    if min(n, c, h, w) <= 0:
        raise ValueError(f"state dims must be positive, got {(n, c, h, w)}")
    shape = (n, c, h, w)
    return RecurrentState(ag.zeros(shape), SparseActivation(ag.zeros(shape), np.zeros(shape)))


def _values(x) -> Tensor:
    return x.values if isinstance(x, SparseActivation) else x


def init_kernel(rng: np.random.Generator, cout: int, cin: int, k: int, name: str) -> Tensor:
    bound = np.sqrt(6.0 / (cin * k * k))
    return Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True, name=name)


def init_bias(c: int, name: str) -> Tensor:
    return Tensor(np.zeros(c), requires_grad=True, name=name)


class ParamsMixin:
    """Named access to the Tensor fields of a parameter dataclass."""

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out[prefix + f.name] = v
            elif isinstance(v, ParamsMixin):
                out.update(v.tensors(f"{prefix}{f.name}."))
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


def soft_reset(c: Tensor, v_th: Tensor, s: Tensor) -> Tensor:
    """Subtract the threshold from the memory wherever the unit emitted."""
    if not (c.shape == v_th.shape == s.shape):
        raise ShapeError(f"soft_reset: shapes {c.shape}, {v_th.shape}, {s.shape} differ")
    return c - v_th * s


def _emit(pre: Tensor, v_th: Tensor | None, alpha: float, relu_mode: bool) -> tuple[Tensor, Tensor | None, np.ndarray]:
    """Threshold ``pre``; returns (output, step tensor or None, mask)."""
    if relu_mode:
        mask = (pre.data > 0).astype(np.float64)
        return relu(pre), None, mask
    s = heaviside(pre - v_th, alpha)
    mask = (pre.data - v_th.data > 0).astype(np.float64)
    return s * pre, s, mask


# ---------------------------------------------------------------------------
# thresholded convolution


@dataclass
class CAConvParams(ParamsMixin):
    w_x: Tensor
    b_x: Tensor
    w_v: Tensor | None
    b_v: Tensor | None
    stride: int = 1
    padding: int = 1
    alpha: float = 1.0

    @property
    def relu(self) -> bool:
        return self.w_v is None

    @property
    def in_channels(self) -> int:
        return self.w_x.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def init(cls, cin, cout, rng, k=3, stride=1, padding=None, alpha=1.0, relu=False):
        padding = k // 2 if padding is None else padding
        w_v = b_v = None
        w_x = init_kernel(rng, cout, cin, k, "w_x")
        if not relu:
            w_v = init_kernel(rng, cout, cin, k, "w_v")
            b_v = init_bias(cout, "b_v")
        return cls(w_x, init_bias(cout, "b_x"), w_v, b_v, stride, padding, alpha)


def ca_conv2d_step(x, p: CAConvParams, ledger: SOpLedger | None = None, name: str = "Conv1") -> SparseActivation:
    xv = _values(x)
    if xv.shape[1] != p.in_channels:
        raise ShapeError(f"{name}: input has {xv.shape[1]} channels, layer expects {p.in_channels}")
    y_pre = conv2d(xv, p.w_x, p.b_x, p.stride, p.padding)
    v_th = None if p.relu else sigmoid(conv2d(xv, p.w_v, p.b_v, p.stride, p.padding))
    y, _, mask = _emit(y_pre, v_th, p.alpha, p.relu)
    if ledger is not None:
        ledger.add_conv(name, xv, p.w_x.shape, p.stride, p.padding)
        if not p.relu:
            ledger.add_conv(name, xv, p.w_v.shape, p.stride, p.padding, threshold_path=True)
        ledger.add_activation(name, y)
    thr = np.zeros(y.shape) if v_th is None else v_th.data
    return SparseActivation(y, mask, thr, y_pre.data)


# ---------------------------------------------------------------------------
# residual block


@dataclass
class ResidualParams(ParamsMixin):
    conv1: CAConvParams
    w_2: Tensor
    b_2: Tensor
    w_s: Tensor | None = None
    b_s: Tensor | None = None
    alpha: float = 1.0

    @property
    def relu(self) -> bool:
        return self.conv1.relu

    @property
    def out_channels(self) -> int:
        return self.conv1.out_channels

    def __post_init__(self):
        c = self.out_channels
        expect = c if self.relu else 2 * c
        if self.w_2.shape[0] != expect:
            raise ShapeError(
                f"residual conv2 must produce {expect} channels for {c} outputs, got {self.w_2.shape[0]}"
            )

    @classmethod
    def init(cls, cin, cout, rng, stride=1, alpha=1.0, relu=False):
        conv1 = CAConvParams.init(cin, cout, rng, stride=stride, alpha=alpha, relu=relu)
        c2 = cout if relu else 2 * cout
        w_2 = init_kernel(rng, c2, cout, 3, "w_2")
        b_2 = init_bias(c2, "b_2")
        w_s = b_s = None
        if cin != cout or stride != 1:
            w_s = init_kernel(rng, cout, cin, 1, "w_s")
            b_s = init_bias(cout, "b_s")
        return cls(conv1, w_2, b_2, w_s, b_s, alpha)


def ca_residual_step(
    x, p: ResidualParams, ledger: SOpLedger | None = None, name: str = "Res1", collect: list | None = None
) -> SparseActivation:
    """Thresholded conv, then a conv whose output halves are threshold logits and
    a dense update added to the shortcut, thresholded again after the sum.

    ``collect`` receives the intermediate and final activations when given.
    """
    xv = _values(x)
    c = p.out_channels
    a = ca_conv2d_step(xv, p.conv1, ledger, f"{name}_Conv1")
    z = conv2d(a.values, p.w_2, p.b_2, 1, 1)
    if p.w_s is None:
        shortcut = xv
    else:
        shortcut = conv2d(xv, p.w_s, p.b_s, p.conv1.stride, 0)
    if shortcut.shape != a.shape:
        raise ShapeError(f"{name}: shortcut shape {shortcut.shape} != branch shape {a.shape}")
    if p.relu:
        r = shortcut + z
        v_th = None
    else:
        u, d = ag.split_channels(z, 2)
        r = shortcut + d
        v_th = sigmoid(u)
    out, _, mask = _emit(r, v_th, p.alpha, p.relu)
    if ledger is not None:
        layer = f"{name}_Conv2"
        half = (c,) + p.w_2.shape[1:]
        ledger.add_conv(layer, a.values, half, 1, 1)
        if not p.relu:
            ledger.add_conv(layer, a.values, half, 1, 1, threshold_path=True)
        if p.w_s is not None:
            ledger.add_conv(layer, xv, p.w_s.shape, p.conv1.stride, 0)
        ledger.add_activation(layer, out)
    if collect is not None:
        collect.extend([a.values, out])
    thr = np.zeros(out.shape) if v_th is None else v_th.data
    return SparseActivation(out, mask, thr, r.data)


# ---------------------------------------------------------------------------
# recurrent units


def _check_state(name: str, st: RecurrentState, n: int, c: int, h: int, w: int) -> None:
    want = (n, c, h, w)
    if st.c.shape != want or st.y.shape != want:
        raise ShapeError(f"{name}: state shapes {st.c.shape}/{st.y.shape} do not match expected {want}")


def _state_dims(x: Tensor, c: int, stride: int) -> tuple[int, int, int, int]:
    n, _, h, w = x.shape
    return n, c, conv_output_size(h, 3, stride, 1), conv_output_size(w, 3, stride, 1)


def _finish(c: Tensor, v_th: Tensor | None, alpha: float, relu_mode: bool, ledger, name) -> tuple[SparseActivation, RecurrentState]:
    y, s, mask = _emit(c, v_th, alpha, relu_mode)
    c_next = c if relu_mode else soft_reset(c, v_th, s)
    if ledger is not None:
        ledger.add_activation(name, y)
    thr = np.zeros(c.shape) if v_th is None else v_th.data
    out = SparseActivation(y, mask, thr, c.data)
    return out, RecurrentState(c_next, out)


@dataclass
class MGUParams(ParamsMixin):
    w_xf: Tensor
    w_yf: Tensor
    b_f: Tensor
    w_v: Tensor | None
    b_v: Tensor | None
    w_hi: Tensor
    w_xh: Tensor
    b_h: Tensor
    stride: int = 1
    alpha: float = 1.0

    @property
    def relu(self) -> bool:
        return self.w_v is None

    @property
    def in_channels(self) -> int:
        return self.w_xf.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w_xf.shape[0]

    @classmethod
    def init(cls, cin, cout, rng, stride=1, alpha=1.0, relu=False):
        k = lambda ci, n: init_kernel(rng, cout, ci, 3, n)  # noqa: E731
        w_v = b_v = None
        w_xf, w_yf = k(cin, "w_xf"), k(cout, "w_yf")
        if not relu:
            w_v, b_v = k(cout, "w_v"), init_bias(cout, "b_v")
        w_hi, w_xh = k(cout, "w_hi"), k(cin, "w_xh")
        return cls(w_xf, w_yf, init_bias(cout, "b_f"), w_v, b_v, w_hi, w_xh, init_bias(cout, "b_h"), stride, alpha)


def ca_mgu_step(x: Tensor, st: RecurrentState, p: MGUParams, ledger: SOpLedger | None = None, name: str = "Recurrent1"):
    """One step of the context-aware convolutional minimal gated unit."""
    x = _values(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, unit expects {p.in_channels}")
    _check_state(name, st, *_state_dims(x, p.out_channels, p.stride))
    y_prev = st.y.values
    s_ = p.stride
    f = sigmoid(
        conv2d(x, p.w_xf, None, s_, 1) + conv2d(y_prev, p.w_yf, None, 1, 1) + ag.expand_channels(p.b_f, y_prev.shape)
    )
    v_th = None if p.relu else sigmoid(conv2d(y_prev, p.w_v, p.b_v, 1, 1))
    gated = f * y_prev
    h = tanh(conv2d(gated, p.w_hi, None, 1, 1) + conv2d(x, p.w_xh, p.b_h, s_, 1))
    c = (1.0 - f) * st.c + f * h
    if ledger is not None:
        ledger.add_conv(name, x, p.w_xf.shape, s_, 1, sparse=False)
        ledger.add_conv(name, x, p.w_xh.shape, s_, 1, sparse=False)
        ledger.add_conv(name, y_prev, p.w_yf.shape, 1, 1)
        ledger.add_conv(name, gated, p.w_hi.shape, 1, 1)
        if not p.relu:
            ledger.add_conv(name, y_prev, p.w_v.shape, 1, 1, threshold_path=True)
    return _finish(c, v_th, p.alpha, p.relu, ledger, name)


@dataclass
class GRUParams(ParamsMixin):
    w_xz: Tensor
    w_yz: Tensor
    b_z: Tensor
    w_xr: Tensor
    w_yr: Tensor
    b_r: Tensor
    w_v: Tensor | None
    b_v: Tensor | None
    w_xh: Tensor
    w_yh: Tensor
    b_h: Tensor
    stride: int = 1
    alpha: float = 1.0

    @property
    def relu(self) -> bool:
        return self.w_v is None

    @property
    def in_channels(self) -> int:
        return self.w_xz.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w_xz.shape[0]

    @classmethod
    def init(cls, cin, cout, rng, stride=1, alpha=1.0, relu=False):
        k = lambda ci, n: init_kernel(rng, cout, ci, 3, n)  # noqa: E731
        w_xz, w_yz, b_z = k(cin, "w_xz"), k(cout, "w_yz"), init_bias(cout, "b_z")
        w_xr, w_yr, b_r = k(cin, "w_xr"), k(cout, "w_yr"), init_bias(cout, "b_r")
        w_v = b_v = None
        if not relu:
            w_v, b_v = k(cout, "w_v"), init_bias(cout, "b_v")
        w_xh, w_yh, b_h = k(cin, "w_xh"), k(cout, "w_yh"), init_bias(cout, "b_h")
        return cls(w_xz, w_yz, b_z, w_xr, w_yr, b_r, w_v, b_v, w_xh, w_yh, b_h, stride, alpha)


def ca_gru_step(x: Tensor, st: RecurrentState, p: GRUParams, ledger: SOpLedger | None = None, name: str = "Recurrent1"):
    x = _values(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, unit expects {p.in_channels}")
    _check_state(name, st, *_state_dims(x, p.out_channels, p.stride))
    y_prev = st.y.values
    s_ = p.stride
    z = sigmoid(conv2d(x, p.w_xz, p.b_z, s_, 1) + conv2d(y_prev, p.w_yz, None, 1, 1))
    r = sigmoid(conv2d(x, p.w_xr, p.b_r, s_, 1) + conv2d(y_prev, p.w_yr, None, 1, 1))
    v_th = None if p.relu else sigmoid(conv2d(y_prev, p.w_v, p.b_v, 1, 1))
    gated = r * y_prev
    h = tanh(conv2d(x, p.w_xh, p.b_h, s_, 1) + conv2d(gated, p.w_yh, None, 1, 1))
    c = (1.0 - z) * st.c + z * h
    if ledger is not None:
        for w in (p.w_xz, p.w_xr, p.w_xh):
            ledger.add_conv(name, x, w.shape, s_, 1, sparse=False)
        ledger.add_conv(name, y_prev, p.w_yz.shape, 1, 1)
        ledger.add_conv(name, y_prev, p.w_yr.shape, 1, 1)
        ledger.add_conv(name, gated, p.w_yh.shape, 1, 1)
        if not p.relu:
            ledger.add_conv(name, y_prev, p.w_v.shape, 1, 1, threshold_path=True)
    return _finish(c, v_th, p.alpha, p.relu, ledger, name)


@dataclass
class MinimalRNNParams(ParamsMixin):
    w_z: Tensor
    b_z: Tensor
    w_uz: Tensor
    w_uy: Tensor
    b_u: Tensor
    w_v: Tensor | None
    b_v: Tensor | None
    stride: int = 1
    alpha: float = 1.0

    @property
    def relu(self) -> bool:
        return self.w_v is None

    @property
    def in_channels(self) -> int:
        return self.w_z.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w_z.shape[0]

    @classmethod
    def init(cls, cin, cout, rng, stride=1, alpha=1.0, relu=False):
        k = lambda ci, n: init_kernel(rng, cout, ci, 3, n)  # noqa: E731
        w_z, b_z = k(cin, "w_z"), init_bias(cout, "b_z")
        w_uz, w_uy, b_u = k(cout, "w_uz"), k(cout, "w_uy"), init_bias(cout, "b_u")
        w_v = b_v = None
        if not relu:
            w_v, b_v = k(cout, "w_v"), init_bias(cout, "b_v")
        return cls(w_z, b_z, w_uz, w_uy, b_u, w_v, b_v, stride, alpha)


def ca_minimalrnn_step(
    x: Tensor, st: RecurrentState, p: MinimalRNNParams, ledger: SOpLedger | None = None, name: str = "Recurrent1"
):
    x = _values(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, unit expects {p.in_channels}")
    _check_state(name, st, *_state_dims(x, p.out_channels, p.stride))
    y_prev = st.y.values
    z = tanh(conv2d(x, p.w_z, p.b_z, p.stride, 1))
    u = sigmoid(
        conv2d(z, p.w_uz, None, 1, 1) + conv2d(y_prev, p.w_uy, None, 1, 1) + ag.expand_channels(p.b_u, y_prev.shape)
    )
    v_th = None if p.relu else sigmoid(conv2d(y_prev, p.w_v, p.b_v, 1, 1))
    c = u * st.c + (1.0 - u) * z
    if ledger is not None:
        ledger.add_conv(name, x, p.w_z.shape, p.stride, 1, sparse=False)
        ledger.add_conv(name, z, p.w_uz.shape, 1, 1, sparse=False)
        ledger.add_conv(name, y_prev, p.w_uy.shape, 1, 1)
        if not p.relu:
            ledger.add_conv(name, y_prev, p.w_v.shape, 1, 1, threshold_path=True)
    return _finish(c, v_th, p.alpha, p.relu, ledger, name)


RECURRENT_KINDS: dict[str, tuple[type, Callable]] = {
    "mgu": (MGUParams, ca_mgu_step),
    "gru": (GRUParams, ca_gru_step),
    "minimalrnn": (MinimalRNNParams, ca_minimalrnn_step),
}


def recurrent_step(kind: str, x, st, p, ledger=None, name="Recurrent1"):
    try:
        step = RECURRENT_KINDS[kind][1]
    except KeyError:
        raise ValueError(f"unknown recurrent kind {kind!r}; choose from {sorted(RECURRENT_KINDS)}") from None
    return step(x, st, p, ledger, name)
