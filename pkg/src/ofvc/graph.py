"""Differentiable compute core for the decoder graph.

Values live in :class:`Tensor` objects; a :class:`Tape` applies primitives and,
when recording, remembers how to push gradients back through them.  The set of
primitives is deliberately small: exactly what the latent pyramid, the ARM, the
synthesis and the inter module need.

Two evaluation flavours exist:

* recording tapes (training) may use BLAS-backed kernels for speed;
* non-recording tapes (decoding, closed-loop reconstruction) use kernels with
  a fixed, element-wise accumulation order so results do not depend on batch
  size or array layout.  This is what makes encoder and decoder bit-exact.

A :class:`MulCounter` attached to a tape tallies every multiplication performed
by the primitives, bucketed by the active :meth:`Tape.scope`.
"""

from __future__ import annotations

import math
from collections import defaultdict
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, UsageError

# Kernel rows used by each output parity of the stride-2 transposed conv once
# the full (2h+6) output is cropped by 3 on each side.
_TCONV_TAPS = (np.array([7, 5, 3, 1]), np.array([6, 4, 2, 0]))

_LN2 = math.log(2.0)
PROB_FLOOR_LOG2 = -16
LOG_SCALE_MIN, LOG_SCALE_MAX = -8.0, 8.0


class MulCounter:
    """Exact multiplication tally, one integer bucket per scope."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, scope: str, n: int) -> None:
        self.counts[scope] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def merge(self, other: "MulCounter") -> None:
        for k, v in other.counts.items():
            self.counts[k] += v

    def as_dict(self) -> dict[str, int]:
        return dict(self.counts)


class Tensor:
    __slots__ = ("value", "requires_grad", "grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value, dtype=np.float32) -> Tensor:
    """A trainable leaf (copied, so the caller's array is never mutated)."""
    return Tensor(np.array(value, dtype=dtype), requires_grad=True)


def const(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_power_of_two(c: float) -> bool:
    return c != 0.0 and math.frexp(abs(c))[0] == 0.5


# ---------------------------------------------------------------------------
# plain kernels


def linear_fixed(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-column affine map with a fixed accumulation order.

    ``x`` is (I, N), ``weight`` (O, I), ``bias`` (O,). Each output element is
    ``((b + w0*x0) + w1*x1) + ...`` regardless of N.
    """
    out = np.broadcast_to(bias[:, None], (bias.shape[0], x.shape[1]))
    for k in range(x.shape[0]):
        out = out + weight[:, k : k + 1] * x[k : k + 1, :]
    return out


def _pad2(x: np.ndarray, n: int) -> np.ndarray:
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(n, n), (n, n)])


def tconv_up2_fixed(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Fixed-order upsampling of the last two axes of ``x``."""
    h, w = x.shape[-2:]
    xp = _pad2(x, 2)
    out = np.empty(x.shape[:-2] + (2 * h, 2 * w), dtype=np.result_type(x, kernel))
    for a in (0, 1):
        for b in (0, 1):
            acc = np.zeros(x.shape, dtype=out.dtype)
            for s, u in enumerate(_TCONV_TAPS[a]):
                for t, v in enumerate(_TCONV_TAPS[b]):
                    acc = acc + kernel[u, v] * xp[..., a + s : a + s + h, b + t : b + t + w]
            out[..., a::2, b::2] = acc
    return out


def tconv_up2_fast(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    windows = sliding_window_view(_pad2(x, 2), (4, 4), axis=(-2, -1))
    out = np.empty(x.shape[:-2] + (2 * h, 2 * w), dtype=np.result_type(x, kernel))
    for a in (0, 1):
        for b in (0, 1):
            k_ab = kernel[np.ix_(_TCONV_TAPS[a], _TCONV_TAPS[b])]
            out[..., a::2, b::2] = np.tensordot(windows[..., a : a + h, b : b + w, :, :], k_ab, axes=2)
    return out


def _tconv_up2_grads(x: np.ndarray, kernel: np.ndarray, g: np.ndarray):
    h, w = x.shape[-2:]
    gfull = np.zeros(x.shape[:-2] + (2 * h + 6, 2 * w + 6), dtype=g.dtype)
    gfull[..., 3 : 3 + 2 * h, 3 : 3 + 2 * w] = g
    windows = sliding_window_view(gfull, (8, 8), axis=(-2, -1))[..., ::2, ::2, :, :]
    gx = np.tensordot(windows, kernel, axes=2)
    axes = list(range(x.ndim))
    gk = np.tensordot(x, windows, axes=(axes, axes))
    return gx, gk


def _warp_setup(shape: tuple[int, int], flow: np.ndarray):
    h, w = shape
    gy, gx = np.mgrid[0:h, 0:w]
    xs = gx + flow[0]
    ys = gy + flow[1]
    x_in = (xs >= 0) & (xs <= w - 1)
    y_in = (ys >= 0) & (ys <= h - 1)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, fx.astype(flow.dtype), fy.astype(flow.dtype), x_in, y_in


def bilinear_warp_value(ref: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Gather-warp ``ref`` (C, H, W) by ``flow`` (2, H, W) with clamp-to-edge.

    Sample position for target (i, j) is (i + flow[1], j + flow[0]).  Three
    multiplications per output sample (lerp form).
    """
    x0, x1, y0, y1, fx, fy, _, _ = _warp_setup(ref.shape[1:], flow)
    a = ref[:, y0, x0]
    b = ref[:, y0, x1]
    c = ref[:, y1, x0]
    d = ref[:, y1, x1]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return top + fy * (bot - top)


def laplace_bits_value(y, mu, log_scale) -> np.ndarray:
    """Bits of the discretized Laplace mass on [y - 0.5, y + 0.5]."""
    bits, _ = _laplace_bits(np.asarray(y, np.float64), np.asarray(mu, np.float64),
                            np.asarray(log_scale, np.float64), need_grad=False)
    return bits


def _laplace_bits(y, mu, o2, need_grad: bool):
    in_clip = (o2 >= LOG_SCALE_MIN) & (o2 <= LOG_SCALE_MAX)
    scale = np.exp(np.clip(o2, LOG_SCALE_MIN, LOG_SCALE_MAX))
    inv = 1.0 / scale
    s = y - mu
    a = np.abs(s)
    far = a >= 0.5
    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        # |s| >= 0.5: both interval ends on the same side of the mode
        ln_p_far = math.log(0.5) - (a - 0.5) * inv + np.log(-np.expm1(-inv))
        e1 = np.exp(-(0.5 + a) * inv)
        e2 = np.exp(-(0.5 - a) * inv)
        p_near = -0.5 * (np.expm1(-(0.5 + a) * inv) + np.expm1(-(0.5 - a) * inv))
        ln_p_near = np.log(p_near)
    ln_p = np.where(far, ln_p_far, ln_p_near)
    floor = PROB_FLOOR_LOG2 * _LN2
    floored = ln_p < floor
    bits = -np.maximum(ln_p, floor) / _LN2
    if not need_grad:
        return bits, None
    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        inv2 = inv * inv
        dfar_da = -inv
        dfar_db = (a - 0.5) * inv2 - inv2 / np.expm1(inv)
        dnear_da = 0.5 * (e1 - e2) * inv / p_near
        dnear_db = -0.5 * (e1 * (0.5 + a) + e2 * (0.5 - a)) * inv2 / p_near
    dlnp_da = np.where(far, dfar_da, dnear_da)
    dlnp_db = np.where(far, dfar_db, dnear_db)
    live = ~floored
    dbits_ds = np.where(live, -dlnp_da * np.sign(s) / _LN2, 0.0)
    dbits_do2 = np.where(live & in_clip, -dlnp_db * scale / _LN2, 0.0)
    return bits, (dbits_ds, dbits_do2)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Records primitive applications for reverse-mode differentiation.

    ``record=False`` turns the tape into a plain evaluator using the
    fixed-order kernels; pass a :class:`MulCounter` to tally multiplications.
    """

    def __init__(self, record: bool = True, counter: MulCounter | None = None,
                 fast: bool | None = None):
        self.record = record
        self.fast = record if fast is None else fast
        self.counter = counter
        self.nodes: list[_Node] = []
        self._scope = "other"

    @contextmanager
    def scope(self, name: str) -> Iterator[None]:
        previous, self._scope = self._scope, name
        try:
            yield
        finally:
            self._scope = previous

    def _count(self, n: int) -> None:
        if self.counter is not None:
            self.counter.add(self._scope, n)

    def _emit(self, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        out = Tensor(value)
        if self.record and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.nodes.append(_Node(out, inputs, backward))
        return out

    # -- elementwise -------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._emit(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._emit(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        out = av * bv
        self._count(out.size)
        return self._emit(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape),
                                                  _unbroadcast(g * av, bv.shape)))

    def scale(self, x: Tensor, c: float) -> Tensor:
        """Multiply by a power-of-two constant (an exponent shift, not counted)."""
        if not _is_power_of_two(c):
            raise ConfigurationError(f"scale expects a power of two, got {c}")
        c = x.value.dtype.type(c)
        return self._emit(x.value * c, (x,), lambda g: (g * c,))

    def add_scalar(self, x: Tensor, c: float) -> Tensor:
        return self._emit(x.value + x.value.dtype.type(c), (x,), lambda g: (g,))

    def relu(self, x: Tensor) -> Tensor:
        mask = x.value > 0
        return self._emit(np.where(mask, x.value, 0).astype(x.value.dtype), (x,),
                          lambda g: (g * mask,))

    def clamp(self, x: Tensor, lo: float, hi: float) -> Tensor:
        v = x.value
        mask = (v >= lo) & (v <= hi)
        return self._emit(np.clip(v, lo, hi), (x,), lambda g: (g * mask,))

    def round_ste(self, x: Tensor) -> Tensor:
        return self._emit(np.rint(x.value), (x,), lambda g: (g,))

    def combine(self, xs: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
        """sum_i c_i * x_i for loss assembly (outside the decoder, never counted)."""
        value = sum(float(c) * x.value for c, x in zip(coeffs, xs))
        dtype = xs[0].value.dtype
        return self._emit(np.asarray(value, dtype=dtype), xs,
                          lambda g: tuple((g * c).astype(dtype) for c in coeffs))

    # -- reductions --------------------------------------------------------

    def sum(self, x: Tensor) -> Tensor:
        shape, dtype = x.shape, x.value.dtype
        return self._emit(np.asarray(x.value.sum(dtype=np.float64), dtype=dtype), (x,),
                          lambda g: (np.full(shape, g, dtype=dtype),))

    def mse(self, a: Tensor, b: Tensor) -> Tensor:
        diff = a.value - b.value
        n = diff.size
        out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=a.value.dtype)
        return self._emit(out, (a, b), lambda g: (g * 2.0 / n * diff, -g * 2.0 / n * diff))

    # -- shape plumbing ----------------------------------------------------

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = x.shape
        return self._emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def take(self, x: Tensor, start: int, stop: int) -> Tensor:
        """Slice ``x[start:stop]`` along the first axis."""
        shape = x.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[start:stop] = g
            return (full,)

        return self._emit(x.value[start:stop], (x,), back)

    def stack(self, xs: Sequence[Tensor]) -> Tensor:
        return self._emit(np.stack([x.value for x in xs]), xs, lambda g: tuple(g))

    def concat(self, xs: Sequence[Tensor], axis: int = 0) -> Tensor:
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self._emit(np.concatenate([x.value for x in xs], axis=axis), xs,
                          lambda g: tuple(np.split(g, sizes, axis=axis)))

    def crop(self, x: Tensor, h: int, w: int) -> Tensor:
        shape = x.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[..., :h, :w] = g
            return (full,)

        return self._emit(x.value[..., :h, :w], (x,), back)

    def avg_pool2(self, x: Tensor) -> Tensor:
        """2x2 mean pooling on the last two axes (normalization is a /4 shift)."""
        v = x.value
        out = (v[..., 0::2, 0::2] + v[..., 1::2, 0::2] + v[..., 0::2, 1::2]
               + v[..., 1::2, 1::2]) * v.dtype.type(0.25)

        def back(g):
            full = np.empty(v.shape, dtype=g.dtype)
            q = g * g.dtype.type(0.25)
            for dy in (0, 1):
                for dx in (0, 1):
                    full[..., dy::2, dx::2] = q
            return (full,)

        return self._emit(out, (x,), back)

    # -- model primitives -------------------------------------------------

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """Affine map applied to every column of ``x`` (I, N) -> (O, N)."""
        xv, wv, bv = x.value, weight.value, bias.value
        if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
            raise ConfigurationError("linear expects x (I, N), weight (O, I), bias (O,)")
        o, i = wv.shape
        if xv.shape[0] != i or bv.shape[0] != o:
            raise ConfigurationError(
                f"linear dimension mismatch: x {xv.shape}, weight {wv.shape}, bias {bv.shape}")
        if self.fast:
            out = wv @ xv + bv[:, None]
        else:
            out = linear_fixed(xv, wv, bv)
        self._count(o * i * xv.shape[1])

        def back(g):
            return wv.T @ g, g @ xv.T, g.sum(axis=1)

        return self._emit(out, (x, weight, bias), back)

    def tconv_up2(self, x: Tensor, kernel: Tensor) -> Tensor:
        """Stride-2 transposed conv with an 8x8 kernel, cropped to (2h, 2w); channels share the kernel."""
        xv, kv = x.value, kernel.value
        if kv.shape != (8, 8):
            raise ConfigurationError(f"upsampling kernel must be 8x8, got {kv.shape}")
        if xv.ndim not in (2, 3):
            raise ConfigurationError("tconv_up2 expects a plane (h, w) or a stack (c, h, w)")
        out = tconv_up2_fast(xv, kv) if self.fast else tconv_up2_fixed(xv, kv)
        self._count(16 * out.size)
        return self._emit(out, (x, kernel), lambda g: _tconv_up2_grads(xv, kv, g))

    def bilinear_warp(self, ref: Tensor, flow: Tensor) -> Tensor:
        rv, fv = ref.value, flow.value
        if rv.ndim != 3 or fv.shape != (2,) + rv.shape[1:]:
            raise ConfigurationError(f"warp shape mismatch: ref {rv.shape}, flow {fv.shape}")
        c, h, w = rv.shape
        x0, x1, y0, y1, fx, fy, x_in, y_in = _warp_setup((h, w), fv)
        a, b = rv[:, y0, x0], rv[:, y0, x1]
        cc, d = rv[:, y1, x0], rv[:, y1, x1]
        top = a + fx * (b - a)
        bot = cc + fx * (d - cc)
        out = top + fy * (bot - top)
        self._count(3 * out.size)

        def back(g):
            gx = (g * ((b - a) + fy * ((d - cc) - (b - a)))).sum(axis=0) * x_in
            gy = (g * (bot - top)).sum(axis=0) * y_in
            gflow = np.stack([gx, gy]).astype(fv.dtype)
            gref = np.zeros((c, h * w), dtype=rv.dtype)
            weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
            for (yy, xx), wgt in zip(((y0, x0), (y0, x1), (y1, x0), (y1, x1)), weights):
                idx = (yy * w + xx).ravel()
                for ch in range(c):
                    gref[ch] += np.bincount(idx, weights=(g[ch] * wgt).ravel(),
                                            minlength=h * w).astype(rv.dtype)
            return gref.reshape(c, h, w), gflow

        return self._emit(out, (ref, flow), back)

    def gather_context(self, plane: Tensor, offsets: Sequence[tuple[int, int]]) -> Tensor:
        """Causal neighbours of every element: (h, w) -> (len(offsets), h*w).

        Positions outside the plane read as zero.
        """
        v = plane.value
        h, w = v.shape
        top = max(-dr for dr, _ in offsets)
        left = max(max(-dc for _, dc in offsets), 0)
        right = max(max(dc for _, dc in offsets), 0)
        padded = np.zeros((h + top, w + left + right), dtype=v.dtype)
        padded[top:, left : left + w] = v
        rows = [padded[top + dr : top + dr + h, left + dc : left + dc + w].ravel()
                for dr, dc in offsets]

        def back(g):
            gp = np.zeros_like(padded)
            for k, (dr, dc) in enumerate(offsets):
                gp[top + dr : top + dr + h, left + dc : left + dc + w] += g[k].reshape(h, w)
            return (gp[top:, left : left + w],)

        return self._emit(np.stack(rows), (plane,), back)

    def laplace_bits(self, y: Tensor, mu: Tensor, log_scale: Tensor) -> Tensor:
        """Per-element rate in bits under Laplace(mu, exp(clamp(log_scale)))."""
        dtype = y.value.dtype
        bits, grads = _laplace_bits(y.value.astype(np.float64), mu.value.astype(np.float64),
                                    log_scale.value.astype(np.float64),
                                    need_grad=self.record)
        if grads is None:
            return self._emit(bits.astype(dtype), (y, mu, log_scale), None)
        ds, do2 = grads

        def back(g):
            gs = (g * ds).astype(dtype)
            return gs, -gs, (g * do2).astype(dtype)

        return self._emit(bits.astype(dtype), (y, mu, log_scale), back)


def backward(tape: Tape, loss: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from ``loss``; fills ``.grad`` on every leaf reached.

    Returns a mapping from leaf tensor to its gradient.
    """
    if not tape.record:
        raise UsageError("backward on a non-recording tape")
    if not tape.nodes or not loss.requires_grad:
        raise UsageError("backward called before a differentiable forward pass was recorded")
    if seed is None:
        seed = np.ones_like(loss.value)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.value.dtype)}
    produced = {id(node.out) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            grads[key] = grads[key] + gi if key in grads else gi
    result = {}
    for key, t in leaves.items():
        t.grad = grads[key]
        result[t] = t.grad
    return result


# Convenience wrappers mirroring the primitive list, on plain arrays.

def linear(x, weight, bias) -> np.ndarray:
    return Tape(record=False).linear(const(x), const(weight), const(bias)).value


def relu(x) -> np.ndarray:
    return Tape(record=False).relu(const(x)).value


def tconv_up2(x, kernel) -> np.ndarray:
    return Tape(record=False).tconv_up2(const(x), const(kernel)).value


def bilinear_warp(ref, flow) -> np.ndarray:
    return Tape(record=False).bilinear_warp(const(ref), const(flow)).value
