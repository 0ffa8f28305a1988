"""Minimal reverse-mode differentiation over the operator set the network uses.

Operations executed inside an active :class:`Graph` are appended to it in
execution order; :func:`backward` walks that record in reverse.  Outside a
graph the same functions run as plain inference with no bookkeeping.

All feature maps are ``(batch, channels, height, width)`` arrays.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, PlannerError, UsageError

log = logging.getLogger(__name__)

_state = threading.local()
_seq = itertools.count()


class Tensor:
    """Dense array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Trainable leaf tensor with an optional elementwise box constraint."""

    __slots__ = ("name", "trainable", "constraint")

    def __init__(self, data, name: str, trainable: bool = True,
                 constraint: tuple[float, float] | None = None):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.constraint = constraint

    def project(self) -> None:
        if self.constraint is not None:
            lo, hi = self.constraint
            np.clip(self.data, lo, hi, out=self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: Callable
    seq: int                 # execution order; backward runs in decreasing seq


class Graph:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside the block are recorded.
    Piecewise-linear operators also record their branch pattern (relu masks,
    pool argmax, clamp masks) so finite-difference checks can tell when a
    perturbation crossed a kink.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._patterns = hashlib.sha256()

    def __enter__(self) -> "Graph":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record_pattern(self, arr: np.ndarray) -> None:
        self._patterns.update(np.ascontiguousarray(arr).tobytes())

    def pattern_digest(self) -> str:
        return self._patterns.copy().hexdigest()


def active_graph() -> Graph | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable) -> Tensor:
    graph = active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(op, tuple(inputs), backward, next(_seq))
        graph.nodes.append(out.node)
    return out


def _pattern(arr: np.ndarray) -> None:
    graph = active_graph()
    if graph is not None:
        graph.record_pattern(arr)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ConfigError(f"{what}: expected (batch, channels, height, width), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution

def conv_padded(xpad: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                groups: int, out_h: int) -> np.ndarray:
    """Convolve an already zero-padded block; shared by both execution paths."""
    kw = w.shape[3]
    out = np.empty((xpad.shape[0], w.shape[0], out_h, xpad.shape[3] - kw + 1),
                   dtype=xpad.dtype)
    _kernels.conv_accumulate(xpad, w, groups, out)
    if b is not None:
        out += b[None, :, None, None]
    return out


def pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_grouped(x: Tensor, kernel: Tensor, bias: Tensor | None, groups: int,
                   kh: int, kw: int) -> Tensor:
    """Grouped 2-D convolution, stride 1, zero padding preserving H and W.

    Covers pointwise (1x1), horizontal (1xK), depthwise (groups == channels)
    and full grouped kernels.  The kernel has shape
    ``(out_channels, in_channels // groups, kh, kw)``.
    """
    _check4(x, "conv2d_grouped")
    cin = x.shape[1]
    w = kernel.data
    cout = w.shape[0]
    if groups < 1 or cin % groups:
        raise ConfigError(f"conv2d_grouped: in_channels={cin} not divisible by groups={groups}")
    if cout % groups:
        raise ConfigError(f"conv2d_grouped: out_channels={cout} not divisible by groups={groups}")
    if w.shape != (cout, cin // groups, kh, kw):
        raise ConfigError(
            f"conv2d_grouped: kernel shape {w.shape} != (out_channels, in_channels/groups, kh, kw)"
            f" = ({cout}, {cin // groups}, {kh}, {kw})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d_grouped: kh={kh}, kw={kw} must be odd")
    if bias is not None and bias.shape != (cout,):
        raise ConfigError(f"conv2d_grouped: bias shape {bias.shape} != (out_channels,) = ({cout},)")

    dtype = x.data.dtype
    w = w.astype(dtype, copy=False)
    b = None if bias is None else bias.data.astype(dtype, copy=False)
    ph, pw = kh // 2, kw // 2
    xpad = pad_hw(x.data, ph, pw)
    out = conv_padded(xpad, w, b, groups, x.shape[2])

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if kh == 1 and kw == 1 and groups == 1:
            # dense 1x1: both adjoints are plain matrix products
            nb, co = g.shape[:2]
            g2 = g.reshape(nb, co, -1)
            x2 = x.data.reshape(nb, cin, -1)
            if x.requires_grad:
                gx = np.matmul(w[:, :, 0, 0].T, g2).reshape(x.shape)
            if kernel.requires_grad:
                gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        if x.requires_grad:
            gxpad = np.zeros_like(xpad)
            _kernels.conv_grad_input(g, w, groups, gxpad)
            gx = gxpad[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        if kernel.requires_grad:
            gw = np.zeros_like(w)
            _kernels.conv_grad_weight(g, xpad, groups, gw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, kernel, bias if bias is not None else Tensor(np.zeros(0)))
    return _result("conv2d_grouped", out, inputs, backward)


# ---------------------------------------------------------------------------
# vertical IIR

def iir_row(state: np.ndarray, xt: np.ndarray, w1, w2, w3):
    """One step of the column recurrence.

    ``state`` carries ``h[t-1]*w1 + x[t-1]*w2`` so only one row is stored
    between steps.  Returns ``(h[t], next_state)``.
    """
    ht = state + xt * w3
    return ht, ht * w1 + xt * w2


def _iir_coeffs(w: Tensor, dtype) -> np.ndarray:
    return w.data.astype(dtype, copy=False)[:, None]


def iir_vertical(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """First-order recursive filter down each column, per channel.

    h[t] = h[t-1]*w1 + x[t-1]*w2 + x[t]*w3 with h[-1] = x[-1] = 0 at the top
    of every frame.  Weights are one scalar per channel.
    """
    _check4(x, "iir_vertical")
    nb, c, h, wd = x.shape
    for name, p in (("w1", w1), ("w2", w2), ("w3", w3)):
        if p.shape != (c,):
            raise ConfigError(f"iir_vertical: {name} shape {p.shape} != (channels,) = ({c},)")
    if np.any(np.abs(w1.data) >= 1.0):
        log.warning("iir_vertical: |w1| >= 1 in %d channel(s); recurrence is unstable",
                    int(np.sum(np.abs(w1.data) >= 1.0)))
    dtype = x.data.dtype
    c1, c2, c3 = (_iir_coeffs(p, dtype) for p in (w1, w2, w3))
    xd = x.data
    out = np.empty_like(xd)
    state = np.zeros((nb, c, wd), dtype=dtype)
    for t in range(h):
        out[:, :, t, :], state = iir_row(state, xd[:, :, t, :], c1, c2, c3)

    def backward(g):
        a1, a2, a3 = c1[None], c2[None], c3[None]
        gh = np.zeros((nb, c, wd), dtype=g.dtype)   # total grad wrt h[t+1]
        gx = np.empty_like(xd)
        gw1 = np.zeros(c, dtype=np.float64)
        gw2 = np.zeros(c, dtype=np.float64)
        gw3 = np.zeros(c, dtype=np.float64)
        for t in range(h - 1, -1, -1):
            g_next = gh
            gh = g[:, :, t, :] + a1 * g_next
            gx[:, :, t, :] = a3 * gh + a2 * g_next
            gw3 += np.einsum("bcw,bcw->c", gh, xd[:, :, t, :])
            if t > 0:
                gw1 += np.einsum("bcw,bcw->c", gh, out[:, :, t - 1, :])
                gw2 += np.einsum("bcw,bcw->c", gh, xd[:, :, t - 1, :])
        return gx, gw1.astype(dtype), gw2.astype(dtype), gw3.astype(dtype)

    return _result("iir_vertical", out, (x, w1, w2, w3), backward)


# ---------------------------------------------------------------------------
# resampling

def maxpool4(x: Tensor) -> Tensor:
    """4x4 max pooling with stride 4."""
    _check4(x, "maxpool4")
    nb, c, h, w = x.shape
    if h % 4 or w % 4:
        raise PlannerError(f"maxpool4: spatial dims {h}x{w} not divisible by 4")
    blocks = (x.data.reshape(nb, c, h // 4, 4, w // 4, 4)
              .transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h // 4, w // 4, 16))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    _pattern(arg.astype(np.int8))

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(nb, c, h // 4, w // 4, 4, 4)
              .transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h, w))
        return (gx,)

    return _result("maxpool4", out, (x,), backward)


def upsample_nearest4(x: Tensor) -> Tensor:
    """Replicate every pixel into a 4x4 block."""
    _check4(x, "upsample_nearest4")
    nb, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 4, axis=2), 4, axis=3)

    def backward(g):
        return (g.reshape(nb, c, h, 4, w, 4).sum(axis=(3, 5)),)

    return _result("upsample_nearest4", out, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _pattern(mask)
    out = np.maximum(x.data, np.zeros((), dtype=x.data.dtype))   # propagates NaN
    return _result("relu", out, (x,), lambda g: (g * mask,))


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"residual_add: shape mismatch {a.shape} vs {b.shape}")
    return _result("residual_add", a.data + b.data, (a, b), lambda g: (g, g))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def elementwise_merge(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if b is None:
        raise ConfigError(f"elementwise_merge: {kind} needs two operands")
    if kind == "residual_add":
        return residual_add(a, b)
    if kind == "concat_channels":
        return concat_channels(a, b)
    raise ConfigError(f"elementwise_merge: unknown kind {kind!r}")


def clamp01(x: Tensor) -> Tensor:
    inside = (x.data > 0) & (x.data < 1)
    _pattern(inside)
    out = np.clip(x.data, 0, 1)
    return _result("clamp01", out, (x,), lambda g: (g * inside,))


def clamp_ste(x: Tensor, transform: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Clamp to [0, 1], then apply a non-differentiable ``transform``.

    The gradient is that of the clamp alone (straight-through for the
    transform).  Used for quantized skip storage.
    """
    inside = (x.data > 0) & (x.data < 1)
    _pattern(inside)
    out = transform(np.clip(x.data, 0, 1)).astype(x.data.dtype, copy=False)
    return _result("clamp_ste", out, (x,), lambda g: (g * inside,))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]
    full = x.shape

    def backward(g):
        gx = np.zeros(full, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _result("channel_slice", out, (x,), backward)


# ---------------------------------------------------------------------------
# scalar reductions

def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.shape:
        raise ConfigError(f"weighted_sum: weights {weights.shape} vs tensor {x.shape}")
    out = np.asarray(np.sum(x.data * weights, dtype=np.float64), dtype=x.data.dtype)
    return _result("weighted_sum", out, (x,), lambda g: (g * weights,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return _result("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_abs_error(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ConfigError(f"mean_abs_error: target {target.shape} vs prediction {pred.shape}")
    diff = pred.data - target
    n = diff.size
    out = np.asarray(np.abs(diff).sum(dtype=np.float64) / n, dtype=pred.data.dtype)
    return _result("mean_abs_error", out, (pred,), lambda g: (g * np.sign(diff) / n,))


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(leaf) for every leaf that requires a gradient.

    Leaf gradients accumulate into ``.grad`` across calls.  Returns the
    gradients of named parameters touched by this call.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        return {}
    # nodes reachable from the loss, latest first; nodes never point back at
    # their outputs or graph, so the record is freed as soon as the loss is
    reach: dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node.seq in reach:
            continue
        reach[node.seq] = node
        stack.extend(t.node for t in node.inputs if t.node is not None)
    grads: dict[int, np.ndarray] = {loss.node.seq: np.ones_like(loss.data)}
    touched: dict[str, np.ndarray] = {}
    for seq in sorted(reach, reverse=True):
        node = reach[seq]
        g = grads.pop(seq, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                if t.grad is None:
                    t.grad = gi.copy()
                else:
                    t.grad += gi
                if isinstance(t, Parameter):
                    touched[t.name] = t.grad
            else:
                key = t.node.seq
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    return touched



# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckResult:
    checked: int
    skipped_kinks: int
    max_rel_error: float
    worst: tuple[str, tuple, float, float] | None   # (tensor, index, analytic, numeric)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing by noise."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], *, eps: float = 1e-4,
                   samples: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-6) -> GradCheckResult:
    """Compare :func:`backward` against central differences.

    ``fn`` rebuilds a scalar loss from the current values of ``tensors``
    (float64 leaves with ``requires_grad``).  ``samples`` limits how many
    elements per tensor are probed (chosen with ``rng``); ``None`` probes all.
    Probes whose +/- perturbation flips any recorded branch pattern (relu
    mask, pool argmax, clamp mask) are skipped: the function is not
    differentiable across them.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise UsageError("gradient_check needs float64 tensors")
        t.grad = None
    with Graph() as g:
        loss = fn()
    base = g.pattern_digest()
    backward(loss)
    rng = rng or np.random.default_rng(0)

    def probe() -> tuple[float, str]:
        with Graph() as gp:
            v = float(fn().data)
        return v, gp.pattern_digest()

    checked = skipped = 0
    worst, worst_err = None, -1.0
    for k, t in enumerate(tensors):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = np.sort(rng.choice(flat.size, samples, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, dp = probe()
            flat[i] = orig - eps
            fm, dm = probe()
            flat[i] = orig
            if dp != base or dm != base:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = relative_error(a, numeric, floor)
            checked += 1
            if err > worst_err:
                name = getattr(t, "name", f"tensor{k}")
                worst, worst_err = (name, np.unravel_index(i, t.shape), a, numeric), err
    return GradCheckResult(checked, skipped, max(worst_err, 0.0), worst)


def finite_diff_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                      **kw) -> float:
    """Worst relative error of :func:`gradient_check` (0 if every probe hit a kink)."""
    return gradient_check(fn, tensors, eps=eps, **kw).max_rel_error
