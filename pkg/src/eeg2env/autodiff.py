"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is deliberately small: tensors record the operations that
produced them, and a backward pass walks that record once, in reverse
topological order.  Only the operations the networks in this package
need are provided; there is no general broadcasting.  Every gradient
here is checked against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, TapeConsumedError

_LOG_2PI = math.log(2.0 * math.pi)

# Gradients of piecewise ops (relu, maxpool, clamps) use the convention
# that the subgradient at a kink is 0; finite-difference checks must
# probe away from kinks.


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Tensors created directly (leaves) may be reused across any number of
    forward passes.  Tensors created by operations belong to the tape of
    the pass that produced them and support exactly one backward sweep.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Sugar for the handful of binary forms the losses use.  All
    # tensor-tensor arithmetic is same-shape; scalars are python floats.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, attaching the backward closure only if needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every reachable tensor.

    loss must be scalar.  The op record reachable from it is consumed:
    a second backward through any part of it raises TapeConsumedError.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return  # constant loss: every gradient is zero, nothing to record

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))

    for node in order:
        if node._backward is not None and node._consumed:
            raise TapeConsumedError(
                "this computation record was already backpropagated; rebuild the forward pass"
            )

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        node._consumed = True
        if node.grad is None:
            continue  # not reachable from the loss along recorded ops
        for parent, pgrad in zip(node._parents, node._backward(node.grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pgrad.copy() if pgrad.base is not None else pgrad
            else:
                parent.grad = parent.grad + pgrad


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (same-shape only)
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise functions
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(a: Tensor, kind: str) -> Tensor:
    """Apply one of the supported nonlinearities by name."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}")
    return fn(a)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (g * 2.0 * ad,))


def sqrt_clamped(a: Tensor) -> Tensor:
    """sqrt(max(x, 0)); gradient is 0 where x <= 0 (kink convention)."""
    ad = a.data
    y = np.sqrt(np.maximum(ad, 0.0))
    safe = np.where(ad > 0, np.maximum(y, 1e-150), 1.0)
    gmask = (ad > 0) * (0.5 / safe)
    return _make(y, (a,), lambda g: (g * gmask,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    lo = float(lo)
    mask = a.data > lo
    return _make(np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ParameterError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    mask = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shaping
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def sum_last(a: Tensor) -> Tensor:
    """Sum over the final axis: (..., T) -> (...)."""
    T = a.data.shape[-1]
    return _make(a.data.sum(-1), (a,), lambda g: (np.repeat(g[..., None], T, axis=-1),))


def mean_last(a: Tensor) -> Tensor:
    """Mean over the final axis: (..., T) -> (...)."""
    T = a.data.shape[-1]
    return _make(a.data.mean(-1), (a,), lambda g: (np.repeat(g[..., None] / T, T, axis=-1),))


def center_last(a: Tensor) -> Tensor:
    """Subtract the mean of the final axis; the centering is self-adjoint."""
    return _make(a.data - a.data.mean(-1, keepdims=True), (a,),
                 lambda g: (g - g.mean(-1, keepdims=True),))


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Join two tensors along an existing axis."""
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: ranks {a.data.ndim} and {b.data.ndim} differ")
    ax = axis if axis >= 0 else axis + a.data.ndim
    if not 0 <= ax < a.data.ndim:
        raise ParameterError(f"concat: axis {axis} out of range for rank {a.data.ndim}")
    for d in range(a.data.ndim):
        if d != ax and a.data.shape[d] != b.data.shape[d]:
            raise DimensionError(
                f"concat: shapes {a.data.shape} and {b.data.shape} differ off axis {axis}")
    na = a.data.shape[ax]

    def bwd(g):
        lead = (slice(None),) * ax
        return g[lead + (slice(0, na),)], g[lead + (slice(na, None),)]

    return _make(np.concatenate([a.data, b.data], axis=ax), (a, b), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along one axis."""
    ax = axis if axis >= 0 else axis + a.data.ndim
    if not 0 <= ax < a.data.ndim:
        raise ParameterError(f"narrow: axis {axis} out of range for rank {a.data.ndim}")
    if start < 0 or length < 0 or start + length > a.data.shape[ax]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) outside extent {a.data.shape[ax]}")
    idx = (slice(None),) * ax + (slice(start, start + length),)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), bwd)


def swap_axes(a: Tensor, ax0: int, ax1: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax0, ax1).copy(), (a,),
                 lambda g: (np.swapaxes(g, ax0, ax1),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {old} as {shape}")
    return _make(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# network operations
# ---------------------------------------------------------------------------


def _conv_out_padding(T: int, k_eff: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "valid":
        if k_eff > T:
            raise DimensionError(f"conv1d: kernel span {k_eff} exceeds input length {T}")
        return (T - k_eff) // stride + 1, 0, 0
    if padding == "same":
        t_out = -(-T // stride)  # ceil
        total = max((t_out - 1) * stride + k_eff - T, 0)
        left = total // 2
        return t_out, left, total - left  # odd totals put the extra zero on the right
    raise ParameterError(f"conv1d: padding must be 'same' or 'valid', got {padding!r}")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: str = "same", dilation: int = 1) -> Tensor:
    """Cross-correlation along time: (B, Cin, T) x (Cout, Cin, K) -> (B, Cout, T').

    T' = floor((T + pad_total - dilation*(K-1) - 1) / stride) + 1.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise DimensionError(
            f"conv1d: need (B, Cin, T) and (Cout, Cin, K), got {x.data.shape} and {kernel.data.shape}")
    if not (isinstance(stride, int) and stride >= 1):
        raise ParameterError(f"conv1d: stride must be a positive int, got {stride!r}")
    if not (isinstance(dilation, int) and dilation >= 1):
        raise ParameterError(f"conv1d: dilation must be a positive int, got {dilation!r}")
    B, c_in, T = x.data.shape
    c_out, c_in_k, K = kernel.data.shape
    if c_in != c_in_k:
        raise DimensionError(f"conv1d: input has {c_in} channels but kernel expects {c_in_k}")
    if bias is not None and bias.data.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.data.shape} != ({c_out},)")
    k_eff = dilation * (K - 1) + 1
    t_out, pad_l, pad_r = _conv_out_padding(T, k_eff, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r))) if pad_l or pad_r else x.data
    # windows: (B, Cin, T', K) view of every receptive field
    win = np.lib.stride_tricks.sliding_window_view(xp, k_eff, axis=2)[:, :, ::stride, ::dilation]
    win = win[:, :, :t_out]
    kd = kernel.data
    out = np.einsum("bitk,oik->bot", win, kd, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None]
    Tp = xp.shape[2]

    def bwd(g):
        dk = np.einsum("bitk,bot->oik", win, g, optimize=True)
        dxp = np.zeros((B, c_in, Tp))
        for k in range(K):
            lo = k * dilation
            hi = lo + (t_out - 1) * stride + 1
            dxp[:, :, lo:hi:stride] += np.einsum("bot,oi->bit", g, kd[:, :, k], optimize=True)
        dx = dxp[:, :, pad_l:pad_l + T] if (pad_l or pad_r) else dxp
        db = g.sum((0, 2)) if bias is not None else None
        return (dx, dk, db) if bias is not None else (dx, dk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, bwd)


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max over time; a trailing remainder is dropped.

    Ties within a window route the gradient to the earliest maximum.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool1d: need (B, C, T), got {x.data.shape}")
    if not (isinstance(window, int) and window >= 1):
        raise ParameterError(f"maxpool1d: window must be a positive int, got {window!r}")
    B, C, T = x.data.shape
    if T < window:
        raise DimensionError(f"maxpool1d: length {T} shorter than window {window}")
    t_out = T // window
    xv = x.data[:, :, :t_out * window].reshape(B, C, t_out, window)
    arg = xv.argmax(-1)  # first occurrence wins on ties
    out = np.take_along_axis(xv, arg[..., None], -1)[..., 0]

    def bwd(g):
        dxv = np.zeros((B, C, t_out, window))
        np.put_along_axis(dxv, arg[..., None], g[..., None], -1)
        dx = np.zeros((B, C, T))
        dx[:, :, :t_out * window] = dxv.reshape(B, C, t_out * window)
        return (dx,)

    return _make(out, (x,), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every frame `factor` times along the final axis."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample_nearest: need (B, C, T), got {x.data.shape}")
    if not (isinstance(factor, int) and factor >= 1):
        raise ParameterError(f"upsample_nearest: factor must be a positive int, got {factor!r}")
    B, C, T = x.data.shape
    return _make(np.repeat(x.data, factor, axis=2), (x,),
                 lambda g: (g.reshape(B, C, T, factor).sum(-1),))


def avgpool_last(x: Tensor, window: int) -> Tensor:
    """Mean over non-overlapping windows of the final axis; length must divide."""
    if not (isinstance(window, int) and window >= 1):
        raise ParameterError(f"avgpool_last: window must be a positive int, got {window!r}")
    T = x.data.shape[-1]
    if T % window:
        raise DimensionError(f"avgpool_last: window {window} does not divide length {T}")
    lead = x.data.shape[:-1]
    out = x.data.reshape(lead + (T // window, window)).mean(-1)
    return _make(out, (x,), lambda g: (np.repeat(g[..., None] / window, window, -1).reshape(x.data.shape),))


def dense_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the final axis: (..., F) x (G, F) + (G,) -> (..., G)."""
    if weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(
            f"dense_affine: need (G, F) weight and (G,) bias, got {weight.data.shape} and {bias.data.shape}")
    G, F = weight.data.shape
    if x.data.shape[-1] != F:
        raise DimensionError(f"dense_affine: input features {x.data.shape[-1]} != weight features {F}")
    if bias.data.shape[0] != G:
        raise DimensionError(f"dense_affine: bias size {bias.data.shape[0]} != output features {G}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bwd(g):
        gm = g.reshape(-1, G)
        xm = xd.reshape(-1, F)
        return g @ wd, gm.T @ xm, gm.sum(0)

    return _make(out, (x, weight, bias), bwd)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply (B, C, T) features by a per-(B, C) gate."""
    if x.data.ndim != 3 or gate.data.ndim != 2 or x.data.shape[:2] != gate.data.shape:
        raise DimensionError(
            f"scale_channels: need (B, C, T) and matching (B, C), got {x.data.shape} and {gate.data.shape}")
    xd, gd = x.data, gate.data
    return _make(xd * gd[:, :, None], (x, gate),
                 lambda g: (g * gd[:, :, None], (g * xd).sum(-1)))


def softmax_frames(scores: Tensor) -> Tensor:
    """Softmax over the final axis, computed with the max subtracted."""
    s = scores.data
    e = np.exp(s - s.max(-1, keepdims=True))
    y = e / e.sum(-1, keepdims=True)
    return _make(y, (scores,), lambda g: (y * (g - (g * y).sum(-1, keepdims=True)),))


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean negative log-likelihood from logits, via log-sum-exp.

    labels: int array (B,) of class indices into the final axis.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_logits: need (B, K) logits, got {logits.data.shape}")
    B, K = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy_logits: labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= K:
        raise ParameterError(f"cross_entropy_logits: labels outside [0, {K})")
    labels = labels.astype(np.intp)
    ld = logits.data
    m = ld.max(-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(-1))
    loss = np.asarray((lse - ld[np.arange(B), labels]).mean())

    def bwd(g):
        p = np.exp(ld - m)
        p /= p.sum(-1, keepdims=True)
        p[np.arange(B), labels] -= 1.0
        return (p * (float(g) / B),)

    return _make(loss, (logits,), bwd)


def pairwise_diag_gaussian_loglik(mu: Tensor, logvar: Tensor, z: Tensor) -> Tensor:
    """log N(z_j; mu_i, diag exp(logvar_i)) for every (i, j) pair.

    mu, logvar: (B, D) conditional parameters derived from row i's input.
    z: (B, D) targets.  Returns (B, B) with rows indexing the condition.
    """
    for name, t in (("mu", mu), ("logvar", logvar), ("z", z)):
        if t.data.ndim != 2:
            raise DimensionError(f"pairwise_diag_gaussian_loglik: {name} must be (B, D), got {t.data.shape}")
    if mu.data.shape != logvar.data.shape or mu.data.shape[1] != z.data.shape[1]:
        raise DimensionError(
            f"pairwise_diag_gaussian_loglik: inconsistent shapes {mu.data.shape}, "
            f"{logvar.data.shape}, {z.data.shape}")
    B, D = mu.data.shape
    diff = z.data[None, :, :] - mu.data[:, None, :]          # (Bi, Bj, D)
    inv = np.exp(-logvar.data)                               # (Bi, D)
    quad = np.einsum("ijd,id->ij", diff * diff, inv, optimize=True)
    ll = -0.5 * (quad + (logvar.data.sum(-1) + D * _LOG_2PI)[:, None])

    def bwd(g):
        wdiff = np.einsum("ij,ijd->id", g, diff, optimize=True)
        dmu = inv * wdiff
        dz = -np.einsum("ij,ijd,id->jd", g, diff, inv, optimize=True)
        dquad = np.einsum("ij,ijd->id", g, diff * diff, optimize=True)
        dlogvar = 0.5 * inv * dquad - 0.5 * g.sum(-1)[:, None]
        return dmu, dlogvar, dz

    return _make(ll, (mu, logvar, z), bwd)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, *,
                            eps: float = 1e-5, max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Worst relative error between autodiff and central differences.

    f must map x to a scalar Tensor deterministically.  When max_entries
    is given, that many coordinates are probed (sampled with rng).
    """
    if eps <= 0:
        raise ParameterError(f"finite_difference_check: eps must be positive, got {eps}")
    was_trainable = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise DimensionError(f"finite_difference_check: f returned shape {out.data.shape}")
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    base = x.data.copy()
    flat_n = base.size
    if max_entries is not None and max_entries < flat_n:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(flat_n, size=max_entries, replace=False)
    else:
        picks = np.arange(flat_n)

    x.requires_grad = False  # probe passes need no graph
    worst = 0.0
    try:
        for flat in picks:
            idx = np.unravel_index(int(flat), base.shape)
            probe = base.copy()
            probe[idx] = base[idx] + eps
            x.data = probe
            f_hi = float(f(x).data.reshape(()))
            probe[idx] = base[idx] - eps
            x.data = probe
            f_lo = float(f(x).data.reshape(()))
            fd = (f_hi - f_lo) / (2.0 * eps)
            an = float(analytic[idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    finally:
        x.data = base
        x.requires_grad = was_trainable
    return worst
