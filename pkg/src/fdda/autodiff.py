"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Values are stored in numpy arrays (float32 by default; build tensors as
float64 for gradient verification). Operations executed while gradients are
enabled are recorded on a process-global tape; ``backward`` replays the tape
in reverse exactly once and then clears it, so a tape covers a single
forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_tape: list["_Node"] = []
_grad_enabled: bool = True


class _Node:
    """One recorded operation: output, inputs, and the adjoint rule."""

    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tensor:
    """Dense n-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted without changing dtype
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / constant math)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def tape_size() -> int:
    return len(_tape)


def clear_tape() -> None:
    _tape.clear()


def record_op(data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Create the output tensor of an op and record it on the tape.

    ``bwd(grad_out)`` must return one gradient array (or None) per input, in
    order. It is called at most once. Ops should only compute a gradient for
    inputs whose ``requires_grad`` flag is set.
    """
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        _tape.append(_Node(out, tuple(inputs), bwd))
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss.

    The tape is consumed: it is cleared afterwards whether or not the walk
    succeeds, so each forward pass needs its own backward.
    """
    try:
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(_tape):
            g_out = node.out.grad
            if g_out is None:
                continue
            grads = node.bwd(g_out)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g.astype(t.dtype, copy=True)
                else:
                    t.grad += g.astype(t.dtype, copy=False)
    finally:
        _tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return record_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return record_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return record_op(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None,
        )

    return record_op(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out_data),)

    return record_op(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * (a.data > 0),)

    return record_op(np.maximum(a.data, 0), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return record_op(out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return record_op(a.data.reshape(shape), (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return record_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(g):
        if axis is None:
            gk = g
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / count, a.shape).copy(),)

    return record_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along axis 0 (embedding lookup / class subset)."""
    idx = np.asarray(indices)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record_op(a.data[idx], (a,), bwd)


# ---------------------------------------------------------------------------
# linear-algebra / layer ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D (or batched-left) matrix product."""

    def bwd(g):
        return (
            g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None,
            np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None,
        )

    return record_op(a.data @ b.data, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w.T + b with w of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"dense bias shape {b.shape} != ({w.shape[0]},)")

    def bwd(g):
        return (
            g @ w.data if x.requires_grad else None,
            g.T @ x.data if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return record_op(x.data @ w.data.T + b.data, (x, w, b), bwd)


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride != 0:
        raise ValueError(
            f"non-integral conv output extent: (size={size}, k={k}, "
            f"stride={stride}, pad={pad})"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: (N, C, Hp, Wp) -> (C*kh*kw, N*Ho*Wo), a single-GEMM layout
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _col2im(dcols, xshape, kh, kw, stride, pad, ho, wo):
    # dcols: (C*kh*kw, N*Ho*Wo)
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                d6[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Cross-correlation on raw arrays; returns (out (N,O,Ho,Wo), cols)."""
    n, c = x.shape[:2]
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out_mat = w.reshape(o, c * kh * kw) @ cols  # (O, N*Ho*Wo)
    out = out_mat.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (N,C,H,W) with w (O,C,kh,kw)."""
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(wd, kw, stride, pad)
    out, cols = _conv_raw(x.data, w.data, stride, pad)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = gw = gb = None
        g_mat = None
        if w.requires_grad or not (stride == 1 and kh == kw and kh - 1 - pad >= 0):
            g_mat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        if x.requires_grad:
            if stride == 1 and kh == kw and kh - 1 - pad >= 0:
                # gradient w.r.t. the input is itself a cross-correlation
                # with the channel-swapped, spatially flipped kernel
                w_t = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                gx, _ = _conv_raw(g, w_t, 1, kh - 1 - pad)
            else:
                dcols = w.data.reshape(o, -1).T @ g_mat
                gx = _col2im(dcols, x.shape, kh, kw, stride, pad, ho, wo)
        if w.requires_grad:
            gw = (g_mat @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return record_op(out, inputs, bwd)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; extents must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: extents ({h},{w}) not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return record_op(out, (x,), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return record_op(out, (x,), bwd)


def sq_dist(a: Tensor, target: np.ndarray) -> Tensor:
    """Sum of squared differences against a constant target array."""
    diff = a.data - target

    def bwd(g):
        return (g * 2.0 * diff,)

    return record_op(np.asarray((diff * diff).sum(), dtype=a.dtype), (a,), bwd)


def scale_shift(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """y = x * scale + shift with constant (non-tensor) coefficients."""

    def bwd(g):
        return (g * scale,)

    return record_op(x.data * scale + shift, (x,), bwd)


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                   running_mean: np.ndarray, inv_std: np.ndarray) -> Tensor:
    """Eval-mode batch normalization against constant running statistics.

    y = (x - mean) * inv_std * gamma + beta; gradients flow to x and to the
    affine parameters (the running statistics are constants).
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    cshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    rm = running_mean.reshape(cshape)
    ri = inv_std.reshape(cshape)
    xhat = (x.data - rm) * ri
    y = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)

    def bwd(g):
        return (
            g * (gamma.data.reshape(cshape) * ri) if x.requires_grad else None,
            (g * xhat).sum(axis=axes) if gamma.requires_grad else None,
            g.sum(axis=axes) if beta.requires_grad else None,
        )

    return record_op(y, (x, gamma, beta), bwd)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Fused train-mode batch normalization.

    Normalizes per channel over the batch (and spatial) axes with biased
    variance. Returns (y, batch_mean, batch_var); the statistics are plain
    arrays, so use the composed path when a loss must differentiate through
    them.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    cshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)

    bm = x.data.mean(axis=axes)
    xc = x.data - bm.reshape(cshape)
    bv = np.mean(xc * xc, axis=axes)
    inv = 1.0 / np.sqrt(bv + eps)
    xhat = xc * inv.reshape(cshape)
    gm = gamma.data.reshape(cshape)
    y = xhat * gm + beta.data.reshape(cshape)

    def bwd(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * gm
            m1 = dxhat.mean(axis=axes).reshape(cshape)
            m2 = (dxhat * xhat).mean(axis=axes).reshape(cshape)
            gx = inv.reshape(cshape) * (dxhat - m1 - xhat * m2)
        return (gx, gg, gb)

    return record_op(y, (x, gamma, beta), bwd), bm, bv


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    batch, k = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(batch), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(batch), labels] -= 1.0
        return (g * p / batch,)

    return record_op(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def kl_divergence(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean KL(softmax(teacher) || softmax(student)); teacher has no gradient."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shape mismatch: {student_logits.shape} vs {teacher_logits.shape}"
        )
    batch = student_logits.shape[0]
    logq = _log_softmax(student_logits.data)
    logp = _log_softmax(teacher_logits.data)
    p = np.exp(logp)
    loss = (p * (logp - logq)).sum(axis=1).mean()

    def bwd(g):
        # teacher side is constant by contract
        return (g * (np.exp(logq) - p) / batch, None)

    return record_op(np.asarray(loss, dtype=student_logits.dtype), (student_logits, teacher_logits), bwd)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3) -> float:
    """Max relative error between taped gradients and central finite differences.

    ``f`` must be a deterministic scalar-valued closure over ``params`` and
    differentiable at the current parameter values (kinks such as relu(0) are
    outside the contract). Run with float64 parameters: finite differences in
    float32 are dominated by roundoff.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    ad = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    with no_grad():
        for p, g in zip(params, ad):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                rel = abs(float(gflat[i]) - fd) / max(abs(fd), 1e-6)
                max_rel = max(max_rel, rel)
    return max_rel
