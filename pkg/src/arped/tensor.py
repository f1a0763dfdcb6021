"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the layer set the detector needs is provided: convolution (strided and
fractionally strided), batch normalization, ReLU, max-pooling, bilinear
resizing, affine maps, element-wise addition, channel concatenation and the
two training losses (softmax cross-entropy and smooth-L1).

Operations are recorded on the active :class:`Tape`.  Outside a tape context
nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_local = threading.local()


class Tensor:
    """An n-d float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside are appended in
    execution order and :meth:`backward` walks them once in reverse.
    Each thread has its own active tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        # intermediate grads are dropped so repeated backward calls start clean
        for node in self.nodes:
            node.out.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE, copy=True)
                else:
                    t.grad += gi


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    tape = tape or active_tape()
    if tape is None:
        raise ValueError("no tape recorded this loss; run the forward pass inside `with Tape()`")
    tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    need = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=need)
    tape = active_tape()
    if need and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution kernels (plain numpy, shared by conv2d and tconv2d)
# ---------------------------------------------------------------------------

def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _cols(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """im2col as a contiguous (C*kh*kw, B*Ho*Wo) matrix plus output extents."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    d = dcols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((c, b, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j]
    out = out[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _channel_major(y: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C, B*H*W)."""
    b, c, h, w = y.shape
    return y.transpose(1, 0, 2, 3).reshape(c, b * h * w)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    o, c, kh, kw = w.shape
    cols, ho, wo = _cols(x, kh, kw, stride, padding)
    y = (w.reshape(o, -1) @ cols).reshape(o, x.shape[0], ho, wo)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3)), cols


def conv_input_grad(gy: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``conv_forward`` with respect to its input."""
    o, c, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    dcols = w.reshape(o, -1).T @ _channel_major(gy)
    return _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo)


def conv_weight_grad(gy: np.ndarray, cols: np.ndarray, w_shape) -> np.ndarray:
    return (_channel_major(gy) @ cols.T).reshape(w_shape)


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input, OIHW kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-d input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] < 1 or w.shape[3] < 1:
        raise ValueError(f"conv2d expects an OIHW kernel, got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {w.shape[1]} (kernel shape {w.shape})")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError("conv2d padding must be non-negative")
    y, cols = conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    x_shape, w_shape = x.shape, w.shape

    def back(g):
        gx = conv_input_grad(g, w.data, x_shape, stride, padding) if x.requires_grad else None
        gw = conv_weight_grad(g, cols, w_shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, back)


def tconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1,
            out_size: tuple[int, int] | None = None) -> Tensor:
    """Fractionally strided (transposed) convolution with up-factor 2.

    The kernel is laid out (in_channels, out_channels, kh, kw).  The forward
    map is the input-adjoint of a stride-2 ``conv2d`` with the same kernel.
    """
    if x.ndim != 4:
        raise ValueError(f"tconv2d expects a 4-d input, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"tconv2d channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {w.shape[0]} (kernel shape {w.shape})")
    bsz, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    oh = (h - 1) * 2 - 2 * padding + kh
    ow = (wd - 1) * 2 - 2 * padding + kw
    if (oh, ow) != (2 * h, 2 * wd) or (out_size is not None and tuple(out_size) != (oh, ow)):
        want = out_size if out_size is not None else (2 * h, 2 * wd)
        raise ValueError(
            f"tconv2d output extent {oh}x{ow} is not exactly double the input "
            f"{h}x{wd} (requested {want[0]}x{want[1]}); use kernel 4 with padding 1")
    out_shape = (bsz, w.shape[1], oh, ow)
    y = conv_input_grad(x.data, w.data, out_shape, 2, padding)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx, _ = conv_forward(g, w.data, 2, padding)
        if w.requires_grad:
            cols, _, _ = _cols(g, kh, kw, 2, padding)
            gw = conv_weight_grad(x.data, cols, w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, back)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batchnorm channel mismatch: input has {c} channels, scale/shift have "
            f"{gamma.data.shape}/{beta.data.shape}")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                m = x.data.size // c
                gx = (inv.reshape(1, c, 1, 1) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
            else:
                gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, gg, gb

    return _make(y, (x, gamma, beta), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return _make(x.data * k, (x,), lambda g: (g * k,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return Tensor(np.array(0.0))
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ValueError(
                f"concat needs shapes equal except along axis {axis}, got "
                f"{[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(y, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even extents, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((b, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(b, c, h, w),)

    return _make(y, (x,), back)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    mh = bilinear_matrix(x.shape[2], out_h)
    mw = bilinear_matrix(x.shape[3], out_w)
    y = np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True)
    return _make(y, (x,), lambda g: (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x of shape (N, D_in) and w (D_out, D_in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def back(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, back)


def log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    return np.exp(log_softmax(z, axis))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None,
                          axis: int = 1, ignore: int = -1) -> Tensor:
    """Mean over non-ignored elements of the weighted negative log-likelihood.

    ``labels`` has the shape of ``logits`` with ``axis`` removed.  An all-ignored
    label map gives a zero loss and zero gradient.
    """
    axis = axis % logits.ndim
    expect = logits.shape[:axis] + logits.shape[axis + 1:]
    labels = np.asarray(labels)
    if labels.shape != expect:
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape} "
                         f"(class axis {axis})")
    w = np.ones(expect, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    valid = labels != ignore
    n = int(valid.sum())
    if n == 0:
        return _make(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    ls = log_softmax(logits.data, axis)
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(ls, np.expand_dims(safe, axis), axis=axis).squeeze(axis)
    coef = np.where(valid, w, 0.0) / n
    loss = -(coef * picked).sum()

    def back(g):
        p = np.exp(ls)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(safe, axis), 1.0, axis=axis)
        return (g * np.expand_dims(coef, axis) * (p - onehot),)

    return _make(np.array(loss), (logits,), back)


def smooth_l1_values(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1(pred: Tensor, target: np.ndarray, weights: np.ndarray, normalizer: float) -> Tensor:
    """``sum(weights * smoothL1(pred - target)) / normalizer``; zero when normalizer is 0."""
    if pred.shape != np.shape(target) or pred.shape != np.shape(weights):
        raise ValueError(f"smooth_l1 shape mismatch: pred {pred.shape}, target {np.shape(target)}")
    if normalizer <= 0:
        return _make(np.array(0.0), (pred,), lambda g: (np.zeros(pred.shape),))
    d = pred.data - target
    loss = (weights * smooth_l1_values(d)).sum() / normalizer
    grad = weights * np.clip(d, -1.0, 1.0) / normalizer
    return _make(np.array(loss), (pred,), lambda g: (g * grad,))
