"""Dense float tensors with reverse-mode differentiation on an explicit tape.

Small by design: just enough operations to train compact CNN classifiers
and to expose input gradients to gradient-based attacks. Arrays are
float32 unless the caller passes float64 explicitly (the finite-difference
checker does, to stay above float32 noise).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

# Raise on non-finite op outputs instead of propagating NaN/Inf silently.
FINITE_CHECKS = True

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Entries are appended in execution order, which is automatically a
    topological order of the data flow. ``backward`` walks the record once,
    in reverse. Tapes are thread-local; independent tapes may run on
    separate threads concurrently.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self.entries)


class _Entry:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tensor:
    """N-dimensional float array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[_Entry] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{opname} produced non-finite values")


def make_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    name: str = "op",
) -> Tensor:
    """Wrap a forward result, recording it when grads are in play.

    ``backward`` maps the output gradient to one gradient (or None) per
    input. Recording happens only when a tape is active and some input
    requires grad; otherwise the result is a plain constant tensor.
    """
    _check_finite(out_data, name)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        entry = _Entry(tuple(inputs), out, backward)
        out.op = entry
        out.tape = tape
        tape.entries.append(entry)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Each tape entry is visited exactly once, in reverse execution order.
    Intermediate gradients live in a scratch map; only leaves (tensors not
    produced on this tape) accumulate into ``.grad``, so repeated backward
    passes over one tape do not interfere with each other.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.tape is None:
        # Leaf loss (e.g. the identity function): d loss / d loss == 1.
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ValueError("loss is not recorded on a tape")

    tape = loss.tape
    pending: dict[int, np.ndarray] = {}

    def route(t: Tensor, g: np.ndarray) -> None:
        if t.tape is tape and t.op is not None:
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
        elif t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g

    route(loss, seed)
    for entry in reversed(tape.entries):
        g = pending.pop(id(entry.out), None)
        if g is None:
            continue
        for t, ig in zip(entry.inputs, entry.backward(g)):
            if ig is not None and (t.requires_grad or (t.tape is tape and t.op is not None)):
                route(t, ig)


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data + c, (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0 by convention.
    mask = a.data > 0
    return make_op(
        np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu"
    )


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return make_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return make_op(
        out, (a,), lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),), "mean"
    )


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; gradient flows to the first argmax."""
    out = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(
            ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        return (ga,)

    return make_op(out, (a,), bwd, "reduce_max")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def pad2d(x: Tensor, padding: int, value: float = 0.0) -> Tensor:
    """Pad the two trailing (spatial) axes of NCHW input with a constant."""
    if x.ndim != 4:
        raise ValueError(f"pad2d expects NCHW input, got {x.shape}")
    if padding < 0:
        raise ValueError("pad2d padding must be >= 0")
    if padding == 0:
        return make_op(x.data.copy(), (x,), lambda g: (g,), "pad2d")
    p = padding
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)
    return make_op(out, (x,), lambda g: (g[:, :, p:-p, p:-p],), "pad2d")


def channel_scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Scale each channel of NCHW input by a per-channel factor."""
    if x.ndim != 4 or alpha.ndim != 1 or alpha.shape[0] != x.shape[1]:
        raise ValueError(f"channel_scale: x {x.shape} vs alpha {alpha.shape}")
    a = alpha.data[None, :, None, None]
    xd = x.data

    def bwd(g):
        return ((g * a).astype(xd.dtype), (g * xd).sum(axis=(0, 2, 3)))

    return make_op(xd * a, (x, alpha), bwd, "channel_scale")


# ---------------------------------------------------------------------------
# neural-network ops


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: y = x @ weight.T + bias, weight is [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear expects x [N,{weight.shape[1] if weight.ndim == 2 else '?'}], "
            f"got x {x.shape}, weight {weight.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

        def bwd(g):
            return (g @ wd, g.T @ xd, g.sum(axis=0))

        return make_op(out, (x, weight, bias), bwd, "linear")

    def bwd_nobias(g):
        return (g @ wd, g.T @ xd)

    return make_op(out, (x, weight), bwd_nobias, "linear")


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [N, C, KH, KW, OH, OW] patch tensor (copies)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _col2im(dcols: np.ndarray, xp_shape: tuple, stride: int) -> np.ndarray:
    """Scatter-add the patch-tensor gradient back onto the padded input."""
    n, c, kh, kw, oh, ow = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input against OIHW weights, no bias.

    Output spatial size is floor((H + 2*padding - KH) / stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    # [N*OH*OW, C*KH*KW] @ [C*KH*KW, Cout]
    cols_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    w_mat = weight.data.reshape(co, ci * kh * kw)
    out = (cols_mat @ w_mat.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def bwd(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        dw = (g_mat.T @ cols_mat).reshape(co, ci, kh, kw)
        dcols_mat = g_mat @ w_mat
        dcols = dcols_mat.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = _col2im(dcols, xp.shape, stride)
        if padding:
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
        else:
            dx = dxp
        return (dx, dw)

    return make_op(np.ascontiguousarray(out), (x, weight), bwd, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling over square windows; ties route gradient to the first max."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects NCHW input, got {x.shape}")
    if stride is None:
        stride = kernel
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kernel, stride, 0)
    ow = _conv_out_size(w, kernel, stride, 0)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"max_pool2d window {kernel} too large for input {h}x{w}")
    cols = _im2col(x.data, kernel, kernel, stride, oh, ow)
    flat = cols.reshape(n, c, kernel * kernel, oh, ow)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[:, :, None], g[:, :, None], axis=2)
        dcols = dflat.reshape(n, c, kernel, kernel, oh, ow)
        return (_col2im(dcols, x.shape, stride),)

    return make_op(out, (x,), bwd, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype),)

    return make_op(out, (x,), bwd, "global_avg_pool")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "statistics",
    epsilon: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    ``statistics`` mode normalizes with the running estimates (inference
    semantics). ``minibatch`` mode normalizes with the current batch's
    population statistics and folds them into the running estimates in
    place with the given momentum.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ValueError(f"batchnorm {name} shape {t.shape} != ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError("batchnorm running statistics must be per-channel")
    if np.any(running_var < 0):
        raise ValueError("batchnorm running variance must be non-negative")
    if mode not in ("statistics", "minibatch"):
        raise ValueError(f"batchnorm mode must be 'statistics' or 'minibatch', got {mode!r}")

    xd = x.data
    if mode == "minibatch":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # population variance
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    if mode == "minibatch":

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            gs = g * gamma.data[:, None, None]
            dx = (
                inv_std[:, None, None]
                * (
                    gs
                    - gs.mean(axis=(0, 2, 3))[:, None, None]
                    - xhat * (gs * xhat).mean(axis=(0, 2, 3))[:, None, None]
                )
            ).astype(xd.dtype)
            return (dx, dgamma, dbeta)

    else:

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = (g * (gamma.data * inv_std)[:, None, None]).astype(xd.dtype)
            return (dx, dgamma, dbeta)

    return make_op(out.astype(xd.dtype), (x, gamma, beta), bwd, "batchnorm")


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log softmax over [N, C], stabilized by max subtraction."""
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"log_softmax expects [N, C] logits, got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def bwd(g):
        return ((g - softmax * g.sum(axis=1, keepdims=True)).astype(z.dtype),)

    return make_op(out, (logits,), bwd, "log_softmax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N, C] logits, got {z.shape}")
    n, c = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.asarray((lse - shifted[np.arange(n), labels]).mean(), dtype=z.dtype)
    softmax = np.exp(shifted - lse[:, None])

    def bwd(g):
        dz = softmax.copy()
        dz[np.arange(n), labels] -= 1.0
        return ((g * dz / n).astype(z.dtype),)

    return make_op(loss, (logits,), bwd, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# optimization and validation helpers


class SGD:
    """Plain SGD with classical momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], velocities: Sequence[np.ndarray],
             lr: float, momentum: float) -> None:
    """Functional single step over (param, velocity) pairs."""
    for p, v in zip(params, velocities):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad
        p.data -= lr * v


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Worst-case relative error between tape and central-difference gradients.

    Evaluates in float64 so the comparison sits above finite-difference
    noise; the backward rules under test are dtype-independent.
    """
    if h <= 0:
        raise ValueError("grad_check step h must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape():
        loss = f(x64)
        if loss.requires_grad:
            backward(loss)
    g_tape = np.zeros_like(x64.data) if x64.grad is None else x64.grad

    flat = x64.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig
        g_fd[i] = (fp - fm) / (2.0 * h)

    g_tape_flat = g_tape.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(g_fd), np.abs(g_tape_flat)), 1e-6)
    return float(np.max(np.abs(g_fd - g_tape_flat) / denom))
