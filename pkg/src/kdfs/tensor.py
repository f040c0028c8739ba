"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps an n-d float array plus an optional gradient. Operations
executed inside a `with Tape():` block append backward rules to that tape
when any input requires a gradient; `backward(loss)` replays the tape in
reverse and accumulates gradients into every reachable tensor that asked
for one. Tapes are per-forward-pass and thrown away afterwards; there are
no higher-order derivatives.

Training runs in float32. Gradient checking builds float64 tensors and the
ops follow the dtype of their inputs, so `finite_diff_check` gets tight
tolerances without a global mode switch.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5

_active_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # (tape, node-id) of the most recent tape this tensor was recorded on
        self.node: tuple["Tape", int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeEntry:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[int, ...], output: int, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of one forward pass.

    Entries are appended in execution order, so inputs of every entry
    precede it and one reverse sweep visits each node at most once.
    After `backward`, `self.grads` maps node id -> gradient array for
    every node on the loss's ancestry (useful for inspecting gradients
    of intermediates, e.g. the straight-through mask tests).
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.tensors: dict[int, Tensor] = {}
        self.grads: dict[int, np.ndarray] = {}
        self._next_id = 0

    def node_id(self, t: Tensor) -> int:
        if t.node is not None and t.node[0] is self:
            return t.node[1]
        nid = self._next_id
        self._next_id += 1
        t.node = (self, nid)
        self.tensors[nid] = t
        return nid

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        ids = tuple(self.node_id(t) for t in inputs)
        self.entries.append(TapeEntry(ids, self.node_id(output), backward))

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _active_tapes.pop()
        return False


def current_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


def _apply(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = current_tape()
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss is not attached to any tape")
    tape, loss_id = loss.node
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        gout = grads.get(entry.output)
        if gout is None:
            continue
        for nid, gin in zip(entry.inputs, entry.backward(gout)):
            if gin is None:
                continue
            acc = grads.get(nid)
            grads[nid] = gin if acc is None else acc + gin
    tape.grads = grads
    for nid, t in tape.tensors.items():
        if t.requires_grad and nid in grads:
            g = grads[nid]
            t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape plumbing


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-with-tensor")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-vs-tensor broadcasting is allowed, so a mismatch means
    # the target was the scalar side
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    def bwd(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)
    return _apply((a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    def bwd(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(-g, b.shape) if b.requires_grad else None)
    return _apply((a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    def bwd(g):
        return (_reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)
    return _apply((a, b), a.data * b.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def bwd(g):
        return (g * c,)
    return _apply((a,), a.data * a.data.dtype.type(c), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g,)
    return _apply((a,), a.data + a.data.dtype.type(c), bwd)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    def bwd(g):
        return (g * (a.data > 0),)
    return _apply((a,), out, bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * np.sign(a.data),)
    return _apply((a,), np.abs(a.data), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        return (g.reshape(a.shape),)
    return _apply((a,), a.data.reshape(shape), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(a.shape, g, dtype=a.dtype),)
    return _apply((a,), np.asarray(a.data.sum(), dtype=a.dtype), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    def bwd(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)
    return _apply((a,), np.asarray(a.data.mean(), dtype=a.dtype), bwd)


def frobenius_norm(a: Tensor) -> Tensor:
    norm = float(np.sqrt((a.data.astype(np.float64) ** 2).sum()))
    def bwd(g):
        return (g * (a.data / a.dtype.type(max(norm, 1e-12))),)
    return _apply((a,), np.asarray(norm, dtype=a.dtype), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    def bwd(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)
    return _apply((a, b), a.data @ b.data, bwd)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """a[N,K] + b[K] broadcast over rows (classifier bias)."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_rowvec: {a.shape} + {b.shape}")
    def bwd(g):
        return (g if a.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)
    return _apply((a, b), a.data + b.data, bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _apply((a,), out, bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _apply((a,), out, bwd)


def row_gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one element per row of a 2-d tensor: out[i] = a[i, idx[i]]."""
    if a.data.ndim != 2:
        raise DimensionError(f"row_gather expects 2-d input, got {a.shape}")
    rows = np.arange(a.shape[0])
    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)
    return _apply((a,), a.data[rows, idx], bwd)


# ---------------------------------------------------------------------------
# channel-indexed primitives (the [N,C,H,W] helpers masking and BN need)


def _check_channel_vec(x: Tensor, v: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{op} expects a 4-d activation, got {x.shape}")
    if v.data.ndim != 1 or v.shape[0] != x.shape[1]:
        raise DimensionError(f"{op}: vector {v.shape} does not match channel count {x.shape[1]}")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel c of x[N,C,H,W] by s[c]; how masks touch features."""
    _check_channel_vec(x, s, "channel_scale")
    sb = s.data[None, :, None, None]
    def bwd(g):
        gx = g * sb if x.requires_grad else None
        gs = (g * x.data).sum(axis=(0, 2, 3)) if s.requires_grad else None
        return (gx, gs)
    return _apply((x, s), x.data * sb, bwd)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    _check_channel_vec(x, b, "channel_bias")
    def bwd(g):
        gx = g if x.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return (gx, gb)
    return _apply((x, b), x.data + b.data[None, :, None, None], bwd)


def channel_scatter(x: Tensor, idx: np.ndarray, out_channels: int) -> Tensor:
    """Place x[N,C',H,W] channels at positions idx of a zero [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise DimensionError(f"channel_scatter expects 4-d input, got {x.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != x.shape[1]:
        raise DimensionError(f"channel_scatter: {idx.shape[0] if idx.ndim == 1 else idx.shape} indices for {x.shape[1]} channels")
    n, _, h, w = x.shape
    out = np.zeros((n, out_channels, h, w), dtype=x.dtype)
    out[:, idx] = x.data
    def bwd(g):
        return (g[:, idx],)
    return _apply((x,), out, bwd)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS):
    """Batch normalization with per-batch statistics.

    Returns (normalized tensor, batch mean, batch var); the caller owns the
    running-statistics update, which stays outside the tape.
    """
    _check_channel_vec(x, gamma, "batchnorm")
    _check_channel_vec(x, beta, "batchnorm")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return (gx,
                ggamma if gamma.requires_grad else None,
                gbeta if beta.requires_grad else None)

    return _apply((x, gamma, beta), out, bwd), mu, var


def ste_mask(pi: Tensor) -> Tensor:
    """Hard keep/drop mask from relaxed [C,2] probabilities.

    Forward emits 1 where the second column wins (ties keep the filter).
    Backward copies the mask gradient onto the second column unchanged and
    leaves the first column untouched: the downstream softmax jacobian only
    sees the column difference, so any additional component along (1,1)
    would be projected out anyway.
    """
    if pi.data.ndim != 2 or pi.shape[1] != 2:
        raise DimensionError(f"ste_mask expects a [C,2] matrix, got {pi.shape}")
    m = (pi.data[:, 1] >= pi.data[:, 0]).astype(pi.dtype)
    def bwd(g):
        gpi = np.zeros_like(pi.data)
        gpi[:, 1] = g
        return (gpi,)
    return _apply((pi,), m, bwd)


# ---------------------------------------------------------------------------
# spatial primitives


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv output would be empty: input {h}x{w}, kernel {k}, stride {stride}, padding {padding}")
    return oh, ow


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    """Gather kxk patches into a [N, C*k*k, OH*OW] stack of matrices."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for dy in range(k):
        ye = dy + stride * oh
        for dx in range(k):
            xe = dx + stride * ow
            col[:, :, dy, dx] = x[:, :, dy:ye:stride, dx:xe:stride]
    return col.reshape(n, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int,
            padding: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add [N, C*k*k, OH*OW] patch gradients back onto the input."""
    n, c, h, w = x_shape
    pad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    col = cols.reshape(n, c, k, k, oh, ow)
    for dy in range(k):
        ye = dy + stride * oh
        for dx in range(k):
            xe = dx + stride * ow
            pad[:, :, dy:ye:stride, dx:xe:stride] += col[:, :, dy, dx]
    if padding:
        return pad[:, :, padding:padding + h, padding:padding + w]
    return pad


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of x[N,C_in,H,W] with w[C_out,C_in,k,k].

    Realized as patch-gather plus a batched matrix multiply so that both
    backward rules are matrix multiplies as well.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d tensors, got input {x.shape}, weight {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d kernels must be square, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 is {x.shape[1]}, weight axis 1 is {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    oh, ow = _conv_geometry(h, wd, k, stride, padding)

    if k == 1 and padding == 0:
        # 1x1 fast path: patches are just (strided) pixels
        cols = x.data[:, :, ::stride, ::stride].reshape(n, c_in, oh * ow)
    else:
        cols = _im2col(x.data, k, stride, padding, oh, ow)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out = np.matmul(wmat, cols).reshape(n, c_out, oh, ow)

    def bwd(g):
        gout = g.reshape(n, c_out, oh * ow)
        gw = None
        if w.requires_grad:
            gw = np.matmul(gout, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gout)
            if k == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gcols.reshape(n, c_in, oh, ow)
            else:
                gx = _col2im(gcols, x.shape, k, stride, padding, oh, ow)
        return (gx, gw)

    return _apply((x, w), out, bwd)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    stride = k if stride is None else stride
    if stride < 1 or k < 1:
        raise ContractError(f"maxpool2d needs window >= 1 and stride >= 1, got {k}, {stride}")
    n, c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, k, stride, 0)
    win = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
    for dy in range(k):
        ye = dy + stride * oh
        for dx in range(k):
            xe = dx + stride * ow
            win[:, :, :, :, dy * k + dx] = x.data[:, :, dy:ye:stride, dx:xe:stride]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        for dy in range(k):
            ye = dy + stride * oh
            for dx in range(k):
                xe = dx + stride * ow
                gx[:, :, dy:ye:stride, dx:xe:stride] += gwin[:, :, :, :, dy * k + dx]
        return (gx,)

    return _apply((x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    return _apply((x,), x.data.mean(axis=(2, 3)), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    relative error per coordinate:
        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if eps <= 0:
        raise ContractError("finite_diff_check needs eps > 0")
    x.grad = None
    with Tape():
        loss = f(x)
        if loss.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued function")
        if loss.node is not None:  # constant functions never reach the tape
            backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
