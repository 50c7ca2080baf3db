"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: exactly the operations the denoiser network and its
losses need, executed eagerly on numpy arrays. While a :class:`Tape` is
active, every operation whose output depends on a gradient-requiring
tensor appends a backward closure to the tape; :func:`backward` replays
those closures in exact reverse execution order, accumulating adjoints
additively (a tensor consumed k times receives the sum of k adjoints).

Without an active tape the same functions run as plain (and cheap)
numpy, which is how inference-time sampling uses them.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericalError

_STATE = threading.local()


def _active_tape():
    stack = getattr(_STATE, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array with an optional same-shape gradient buffer.

    Invariants: ``grad`` is either None or an array of identical shape;
    values produced from finite inputs stay finite (a NaN/Inf is an error
    state, checked at the training-loop and optimizer boundaries).
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path: trusts `arr` (op output of finite inputs).
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"


class Tape:
    """Ordered record of executed operations for one backward pass.

    Use as a context manager; operations executed inside the ``with``
    block are recorded. Nested tapes record onto the innermost one.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tapes.pop()
        return False

    def __len__(self):
        return len(self._records)

    def run_backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        if not self._records:
            raise ContractError("backward() on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for record in reversed(self._records):
            record()


def backward(loss: Tensor):
    """Populate ``grad`` on every gradient-requiring tensor the loss depends on."""
    if loss.tape is None:
        raise ContractError("loss was not recorded on a tape")
    loss.tape.run_backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Validating constructor for user-supplied values."""
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to `shape` (reverses numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(out_data: np.ndarray, inputs: tuple, bw) -> Tensor:
    """Wrap an op result; register `bw` on the active tape when grads flow."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    tape = _active_tape()
    if requires and tape is not None:
        out.tape = tape

        def record():
            if out.grad is not None:
                bw(out.grad)

        tape._records.append(record)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _emit(y, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _emit(y, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _emit(y, (a, b), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    y = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(old))

    return _emit(y, (x,), bw)


def swap_last2(x) -> Tensor:
    """Transpose the last two axes (copying, so no aliasing on the tape)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("swap_last2 needs at least 2 dimensions")
    y = np.swapaxes(x.data, -1, -2).copy()

    def bw(g):
        _accum(x, np.swapaxes(g, -1, -2))

    return _emit(y, (x,), bw)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    x = as_tensor(x)
    n = x.data.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise DimensionError(f"narrow [{start}:{start + length}) out of range for axis size {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    y = x.data[idx].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _emit(y, (x,), bw)


def pad_replicate_last(x, left: int, right: int) -> Tensor:
    """Replicate-pad the last (temporal) axis."""
    x = as_tensor(x)
    if left < 0 or right < 0:
        raise ContractError("negative padding")
    if left == 0 and right == 0:
        y = x.data.copy()

        def bw_id(g):
            _accum(x, g)

        return _emit(y, (x,), bw_id)
    pads = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    y = np.pad(x.data, pads, mode="edge")
    n = x.data.shape[-1]

    def bw(g):
        core = g[..., left:left + n].copy()
        if left:
            core[..., 0] += g[..., :left].sum(axis=-1)
        if right:
            core[..., -1] += g[..., left + n:].sum(axis=-1)
        _accum(x, core)

    return _emit(y, (x,), bw)


def concat_channels(a, b) -> Tensor:
    """Stack two [..., C, N] tensors along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError("concat_channels expects matching-rank [..., C, N] tensors")
    if a.data.shape[-1] != b.data.shape[-1]:
        raise DimensionError(
            f"temporal lengths differ: {a.data.shape[-1]} vs {b.data.shape[-1]}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError("leading (batch) dimensions differ")
    y = np.concatenate([a.data, b.data], axis=-2)
    ca = a.data.shape[-2]

    def bw(g):
        _accum(a, g[..., :ca, :])
        _accum(b, g[..., ca:, :])

    return _emit(y, (a, b), bw)


def stack_rows(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack_rows of nothing")
    y = np.stack([t.data for t in ts], axis=0)

    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, g[i])

    return _emit(y, tuple(ts), bw)


def silu(x) -> Tensor:
    """Elementwise SiLU, y = x * sigmoid(x)."""
    x = as_tensor(x)
    sig = expit(x.data)
    y = x.data * sig

    def bw(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _emit(y, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra ops


def linear(x, w, b) -> Tensor:
    """Affine map over the last axis: y = x @ w + b, broadcasting leading dims."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {w.data.shape}")
    cin, cout = w.data.shape
    if x.data.shape[-1] != cin:
        raise DimensionError(f"inner dim {x.data.shape[-1]} != weight rows {cin}")
    if b.data.shape != (cout,):
        raise DimensionError(f"bias shape {b.data.shape} != ({cout},)")
    y = x.data @ w.data + b.data

    def bw(g):
        gf = g.reshape(-1, cout)
        if x.requires_grad:
            _accum(x, (gf @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            xf = x.data.reshape(-1, cin)
            _accum(w, xf.T @ gf)
        if b.requires_grad:
            _accum(b, gf.sum(axis=0))

    return _emit(y, (x, w, b), bw)


def conv1d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation along the temporal axis.

    x: [C, N] or [B, C, N]; k: [Cout, C, K] with K odd. Zero padding of
    `pad` on both sides; output length N' = (N + 2*pad - K)//stride + 1.
    """
    x, k = as_tensor(x), as_tensor(k)
    if k.ndim != 3:
        raise DimensionError(f"kernel must be [Cout, Cin, K], got {k.data.shape}")
    cout, cin, ksize = k.data.shape
    if ksize % 2 != 1:
        raise DimensionError(f"kernel size must be odd, got {ksize}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ContractError(f"pad must be >= 0, got {pad}")
    batched = x.ndim == 3
    if x.ndim not in (2, 3):
        raise DimensionError(f"input must be [C, N] or [B, C, N], got {x.data.shape}")
    if x.data.shape[-2] != cin:
        raise DimensionError(f"input channels {x.data.shape[-2]} != kernel channels {cin}")

    xb = x.data if batched else x.data[None]
    nbatch, _, n = xb.shape
    nout = (n + 2 * pad - ksize) // stride + 1
    if nout < 1:
        from .errors import SequenceTooShortError
        raise SequenceTooShortError(
            f"sequence of length {n} too short for kernel {ksize} with stride {stride}, pad {pad}")

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad))) if pad else xb
    end = (nout - 1) * stride + 1
    cols = np.empty((nbatch, cin, ksize, nout))
    for kk in range(ksize):
        cols[:, :, kk, :] = xp[:, :, kk:kk + end:stride]
    cols2 = cols.reshape(nbatch, cin * ksize, nout)
    w2 = k.data.reshape(cout, cin * ksize)
    y = np.matmul(w2, cols2)
    if not batched:
        y = y[0]

    def bw(g):
        gb = g if batched else g[None]
        if k.requires_grad:
            dk = np.matmul(gb, cols2.transpose(0, 2, 1)).sum(axis=0)
            _accum(k, dk.reshape(k.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, gb).reshape(nbatch, cin, ksize, nout)
            dxp = np.zeros_like(xp)
            for kk in range(ksize):
                dxp[:, :, kk:kk + end:stride] += dcols[:, :, kk, :]
            dx = dxp[:, :, pad:pad + n] if pad else dxp
            _accum(x, dx if batched else dx[0])

    return _emit(y, (x, k), bw)


def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """Linear-interpolation matrix [n*factor, n]; endpoints replicated."""
    m = n * factor
    src = np.arange(m) / factor
    i0 = np.minimum(src.astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = np.where(i1 > i0, src - i0, 0.0)
    mat = np.zeros((m, n))
    np.add.at(mat, (np.arange(m), i0), 1.0 - w)
    np.add.at(mat, (np.arange(m), i1), w)
    return mat


def upsample_linear(x, factor: int) -> Tensor:
    """Linear interpolation along the temporal axis to length N * factor."""
    x = as_tensor(x)
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ContractError(f"factor must be an integer >= 1, got {factor!r}")
    if x.ndim < 2:
        raise DimensionError("upsample_linear expects [..., C, N]")
    n = x.data.shape[-1]
    mat = _interp_matrix(n, int(factor))
    y = np.matmul(x.data, mat.T)

    def bw(g):
        _accum(x, np.matmul(g, mat))

    return _emit(y, (x,), bw)


def avg_pool1d(x, window: int) -> Tensor:
    """Non-overlapping mean pooling along the temporal axis."""
    x = as_tensor(x)
    n = x.data.shape[-1]
    if window < 1 or n % window != 0:
        raise DimensionError(f"temporal length {n} not divisible by pool window {window}")
    y = x.data.reshape(*x.data.shape[:-1], n // window, window).mean(axis=-1)

    def bw(g):
        _accum(x, np.repeat(g, window, axis=-1) / window)

    return _emit(y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    y = np.asarray(x.data.sum())

    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _emit(y, (x,), bw)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    y = np.asarray(x.data.mean())
    inv = 1.0 / x.data.size

    def bw(g):
        _accum(x, np.broadcast_to(g * inv, x.data.shape).copy())

    return _emit(y, (x,), bw)


def mse(pred, target) -> Tensor:
    """Mean squared error over all entries."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    y = np.asarray(np.mean(diff * diff))
    scale = 2.0 / diff.size

    def bw(g):
        _accum(pred, g * scale * diff)
        _accum(target, -g * scale * diff)

    return _emit(y, (pred, target), bw)
