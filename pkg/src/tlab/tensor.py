"""Dense float32 tensors with reverse-mode automatic differentiation.

Just enough machinery to train a small CNN on CPU and to pull input
gradients back out for gradient-sign attacks: an explicit gradient tape,
2-D matmul, strided/padded conv2d, 2x2 max pooling, and a numerically
stabilized softmax cross-entropy.  Everything is float32 end to end;
gradient correctness is pinned against 64-bit central finite differences
in the test suite.

Recording model: ops record onto the innermost active ``GradientTape``
(entered via ``with``) whenever at least one operand is *tracked*, i.e.
is a watched leaf or was produced from one.  ``backward(tape, loss)``
replays the tape once and returns a gradient per watched leaf, with
zeros for leaves the loss never touched.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeError",
    "TapeUsageError",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "reshape",
    "flatten",
    "relu",
    "max_pool2d",
    "conv2d",
    "softmax_cross_entropy",
    "sum_all",
    "stable_softmax",
]


class ShapeError(ValueError):
    """Operands cannot be combined because their shapes disagree."""


class TapeUsageError(RuntimeError):
    """A gradient tape was used outside its contract."""


_next_tid = itertools.count()
_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense float32 array.

    ``data`` is C-contiguous and must not be written to after
    construction; ops allocate fresh outputs, which is what makes
    tensors safe to share between a model and a tape.
    """

    __slots__ = ("data", "tid")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.tid = next(_next_tid)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tid={self.tid})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Wengert list recording ops in execution order.

    Single-owner: one thread builds the tape and calls ``backward`` on
    it.  Appending in execution order means the reversed list is already
    a valid topological order, so backward is a single reverse sweep.
    """

    def __init__(self):
        self._nodes = []  # (out_tid, in_tids, needs, backward_fn)
        self._leaves = {}  # tid -> Tensor
        self._tracked = set()
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeUsageError("tape exited out of order")
        stack.pop()
        return False

    def watch(self, tensor):
        if not isinstance(tensor, Tensor):
            raise TypeError(f"can only watch Tensor, got {type(tensor).__name__}")
        self._leaves[tensor.tid] = tensor
        self._tracked.add(tensor.tid)

    def tracks(self, tensor):
        return tensor.tid in self._tracked

    def _record(self, out, inputs, needs, backward_fn):
        self._nodes.append((out.tid, [t.tid for t in inputs], needs, backward_fn))
        self._tracked.add(out.tid)
        self._produced.add(out.tid)


def _maybe_record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is None:
        return out
    needs = [tape.tracks(t) for t in inputs]
    if not any(needs):
        return out
    tape._record(out, inputs, needs, backward_fn)
    return out


def backward(tape, loss):
    """Accumulate gradients of scalar ``loss`` w.r.t. the watched leaves.

    Returns ``{leaf_tid: Tensor}`` with one entry per watched leaf;
    leaves that do not influence the loss get zeros of their own shape.
    Fan-out accumulates additively.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise TapeUsageError("loss must be a scalar Tensor")
    if loss.tid not in tape._produced:
        raise TapeUsageError("loss was not produced by an op recorded on this tape")
    grads = {loss.tid: np.ones_like(loss.data)}
    for out_tid, in_tids, needs, backward_fn in reversed(tape._nodes):
        if out_tid in tape._leaves:
            g = grads.get(out_tid)
        else:
            g = grads.pop(out_tid, None)
        if g is None:
            continue
        for tid, gin in zip(in_tids, backward_fn(g, needs)):
            if gin is None:
                continue
            acc = grads.get(tid)
            grads[tid] = gin if acc is None else acc + gin
    out = {}
    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        out[tid] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g, needs):
        return (
            _unbroadcast(g, a_shape) if needs[0] else None,
            _unbroadcast(g, b_shape) if needs[1] else None,
        )

    return _maybe_record(out, [a, b], bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g, needs):
        return (
            _unbroadcast(g, a_shape) if needs[0] else None,
            _unbroadcast(-g, b_shape) if needs[1] else None,
        )

    return _maybe_record(out, [a, b], bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    a_data, b_data = a.data, b.data

    def bwd(g, needs):
        return (
            _unbroadcast(g * b_data, a_data.shape) if needs[0] else None,
            _unbroadcast(g * a_data, b_data.shape) if needs[1] else None,
        )

    return _maybe_record(out, [a, b], bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def bwd(g, needs):
        ga = g @ b_data.T if needs[0] else None
        gb = a_data.T @ g if needs[1] else None
        return (ga, gb)

    return _maybe_record(out, [a, b], bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    in_shape = x.data.shape

    def bwd(g, needs):
        return (np.ascontiguousarray(g.reshape(in_shape)),)

    return _maybe_record(out, [x], bwd)


def flatten(x):
    """(N, ...) -> (N, prod(rest)). Row-major, so spatial layout is stable."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1))


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, np.float32(0.0)))

    def bwd(g, needs):
        return (g * mask,)

    return _maybe_record(out, [x], bwd)


def max_pool2d(x):
    """2x2 max pooling, stride 2. Ties route gradient to the first max."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    v = x.data.reshape(n, c, h2, 2, w2, 2)
    # strided views of the four window corners, row-major window order
    va, vb = v[:, :, :, 0, :, 0], v[:, :, :, 0, :, 1]
    vc, vd = v[:, :, :, 1, :, 0], v[:, :, :, 1, :, 1]
    out = Tensor(np.maximum(np.maximum(va, vb), np.maximum(vc, vd)))

    def bwd(g, needs):
        # first max in row-major window order receives the gradient
        sel_a = (va >= vb) & (va >= vc) & (va >= vd)
        rest = ~sel_a
        sel_b = rest & (vb >= vc) & (vb >= vd)
        rest &= ~sel_b
        sel_c = rest & (vc >= vd)
        sel_d = rest & ~sel_c
        gx = np.empty((n, c, h, w), dtype=np.float32)
        gv = gx.reshape(n, c, h2, 2, w2, 2)
        gv[:, :, :, 0, :, 0] = g * sel_a
        gv[:, :, :, 0, :, 1] = g * sel_b
        gv[:, :, :, 1, :, 0] = g * sel_c
        gv[:, :, :, 1, :, 1] = g * sel_d
        return (gx,)

    return _maybe_record(out, [x], bwd)


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of NCHW input with FCKK kernel, zero padding.

    Output spatial extent is (H + 2*pad - K) // stride + 1.  Lowered to
    a single GEMM via im2col; backward scatters columns back with a
    KxK python loop, which is cheap next to the GEMMs.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects NCHW input and FCKK kernel, got {x.shape} and {kernel.shape}"
        )
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if not isinstance(pad, int) or pad < 0:
        raise ValueError(f"pad must be a non-negative int, got {pad!r}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # Internals run channels-last so the im2col gather copies contiguous
    # channel runs instead of tiny strided rows.
    sw = np.lib.stride_tricks.sliding_window_view
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if pad:
        xt = np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sw(xt, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * ho * wo, kh * kw * c
    )
    kmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(
        f, kh * kw * c
    )
    out_data = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = Tensor(out_data)
    k_data = kernel.data

    def bwd(g, needs):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gx = None
        if needs[0]:
            if stride == 1 and kh > pad and kw > pad:
                # input grad of a stride-1 correlation is a full correlation
                # of the output grad with the flipped, channel-swapped kernel
                kf = np.ascontiguousarray(
                    k_data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(
                    kh * kw * f, c)
                gp = np.pad(gflat, ((0, 0), (kh - 1 - pad, kh - 1 - pad),
                                    (kw - 1 - pad, kw - 1 - pad), (0, 0)))
                gwin = sw(gp, (kh, kw), axis=(1, 2))
                gcols = np.ascontiguousarray(
                    gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w,
                                                              kh * kw * f)
                gx = np.ascontiguousarray(
                    (gcols @ kf).reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                gcols = (gflat.reshape(n * ho * wo, f) @ kmat).reshape(
                    n, ho, wo, kh, kw, c)
                gxp = np.zeros((n, hp, wp, c), dtype=np.float32)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + ho * stride : stride,
                            j : j + wo * stride : stride, :] += gcols[:, :, :, i, j, :]
                gxt = gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp
                gx = np.ascontiguousarray(gxt.transpose(0, 3, 1, 2))
        gk = None
        if needs[1]:
            gk = np.ascontiguousarray(
                (gflat.reshape(n * ho * wo, f).T @ cols).reshape(
                    f, kh, kw, c).transpose(0, 3, 1, 2))
        return (gx, gk)

    return _maybe_record(out, [x, kernel], bwd)


def stable_softmax(z):
    """Row-wise softmax of a 2-D ndarray, computed in shifted log space."""
    z = np.asarray(z, dtype=np.float32)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy between logits (N,K) and int labels (N,).

    Computed entirely in shifted log space so large logits neither
    overflow nor collapse to log(0); returns a scalar Tensor.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got shape {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise ValueError("cross-entropy needs at least one example")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    s = z - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    logp = s - lse
    rows = np.arange(n)
    out = Tensor(np.float32(-(logp[rows, labels].mean(dtype=np.float64))))

    def bwd(g, needs):
        p = np.exp(logp)
        p[rows, labels] -= np.float32(1.0)
        return (p * (g * np.float32(1.0 / n)),)

    return _maybe_record(out, [logits], bwd)


def sum_all(x):
    """Sum of all entries as a scalar Tensor."""
    x = _as_tensor(x)
    out = Tensor(x.data.sum(dtype=np.float64))
    in_shape = x.data.shape

    def bwd(g, needs):
        return (np.broadcast_to(g.astype(np.float32), in_shape).copy(),)

    return _maybe_record(out, [x], bwd)
