"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order.  Every differentiable operation
records itself on the currently active :class:`Tape`; calling
``backward(loss, tape)`` replays the records in reverse and accumulates
gradients additively into the participating tensors.

Forward operations never mutate their inputs.  When strict mode is enabled
(see :func:`set_strict`) every operation checks its output for NaN/Inf.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    LabelError,
)

DTYPE = np.float64

# tanh-approximation GELU constant sqrt(2/pi); documented so independent
# implementations agree bit-for-bit per dtype
GELU_C = 0.7978845608
GELU_A = 0.044715

_STRICT = False
_ACTIVE_TAPE: Optional["Tape"] = None


def set_strict(flag: bool) -> None:
    """Enable/disable finiteness checking after every operation."""
    global _STRICT
    _STRICT = bool(flag)


def strict_enabled() -> bool:
    return _STRICT


class Tensor:
    """A dense n-dimensional array with optional gradient support."""

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self._grad

    def zero_grad(self) -> None:
        self._grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the real work lives in the module-level functions
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Parameter:
    """A named trainable tensor; names are unique within a model."""

    name: str
    value: Tensor


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward.

    Entries are appended in execution order, which is topological by
    construction.  A tape belongs to one training step at a time; use it as
    a context manager to make it the recording target.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._prev: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self._entries.append(_TapeEntry(output, inputs, backward_fn))


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over the tape, accumulating gradients additively.

    Each tape node is visited exactly once.  Intermediate gradients live in
    a scratch table; only tensors with ``requires_grad`` keep theirs, so
    running backward twice without zeroing doubles every gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # make sure every requires-grad tensor touched by the tape ends up with
    # a gradient buffer, even if the loss never reaches it
    for entry in tape._entries:
        for t in entry.inputs:
            if t.requires_grad and t._grad is None:
                t.zero_grad()
    for entry in reversed(tape._entries):
        g_out = scratch.pop(id(entry.output), None)
        if g_out is None:
            continue
        for t, g in entry.backward_fn(g_out):
            if g is None:
                continue
            key = id(t)
            if key in scratch:
                scratch[key] = scratch[key] + g
            else:
                scratch[key] = g
    # whatever remains in scratch belongs to leaves
    for entry_inputs in [e.inputs for e in tape._entries]:
        for t in entry_inputs:
            g = scratch.pop(id(t), None)
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Common tail of every op: strict check + tape recording."""
    if _STRICT and not np.all(np.isfinite(out.data)):
        raise ContractError("non-finite value produced in strict mode")
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _finish(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _finish(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return _finish(out, (a, b), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)

    def bw(g):
        return [(a, g * p * a.data ** (p - 1.0))]

    return _finish(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        return [(a, g.reshape(a.shape))]

    return _finish(out, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())

    def bw(g):
        return [(a, g.T)]

    return _finish(out, (a,), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return [(a, full)]

    return _finish(out, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def bw(g):
        grads = []
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            grads.append((p, g[tuple(idx)]))
            offset += n
        return grads

    return _finish(out, tuple(parts), bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def bw(g):
        slices = np.moveaxis(g, axis, 0)
        return [(p, slices[i].reshape(p.shape)) for i, p in enumerate(parts)]

    return _finish(out, tuple(parts), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        g2 = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g2, a.shape).copy())]

    return _finish(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} x {b.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _finish(out, (a, b), bw)


# ---------------------------------------------------------------------------
# activations and normalization


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bw(g):
        return [(a, g * (a.data > 0.0))]

    return _finish(out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bw(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        return [(a, g * d)]

    return _finish(out, (a,), bw)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ConfigurationError(f"unknown activation kind {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(a, y * (g - dot))]

    return _finish(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then affine gamma/beta.

    Composed from primitive ops, so the backward pass comes for free.
    """
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise DimensionError(
            f"layer_norm: last extent {x.shape[-1]} vs gamma {gamma.shape} beta {beta.shape}"
        )
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = pow_scalar(add(var, Tensor(eps)), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(mask))


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], fused for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    n, c = logits.shape
    for i, lab in enumerate(labels):
        if not 0 <= lab < c:
            raise LabelError(f"label {lab} at index {i} outside [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss_val = float(np.mean(lse - z[np.arange(n), labels]))
    out = Tensor(loss_val)
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return [(logits, d * (float(g) / n))]

    return _finish(out, (logits,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols


def _col2im(cols: np.ndarray, x_shape, ph: int, pw: int, sh: int, sw: int):
    b, c, h, w = x_shape
    _, _, kh, kw, ho, wo = cols.shape
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols[:, :, i, j]
    if ph or pw:
        return xp[:, :, ph : ph + h, pw : pw + w]
    return xp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride=(1, 1),
    padding=(0, 0),
    groups: int = 1,
) -> Tensor:
    """Strided zero-padded cross-correlation (no kernel flip), with groups."""
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    b, cin, h, w = x.shape
    cout, ck, kh, kw = kernel.shape
    sh, sw = stride
    ph, pw = padding
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(
            f"groups={groups} must divide Cin={cin} and Cout={cout}"
        )
    if ck != cin // groups:
        raise DimensionError(
            f"kernel channels {ck} do not match Cin/groups = {cin}//{groups}"
        )
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(
            f"non-positive conv output extent {ho}x{wo} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    cg = cin // groups
    og = cout // groups
    y = np.empty((b, cout, ho, wo), dtype=x.data.dtype)
    for g_i in range(groups):
        cs = cols[:, g_i * cg : (g_i + 1) * cg]
        ks = kernel.data[g_i * og : (g_i + 1) * og]
        y[:, g_i * og : (g_i + 1) * og] = np.einsum(
            "bcijhw,ocij->bohw", cs, ks, optimize=True
        )
    out = Tensor(y)

    def bw(g):
        dk = np.empty_like(kernel.data)
        dcols = np.empty_like(cols)
        for gi in range(groups):
            cs = cols[:, gi * cg : (gi + 1) * cg]
            ks = kernel.data[gi * og : (gi + 1) * og]
            go = g[:, gi * og : (gi + 1) * og]
            dk[gi * og : (gi + 1) * og] = np.einsum(
                "bcijhw,bohw->ocij", cs, go, optimize=True
            )
            dcols[:, gi * cg : (gi + 1) * cg] = np.einsum(
                "ocij,bohw->bcijhw", ks, go, optimize=True
            )
        dx = _col2im(dcols, x.shape, ph, pw, sh, sw)
        return [(x, dx), (kernel, dk)]

    return _finish(out, (x, kernel), bw)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """k x k max pooling with stride k; extents must divide evenly."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigurationError(f"max_pool2d: extents {h}x{w} not divisible by {k}")
    xr = x.data.reshape(b, c, h // k, k, w // k, k)
    y = xr.max(axis=(3, 5))
    out = Tensor(y)

    def bw(g):
        mask = xr == y[:, :, :, None, :, None]
        # split the gradient among ties so the sum is preserved
        counts = mask.sum(axis=(3, 5), keepdims=True)
        dxr = mask * (g[:, :, :, None, :, None] / counts)
        return [(x, dxr.reshape(x.shape))]

    return _finish(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """B x C x H x W -> B x C spatial mean."""
    b, c, h, w = x.shape
    return mul(tsum(tsum(x, axis=3), axis=2), Tensor(1.0 / (h * w)))


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_gradcheck(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_entries_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic zero-argument closure over ``params``
    returning a scalar Tensor.  When ``max_entries_per_param`` is given,
    that many entries per parameter are sampled (seeded via ``rng``)
    instead of sweeping every entry.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigurationError(f"eps {eps} outside (0, 1e-2]")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    max_err = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        an_flat = an.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            denom = max(abs(num), abs(an_flat[i]), 1e-8)
            max_err = max(max_err, abs(num - an_flat[i]) / denom)
    return max_err


# ---------------------------------------------------------------------------
# TNSR serialization

_TNSR_MAGIC = b"TNSR"
_DTYPE_CODES = {1: np.float32, 2: np.float64}


def tnsr_encode(arr: np.ndarray) -> bytes:
    """Serialize an array: magic, version, dtype code, rank, u64 extents, scalars."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 1
    else:
        arr = arr.astype(np.float64)
        code = 2
    buf = io.BytesIO()
    buf.write(_TNSR_MAGIC)
    buf.write(struct.pack("<BBB", 1, code, arr.ndim))
    for ext in arr.shape:
        buf.write(struct.pack("<Q", ext))
    buf.write(arr.astype("<f4" if code == 1 else "<f8").tobytes(order="C"))
    return buf.getvalue()


def tnsr_decode(data: bytes) -> np.ndarray:
    if len(data) < 7 or data[:4] != _TNSR_MAGIC:
        raise FormatError("bad TNSR magic")
    version, code, rank = struct.unpack("<BBB", data[4:7])
    if version != 1:
        raise FormatError(f"unsupported TNSR version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown TNSR dtype code {code}")
    off = 7
    if len(data) < off + 8 * rank:
        raise FormatError("truncated TNSR header")
    shape = struct.unpack(f"<{rank}Q", data[off : off + 8 * rank]) if rank else ()
    off += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    itemsize = 4 if code == 1 else 8
    if len(data) != off + count * itemsize:
        raise FormatError(
            f"TNSR payload length {len(data) - off} does not match shape {shape}"
        )
    arr = np.frombuffer(
        data, dtype="<f4" if code == 1 else "<f8", count=count, offset=off
    )
    return arr.reshape(shape).astype(_DTYPE_CODES[code])
