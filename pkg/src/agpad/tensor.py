"""Dense tensors with reverse-mode automatic differentiation.

Every op accepts an unbatched value (for example a ``C x H x W`` feature map)
or the same value with one leading batch axis. Apart from scalar parameters
there is no implicit broadcasting: elementwise ops require identical shapes.

Forward and backward run in float32 unless the inputs are float64. The
:func:`precision` context switches the dtype used for tensors built from
plain Python or numpy data, which is how gradient checks get 64-bit values.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "NumericError",
    "Tensor",
    "add",
    "concat",
    "conv2d",
    "dense",
    "global_avg_pool",
    "grad_check",
    "load_tensor",
    "matmul",
    "maxpool2d",
    "mul",
    "no_grad",
    "precision",
    "read_tensor",
    "relu",
    "reshape",
    "save_tensor",
    "scale",
    "select",
    "softmax",
    "softmax_cols",
    "softmax_cross_entropy",
    "sum_all",
    "transpose",
    "write_tensor",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with an op."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything for backward."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype given to tensors built from raw data inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    prev = _default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """A node in the autodiff graph.

    Leaf tensors are created directly; every op returns a new tensor that
    remembers its parents and a closure mapping the output gradient to the
    parents' gradients. Values are treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype()
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every node reached.

        Without an explicit ``grad`` the tensor must hold a single element.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a single element, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                # fan-out: gradients add
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x, s) -> Tensor:
    """Multiply every element of ``x`` by the single-element tensor ``s``."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.size != 1:
        raise DimensionError(f"scale: expected a scalar parameter, got shape {s.shape}")
    sv = s.data.reshape(())

    def backward(g):
        return g * sv, np.sum(g * x.data).reshape(s.shape).astype(s.dtype)

    return _result(x.data * sv, (x, s), backward, "scale")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        if x.data.ndim < 2:
            raise DimensionError(f"transpose: need rank >= 2, got {x.shape}")
        axes = list(range(x.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} vs {x.shape} on axis {axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _result(
        np.concatenate([x.data for x in xs], axis=ax),
        xs,
        lambda g: tuple(np.split(g, splits, axis=ax)),
        "concat",
    )


def select(x, index: int) -> Tensor:
    """Pick one entry along the last axis."""
    x = _as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., index] = g
        return (gx,)

    return _result(x.data[..., index].copy(), (x,), backward, "select")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),), "sum")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def dense(x, w, b) -> Tensor:
    """Fully connected layer: ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],) or x.data.ndim > 2:
        raise DimensionError(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")

    def backward(g):
        gx = g @ w.data
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _result(x.data @ w.data.T + b.data, (x, w, b), backward, "dense")


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def softmax_cols(x) -> Tensor:
    """Softmax down each column of a matrix, so every column sums to one."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"softmax_cols: need a matrix, got {x.shape}")
    return softmax(x, axis=-2)


def softmax_cross_entropy(logits, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (if any).

    ``logits`` is ``(2,)`` with an int label, or ``(B, 2)`` with ``B`` labels.
    """
    logits = _as_tensor(logits)
    if logits.shape[-1] != 2 or logits.data.ndim > 2:
        raise DimensionError(f"softmax_cross_entropy: expected two-class logits, got {logits.shape}")
    labels = np.asarray(label)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    z = logits.data.reshape(-1, 2)
    labels = labels.reshape(-1).astype(int)
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: {z.shape[0]} logit rows vs {labels.shape[0]} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = logsum - shifted[rows, labels]
    probs = np.exp(shifted - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return ((g * d / z.shape[0]).reshape(logits.shape).astype(logits.dtype),)

    return _result(np.asarray(losses.mean(), dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# convolution and pooling


def _batched(x: Tensor, rank: int, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == rank:
        return x.data[None], True
    if x.data.ndim == rank + 1:
        return x.data, False
    raise DimensionError(f"{op}: expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels (n, i, j); columns are (cin, di, dj)."""
    n, cin = xp.shape[:2]
    if kh == 1 and kw == 1:
        patches = xp[:, :, : stride * (ho - 1) + 1:stride, : stride * (wo - 1) + 1:stride]
        return np.ascontiguousarray(patches.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cin)
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (Cin, H, W) with ``w`` (Cout, Cin, kh, kw)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xb, single = _batched(x, 3, "conv2d")
    if w.data.ndim != 4 or w.shape[1] != xb.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    cout, cin, kh, kw = w.shape
    n, _, h, wd = xb.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb

    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = np.ascontiguousarray((cols @ wmat.T + b.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g4 = g[None] if single else g
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gb = gmat.sum(axis=0)
        gw = (gmat.T @ cols).reshape(w.shape)
        if stride == 1:
            # full correlation of the output grad with the flipped, transposed kernel
            gpad = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1)
            gcols = _im2col(gpad, kh, kw, 1, hp, wp)
            gxp = np.ascontiguousarray((gcols @ wflip.T).reshape(n, hp, wp, cin).transpose(0, 3, 1, 2))
        else:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        dcols[..., i, j].transpose(0, 3, 1, 2)
                    )
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx[0] if single else gx), gw.astype(w.dtype), gb.astype(b.dtype)

    return _result(out[0] if single else out, (x, w, b), backward, "conv2d")


def maxpool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches, no padding.

    Gradient goes to the first maximum in row-major order inside each window.
    """
    x = _as_tensor(x)
    stride = window if stride is None else stride
    xb, single = _batched(x, 3, "maxpool2d")
    n, c, h, wd = xb.shape
    if window > h or window > wd:
        raise DimensionError(f"maxpool2d: window {window} exceeds input {h}x{wd}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    patches = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = patches.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xb)
        for k in range(window * window):
            di, dj = divmod(k, window)
            hit = arg == k
            if hit.any():
                gx[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += g4 * hit
        return (gx[0] if single else gx,)

    return _result(out[0] if single else out, (x,), backward, "maxpool2d")


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: (C, H, W) -> (C,), or batched."""
    x = _as_tensor(x)
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool: expected rank 3 or 4, got {x.shape}")
    h, w = x.shape[-2:]

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype),)

    return _result(x.data.mean(axis=(-2, -1), dtype=x.dtype), (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop gradients with central differences.

    ``f`` rebuilds the graph from ``params`` and returns a single-element
    tensor. Parameters are perturbed in place and restored. At most
    ``max_probes`` coordinates per parameter are checked (all by default).
    Returns the largest ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or p.shape}")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            coords = np.arange(p.size)
            if max_probes is not None and p.size > max_probes:
                coords = rng.choice(p.size, size=max_probes, replace=False)
            flat = p.data.reshape(-1)
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + eps
                fp = f().item()
                flat[idx] = orig - eps
                fm = f().item()
                flat[idx] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("non-finite value while probing")
                num = (fp - fm) / (2 * eps)
                ana = float(ga.reshape(-1)[idx])
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# AGTD tensor files

TENSOR_MAGIC = b"AGTD"
TENSOR_VERSION = 1


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
