"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array (float64 by default, float32 on
request) together with an optional gradient buffer.  Operations record
their inputs and a vector-Jacobian closure on the produced tensor, so that
:func:`backward` can replay the computation in reverse topological order.
The op vocabulary is deliberately small: linear maps (matmul, channel
convolution, temporal convolution), reductions, broadcasting elementwise
arithmetic, and a handful of nonlinearities.  Everything else in the
package is composed from these.

Shape convention for the structured ops: feature maps are laid out as
``(channels, frames, joints)``; any number of leading axes is treated as
batch and broadcast through untouched.

Gradients accumulate with ``+=`` across successive ``backward`` calls and
are cleared explicitly via :meth:`Tensor.zero_grad`.
"""

import struct

import numpy as np

__all__ = [
    "Tensor",
    "FormatError",
    "as_tensor",
    "matmul",
    "conv1x1",
    "temporal_conv",
    "mean_over_axis",
    "sum_over",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "activation",
    "reshape",
    "swap_last2",
    "concat",
    "backward",
    "ACTIVATIONS",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class FormatError(ValueError):
    """Raised when serialized tensor bytes fail validation."""


class Tensor:
    """A dense n-d array with optional gradient tracking.

    Parameters
    ----------
    data:
        Array-like; converted to float64 unless already float32.
    requires_grad:
        Mark this tensor as a differentiation target.  Outputs of ops
        inherit the flag from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays and scalars; pass existing tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    """Build an op output, recording the tape edge only when it matters."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting)
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(ad * bd, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _result(ad / bd, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _result(out_data, (a,), lambda g: (g / (2.0 * out_data),), "sqrt")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _hardswish(x):
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def _hardswish_deriv(x):
    d = (2.0 * x + 3.0) / 6.0
    return np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, d))


ACTIVATIONS = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (
        lambda x: 1.0 / (1.0 + np.exp(-x)),
        lambda x, y: y * (1.0 - y),
    ),
    "relu": (
        lambda x: np.maximum(x, 0.0),
        lambda x, y: (x > 0.0).astype(x.dtype),
    ),
    "hardswish": (_hardswish, lambda x, y: _hardswish_deriv(x)),
}


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity with an exact derivative in backward."""
    if kind not in ACTIVATIONS:
        raise ValueError(
            f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}"
        )
    x = as_tensor(x)
    fwd, deriv = ACTIVATIONS[kind]
    xd = x.data
    out_data = fwd(xd)
    return _result(out_data, (x,), lambda g: (g * deriv(xd, out_data),), kind)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean over one axis, kept as a size-1 axis.

    The backward pass distributes ``1/n`` of the incoming gradient to each
    source element.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape),)

    return _result(x.data.mean(axis=axis, keepdims=True), (x,), vjp, "mean")


def sum_over(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axis (or all axes when ``axis`` is None)."""
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        if not -x.ndim <= axis < x.ndim:
            raise ValueError(f"axis {axis} out of range for shape {shape}")
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)

    def vjp(g):
        if not keepdims:
            kept = [1 if i in axes else n for i, n in enumerate(shape)]
            g = g.reshape(kept)
        return (np.broadcast_to(g, shape),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp, "sum")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the trailing two axes (used to turn row pools into columns)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"swap_last2 needs ndim >= 2, got shape {x.shape}")
    return _result(
        np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap"
    )


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``; the gradient splits back per input."""
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tensors, vjp, "concat")


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul needs matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    ad, bd = a.data, b.data

    def vjp(g):
        da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return da, db

    return _result(ad @ bd, (a, b), vjp, "matmul")


def _contract_channel_outer(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sum g (..., O, A, B) against x (..., C, A, B) into an (O, C) matrix."""
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
    return np.tensordot(g, x, axes=(axes, axes))


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-position linear map over the channel axis.

    ``x`` is ``(..., C_in, A, B)`` and ``w`` is ``(C_out, C_in)``; every
    ``(A, B)`` position is mapped independently.  ``bias``, when given, is a
    length-``C_out`` vector added per output channel.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise ValueError(f"conv1x1 weight must be 2-d, got shape {w.shape}")
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ValueError(
            f"conv1x1: input shape {x.shape} does not match weight shape {w.shape}"
        )
    xd, wd = x.data, w.data
    out_data = np.einsum("oc,...cab->...oab", wd, xd)
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ValueError(
                f"conv1x1 bias shape {bias.shape} does not match weight shape {w.shape}"
            )
        out_data = out_data + bias.data[:, None, None]
        parents = (x, w, bias)

    def vjp(g):
        dx = np.einsum("oc,...oab->...cab", wd, g)
        dw = _contract_channel_outer(g, xd)
        if bias is None:
            return dx, dw
        db = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 3))
        return dx, dw, db

    return _result(out_data, parents, vjp, "conv1x1")


def temporal_conv(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """1-d convolution along the frame axis, independent per joint.

    ``x`` is ``(..., C_in, T, V)`` and ``w`` is ``(C_out, C_in, k)`` with odd
    ``k``.  The input is zero-padded by ``(k-1)/2`` on both sides so the
    output has ``ceil(T / stride)`` frames.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3:
        raise ValueError(f"temporal_conv weight must be 3-d, got shape {w.shape}")
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ValueError(
            f"temporal_conv: input shape {x.shape} does not match weight shape {w.shape}"
        )
    k = w.shape[2]
    t_in = x.shape[-2]
    if k % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {k}")
    if k >= 2 * t_in:
        raise ValueError(f"temporal kernel size {k} too large for {t_in} frames")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    pad = (k - 1) // 2
    t_out = -(-t_in // stride)
    span = (t_out - 1) * stride + 1

    pad_width = [(0, 0)] * x.ndim
    pad_width[-2] = (pad, pad)
    xp = np.pad(x.data, pad_width)
    wd = w.data

    out_data = None
    for j in range(k):
        window = xp[..., j : j + span : stride, :]
        term = np.einsum("oc,...ctv->...otv", wd[:, :, j], window)
        out_data = term if out_data is None else out_data + term

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for j in range(k):
            window = xp[..., j : j + span : stride, :]
            dw[:, :, j] = _contract_channel_outer(g, window)
            dxp[..., j : j + span : stride, :] += np.einsum(
                "oc,...otv->...ctv", wd[:, :, j], g
            )
        dx = dxp[..., pad : pad + t_in, :]
        return dx, dw

    return _result(out_data, (x, w), vjp, "temporal_conv")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``loss`` must be a scalar.  The tape is traversed once in reverse
    topological order; repeated calls keep adding into ``grad`` until the
    leaves are explicitly zeroed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.accumulate_grad(g)
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = flowing.get(id(parent))
            flowing[id(parent)] = pg if held is None else held + pg


# ---------------------------------------------------------------------------
# binary serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MDRT"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def write_tensor(f, x) -> None:
    """Append one tensor record to a binary stream.

    Layout: magic ``MDRT``, version u32, dtype code u8, rank u8, dims as
    little-endian u64, then the raw buffer little-endian.  Records are
    self-delimiting, so streams can hold several back to back.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for serialization")
    f.write(_MAGIC)
    f.write(struct.pack("<I", _VERSION))
    f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(f) -> np.ndarray:
    """Read one tensor record written by :func:`write_tensor`."""
    head = f.read(4)
    if head != _MAGIC:
        raise FormatError(f"bad magic {head!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != _VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    code, rank = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(f, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensor(path, x) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
