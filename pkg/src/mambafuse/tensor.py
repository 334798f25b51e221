"""Dense tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 or float64) and records the
operations producing it, so that calling :meth:`Tensor.backward` on a
scalar loss populates ``.grad`` on every node that contributed to it.
The graph is define-by-run: each forward call builds fresh nodes, and
parameters are long-lived leaf tensors reused across steps.

Elementwise math, reductions and shape manipulation live here as methods;
spatial/sequence primitives (convolution, pooling, interpolation, the
selective scan) live in :mod:`mambafuse.ops`.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import GraphError, IntegrityError, ShapeError

DTYPES = {"single": np.float32, "double": np.float64}


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ShapeError(f"unknown precision {precision!r}, expected 'single' or 'double'")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting expanded, back to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=()):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._consumed = False

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def make(data, parents):
        """Create a graph node; gradient tracking propagates from the parents."""
        requires = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=requires,
                      _parents=tuple(p for p in parents if p.requires_grad))

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor.make(self.data + other.data, (self, other))

        def backward(g):
            self._accumulate(unbroadcast(g, self.shape))
            other._accumulate(unbroadcast(g, other.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = Tensor.make(self.data - other.data, (self, other))

        def backward(g):
            self._accumulate(unbroadcast(g, self.shape))
            other._accumulate(unbroadcast(-g, other.shape))

        out._backward = backward
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor.make(self.data * other.data, (self, other))

        def backward(g):
            self._accumulate(unbroadcast(g * other.data, self.shape))
            other._accumulate(unbroadcast(g * self.data, other.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = Tensor.make(self.data / other.data, (self, other))

        def backward(g):
            self._accumulate(unbroadcast(g / other.data, self.shape))
            other._accumulate(unbroadcast(-g * self.data / (other.data * other.data),
                                          other.shape))

        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        out = Tensor.make(-self.data, (self,))

        def backward(g):
            self._accumulate(-g)

        out._backward = backward
        return out

    def __pow__(self, exponent: float):
        out = Tensor.make(self.data ** exponent, (self,))

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        out._backward = backward
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects (..., k) @ (k, n); got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        out = Tensor.make(a @ b, (self, other))

        def backward(g):
            self._accumulate(g @ b.T)
            other._accumulate(a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

        out._backward = backward
        return out

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self):
        e = np.exp(self.data)
        out = Tensor.make(e, (self,))

        def backward(g):
            self._accumulate(g * e)

        out._backward = backward
        return out

    def log(self):
        out = Tensor.make(np.log(self.data), (self,))

        def backward(g):
            self._accumulate(g / self.data)

        out._backward = backward
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor.make(s, (self,))

        def backward(g):
            self._accumulate(g * s * (1.0 - s))

        out._backward = backward
        return out

    def relu(self):
        out = Tensor.make(np.maximum(self.data, 0), (self,))

        def backward(g):
            self._accumulate(g * (self.data > 0))

        out._backward = backward
        return out

    def softplus(self):
        # log(1 + e^x) written to avoid overflow for large |x|
        x = self.data
        out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
        out = Tensor.make(out_data, (self,))

        def backward(g):
            self._accumulate(g / (1.0 + np.exp(-x)))

        out._backward = backward
        return out

    # -- reductions --------------------------------------------------------

    def _expand_reduced(self, g, axis, keepdims):
        if axis is None:
            return np.broadcast_to(g, self.shape)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for ax in sorted(a % self.ndim for a in axes):
                g = np.expand_dims(g, ax)
        return np.broadcast_to(g, self.shape)

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor.make(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def backward(g):
            self._accumulate(self._expand_reduced(g, axis, keepdims).copy())

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size / max(out_data.size, 1)
        out = Tensor.make(out_data, (self,))

        def backward(g):
            self._accumulate(self._expand_reduced(g, axis, keepdims) / count)

        out._backward = backward
        return out

    def max(self, axis=None, keepdims: bool = False):
        out_data = self.data.max(axis=axis, keepdims=keepdims)
        out = Tensor.make(out_data, (self,))

        def backward(g):
            # elements attaining the max share the gradient equally on ties
            max_kept = self.data.max(axis=axis, keepdims=True)
            mask = self.data == max_kept
            counts = mask.sum(axis=axis, keepdims=True)
            g_kept = g if keepdims else _keepdims(np.asarray(g), axis, self.ndim)
            self._accumulate(g_kept * mask / counts)

        out._backward = backward
        return out

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor.make(self.data.reshape(shape), (self,))

        def backward(g):
            self._accumulate(g.reshape(self.shape))

        out._backward = backward
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out = Tensor.make(self.data.transpose(axes), (self,))

        def backward(g):
            self._accumulate(g.transpose(inverse))

        out._backward = backward
        return out

    def __getitem__(self, key):
        out = Tensor.make(self.data[key], (self,))

        def backward(g):
            buf = np.zeros_like(self.data)
            buf[key] += g
            self._accumulate(buf)

        out._backward = backward
        return out

    # -- reverse pass ---------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss; fills ``.grad`` on the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it before "
                             "differentiating again")
        order = self._topological_order()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._consumed = True

    def _topological_order(self):
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order


def _keepdims(arr: np.ndarray, axis, ndim: int) -> np.ndarray:
    """Re-insert reduced axes of a reduction output as size-1 dims."""
    if axis is None:
        return arr.reshape((1,) * ndim)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in sorted(a % ndim for a in axes):
        arr = np.expand_dims(arr, ax)
    return arr


# -- tensor dump format ----------------------------------------------------
#
# Layout: 8-byte magic, 1 precision byte (4=single, 8=double), 1 rank byte,
# rank x 8-byte little-endian dimension sizes, then row-major little-endian
# float payload.

MAGIC = b"MFTENSR1"
_PRECISION_BYTE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_BYTE_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_tensor(array: np.ndarray, path) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in _PRECISION_BYTE:
        raise IntegrityError(f"unsupported dtype {array.dtype} for tensor dump")
    prec = _PRECISION_BYTE[array.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", prec, array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(array.astype(_BYTE_DTYPE[prec], copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a tensor dump (bad magic)")
    prec, rank = struct.unpack("<BB", blob[8:10])
    if prec not in _BYTE_DTYPE:
        raise IntegrityError(f"{path}: unknown precision byte {prec}")
    header_end = 10 + 8 * rank
    if len(blob) < header_end:
        raise IntegrityError(f"{path}: truncated dimension header")
    shape = struct.unpack(f"<{rank}Q", blob[10:header_end]) if rank else ()
    expected = int(np.prod(shape, dtype=np.int64)) * prec if shape else prec
    payload = blob[header_end:]
    if len(payload) != expected:
        raise IntegrityError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=_BYTE_DTYPE[prec]).reshape(shape)
    native = np.float32 if prec == 4 else np.float64
    return arr.astype(native, copy=True)
