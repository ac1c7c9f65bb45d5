"""
Reverse-mode automatic differentiation on top of numpy.

Values are 64-bit, row-major numpy arrays wrapped in :class:`Tensor`. Differentiable operations record a node on the
active :class:`Tape` (if any); :func:`backward` replays the tape in reverse and returns a :class:`GradientMap`.

Typical use::

    with Tape() as tape:
        tape.watch(x)
        loss = softmax_logloss(model.forward(x), labels)
        grads = backward(loss)
    grads[x]  # numpy array shaped like x

Broadcasting follows numpy (trailing dimensions are aligned, extents of 1 stretch). A tape is single-use: after
:func:`backward` it is consumed. Tapes are kept per thread, so concurrent attacks each own their tape.
"""
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import struct
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import logging
logger = logging.getLogger(__name__)


TENSOR_MAGIC = b"PDAT"

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]


class TapeError(RuntimeError):
    """Raised on use of an inactive, missing or already consumed tape."""
    pass


class TapeNode:
    """One entry of a tape: operation id, parent node indices, backward closure and the produced tensor."""
    __slots__ = ("tape", "index", "op", "parents", "backward_fn", "tensor")

    def __init__(self, tape: "Tape", index: int, op: str, parents: Tuple[Optional[int], ...],
                 backward_fn: Optional[BackwardFn], tensor: "Tensor"):
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.tensor = tensor


class Tensor:
    """
    n-dimensional array of 64-bit reals participating in the gradient tape.

    :param data: array-like value (copied into a contiguous float64 array)
    """
    __array_priority__ = 100

    def __init__(self, data: Any):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.tape_node = None  # type: Optional[TapeNode]
        self.grad = None  # type: Optional[np.ndarray]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor, got shape {}".format(self.shape))
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return "Tensor(shape={}, taped={})".format(self.shape, self.tape_node is not None)

    def __len__(self):
        return len(self.data)

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1. / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def max(self, axis: int) -> "Tensor":
        return tensor_max(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------------------------------------------------
# Tape

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """
    Innermost active tape of the calling thread.

    :return: tape or None
    """
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    Append-only record of differentiable operations. Use as a context manager; the tape is active inside the
    `with` block. Nodes are appended in execution order, so every node's parents precede it.
    """
    def __init__(self):
        self.nodes = []  # type: List[TapeNode]
        self.active = False
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _tape_stack().append(self)
        self.active = True
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.active = False
        return False

    def holds(self, tensor: Tensor) -> bool:
        node = tensor.tape_node
        return node is not None and node.tape is self

    def watch(self, *tensors: Tensor):
        """
        Register tensors as leaves whose gradients :func:`backward` should report.

        :param tensors: leaf tensors (e.g. model parameters, an input batch)
        """
        if self.consumed:
            raise TapeError("cannot watch on a consumed tape")
        for t in tensors:
            if not self.holds(t):
                t.tape_node = self._append("leaf", (), None, t)

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn: BackwardFn):
        if self.consumed:
            return
        parents = tuple(t.tape_node.index if self.holds(t) else None for t in inputs)
        if all(p is None for p in parents):
            return  # constant w.r.t. every watched leaf
        out.tape_node = self._append(op, parents, backward_fn, out)

    def _append(self, op: str, parents: Tuple[Optional[int], ...], backward_fn: Optional[BackwardFn],
                tensor: Tensor) -> TapeNode:
        node = TapeNode(self, len(self.nodes), op, parents, backward_fn, tensor)
        self.nodes.append(node)
        return node


class GradientMap:
    """Gradients produced by :func:`backward`, looked up by tensor."""
    def __init__(self):
        self._grads = dict()  # type: Dict[int, Tuple[Tensor, np.ndarray]]

    def _set(self, tensor: Tensor, grad: np.ndarray):
        self._grads[id(tensor)] = (tensor, grad)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)][1]
        except KeyError:
            raise KeyError("no gradient recorded for {}".format(tensor))

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def get(self, tensor: Tensor, default: Any = None) -> Any:
        entry = self._grads.get(id(tensor))
        return default if entry is None else entry[1]

    def __len__(self):
        return len(self._grads)

    def items(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        return iter(self._grads.values())


def backward(loss: Tensor) -> GradientMap:
    """
    Reverse-mode sweep from a scalar loss. Every node of the tape receives a gradient of the shape of its value
    (also stored in `tensor.grad`) and the tape is consumed.

    :param loss: scalar tensor recorded on an active tape
    :return: gradient map
    """
    if loss.size != 1:
        raise ValueError("backward() needs a scalar loss, got shape {}".format(loss.shape))

    node = loss.tape_node
    if node is None:
        tape = active_tape()
        if tape is None:
            raise TapeError("loss was not recorded on an active tape")
        # loss does not depend on any watched leaf
        return _consume(tape, dict())
    tape = node.tape
    if tape.consumed:
        raise TapeError("tape already consumed")

    grads = {node.index: np.ones(loss.shape)}  # type: Dict[int, np.ndarray]
    for current in reversed(tape.nodes[:node.index + 1]):
        g = grads.get(current.index)
        if g is None or current.backward_fn is None:
            continue
        needs = tuple(p is not None for p in current.parents)
        parent_grads = current.backward_fn(g, needs)
        for p, pg in zip(current.parents, parent_grads):
            if p is None or pg is None:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return _consume(tape, grads)


def _consume(tape: Tape, grads: Dict[int, np.ndarray]) -> GradientMap:
    result = GradientMap()
    for n in tape.nodes:
        g = grads.get(n.index)
        g = np.zeros(n.tensor.shape) if g is None else np.asarray(g, dtype=np.float64)
        n.tensor.grad = g
        result._set(n.tensor, g)
    tape.consumed = True
    tape.nodes = []
    return result


def _make(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------------------------------------------------
# Element-wise and linear algebra operations

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError("shape mismatch in {}: {} vs {}".format(op, a.shape, b.shape))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return _make("add", (a, b), a.data + b.data, _backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)
    return _make("sub", (a, b), a.data - b.data, _backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)
    return _make("mul", (a, b), a.data * b.data, _backward)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _make("neg", (a,), -a.data, lambda g, needs: (-g,))


def square(a: Any) -> Tensor:
    a = as_tensor(a)
    return _make("square", (a,), a.data * a.data, lambda g, needs: (2. * a.data * g,))


def matmul(a: Any, b: Any) -> Tensor:
    """
    Matrix product of two 2-D tensors.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError("shape mismatch in matmul: {} vs {}".format(a.shape, b.shape))

    def _backward(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)
    return _make("matmul", (a, b), a.data @ b.data, _backward)


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, 0.), lambda g, needs: (g * mask,))


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError("cannot reshape {} to {}".format(a.shape, tuple(shape)))
    return _make("reshape", (a,), value, lambda g, needs: (g.reshape(a.shape),))


def tensor_sum(a: Any, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make("sum", (a,), value, _backward)


def tensor_mean(a: Any) -> Tensor:
    a = as_tensor(a)
    return mul(tensor_sum(a), 1. / a.size)


def tensor_max(a: Any, axis: int) -> Tensor:
    """
    Maximum along one axis; the gradient flows to the first arg-max.
    """
    a = as_tensor(a)
    index = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    value = np.take_along_axis(a.data, index, axis=axis).squeeze(axis)

    def _backward(g, needs):
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, index, np.expand_dims(g, axis), axis=axis)
        return (grad,)
    return _make("max", (a,), value, _backward)


# ---------------------------------------------------------------------------------------------------------------------
# Convolution and loss

def conv2d(x: Any, kernel: Any, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation.

    :param x: input of shape [N, C, H, W]
    :param kernel: filters of shape [F, C, kh, kw]
    :param stride: step between output positions (>= 1)
    :param padding: zero padding on each spatial border (>= 0)
    :return: output of shape [N, F, (H + 2 padding - kh) // stride + 1, (W + 2 padding - kw) // stride + 1]
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if int(stride) != stride or stride < 1:
        raise ValueError("invalid stride {}".format(stride))
    if int(padding) != padding or padding < 0:
        raise ValueError("invalid padding {}".format(padding))
    stride, padding = int(stride), int(padding)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError("shape mismatch in conv2d: {} vs {}".format(x.shape, kernel.shape))
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel {}x{} larger than padded input {}x{}".format(kh, kw, h + 2 * padding,
                                                                            w + 2 * padding))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    value = np.einsum("nchwij,fcij->nfhw", windows, kernel.data, optimize=True)

    def _backward(g, needs):
        grad_x, grad_k = None, None
        if needs[1]:
            grad_k = np.einsum("nchwij,nfhw->fcij", windows, g, optimize=True)
        if needs[0]:
            grad_xp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        np.einsum("nfhw,fc->nchw", g, kernel.data[:, :, i, j], optimize=True)
            grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
        return grad_x, grad_k
    return _make("conv2d", (x, kernel), value, _backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no tape)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_logloss(logits: Any, labels: Any, reduction: str = "mean") -> Tensor:
    """
    Cross-entropy of the softmax of `logits` against integer labels, with log-sum-exp stabilisation.

    :param logits: tensor of shape [N, m]
    :param labels: class indices of length N
    :param reduction: "mean" (scalar) or "none" (per-example losses)
    :return: loss tensor
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D, got shape {}".format(logits.shape))
    n, m = logits.shape
    if labels.shape != (n,):
        raise ValueError("shape mismatch in softmax_logloss: {} vs {}".format(logits.shape, labels.shape))
    if n and (labels.min() < 0 or labels.max() >= m):
        raise ValueError("labels outside [0, {})".format(m))
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite logits")
    if reduction not in ("mean", "none"):
        raise ValueError("unknown reduction '{}'".format(reduction))

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(n)
    per_example = -log_p[rows, labels]
    delta = np.exp(log_p)
    delta[rows, labels] -= 1.

    if reduction == "mean":
        return _make("logloss", (logits,), np.array(per_example.mean()),
                     lambda g, needs: (g * delta / n,))
    return _make("logloss", (logits,), per_example, lambda g, needs: (g[:, None] * delta,))


# ---------------------------------------------------------------------------------------------------------------------
# Serialization

def tensor_to_bytes(t: Any) -> bytes:
    """
    Little-endian encoding: magic "PDAT", u32 rank, rank x u32 extents, f64 payload (row-major).
    """
    data = as_tensor(t).data
    header = TENSOR_MAGIC + struct.pack("<I", data.ndim) + struct.pack("<{}I".format(data.ndim), *data.shape)
    return header + data.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buffer: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Decode one tensor starting at `offset`.

    :return: tensor and the offset just past it
    """
    if buffer[offset:offset + 4] != TENSOR_MAGIC:
        raise ValueError("bad tensor magic {!r}".format(bytes(buffer[offset:offset + 4])))
    if len(buffer) < offset + 8:
        raise ValueError("truncated tensor header")
    rank, = struct.unpack_from("<I", buffer, offset + 4)
    offset += 8
    if len(buffer) < offset + 4 * rank:
        raise ValueError("truncated tensor header")
    shape = struct.unpack_from("<{}I".format(rank), buffer, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    expected = 8 * count
    if len(buffer) < offset + expected:
        raise ValueError("truncated tensor payload: expected {} bytes, got {}".format(expected,
                                                                                    len(buffer) - offset))
    data = np.frombuffer(buffer, dtype="<f8", count=count, offset=offset).reshape(shape)
    return Tensor(data.astype(np.float64)), offset + expected


def save_tensor(path: str, t: Any):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path: str) -> Tensor:
    with open(path, "rb") as f:
        buffer = f.read()
    t, _ = tensor_from_bytes(buffer)
    return t
