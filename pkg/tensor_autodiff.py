# tensor_autodiff.py (动态计算图 + 反向自动微分)

import contextlib
import itertools
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import NumericError, ShapeError, ValidationError

TNSR_MAGIC = b"TNSR"

_node_ids = itertools.count()
_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """在此上下文中构造的张量不记录计算图（评估、判别器前向的 fake 分支等）。"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]
    value: np.ndarray = field(repr=False)


class Tensor:
    """float64 稠密张量。创建后数据不可变，只有 grad 缓冲区会被写入。"""

    # 让 ndarray 与 Tensor 混合运算时走 Tensor 的反射运算符
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ValidationError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor of shape {arr.shape} contains non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str, inputs: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op}: produced non-finite values")
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out._node = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out._node = Node(next(_node_ids), op, inputs, backward, arr)
        return out

    # --- 基本属性 ---
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, value) -> None:
        """只给优化器和检查点加载使用：原地替换叶子参数的值。"""
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError("assign_", self.data.shape, arr.shape)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"assign_: non-finite values for parameter of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --- 反向传播 ---
    def backward(self) -> None:
        """
        对标量 loss 做反向传播。叶子节点的 grad 是累加的：连续调用两次而不清零，
        梯度会叠加（这是约定行为，不是错误）。
        """
        if self.data.size != 1:
            _raise_not_scalar(self)
        seed = np.ones_like(self.data)
        if self._node is None:
            if self.requires_grad:
                _accumulate(self, seed)
            return

        pending = {self._node.id: seed}
        for node in reversed(Graph.of(self).nodes):
            g = pending.pop(node.id, None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    _accumulate(t, gi)
                elif t._node.id in pending:
                    pending[t._node.id] = pending[t._node.id] + gi
                else:
                    pending[t._node.id] = gi

    # --- 运算符 ---
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
            raise ValidationError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


@dataclass
class Graph:
    """从某个输出可达的节点，按插入顺序排列（即拓扑序）。"""

    nodes: list

    @classmethod
    def of(cls, output: Tensor) -> "Graph":
        seen = {}
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for t in node.inputs:
                if t._node is not None and t._node.id not in seen:
                    stack.append(t._node)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def is_acyclic(self) -> bool:
        return all(
            t._node.id < node.id for node in self.nodes for t in node.inputs if t._node is not None
        )

    def __len__(self):
        return len(self.nodes)


def _raise_not_scalar(t: Tensor):
    raise ValidationError(f"backward/item requires a scalar tensor, got shape {t.shape}")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ==============================================================================
# --- 逐元素运算 ---
# ==============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._wrap(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._wrap(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._wrap(a.data * b.data, "mul", (a, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return Tensor._wrap(y, "sigmoid", (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log: input must be strictly positive")

    def backward(g):
        return (g / x.data,)

    return Tensor._wrap(np.log(x.data), "log", (x,), backward)


def tensor_abs(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._wrap(np.abs(x.data), "abs", (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    def backward(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return Tensor._wrap(np.clip(x.data, lo, hi), "clamp", (x,), backward)


def glu(a: Tensor, b: Tensor) -> Tensor:
    """门控线性单元: a ⊙ σ(b)。"""
    if a.shape != b.shape:
        raise ShapeError("glu", a.shape, b.shape)
    return mul(a, sigmoid(b))


def glu_split(x: Tensor, axis: int = 1) -> Tensor:
    """把某一轴的通道对半切开再做 GLU。"""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError("glu_split", x.shape, (f"even extent on axis {axis}",))
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, n // 2)
    hi[axis] = slice(n // 2, n)
    return glu(x[tuple(lo)], x[tuple(hi)])


# ==============================================================================
# --- 归约与形状 ---
# ==============================================================================

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return Tensor._wrap(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(1, np.size(out))

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return Tensor._wrap(out, "mean", (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._wrap(out, "reshape", (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._wrap(x.data.transpose(axes), "transpose", (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor._wrap(out, "getitem", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._wrap(out, "concat", tensors, backward)


# ==============================================================================
# --- 线性代数、softmax、归一化 ---
# ==============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._wrap(out, "matmul", (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(y, "softmax", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """最后一维上的层归一化，gain/bias 形状为 (D,)。"""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return Tensor._wrap(out, "layer_norm", (x, gain, bias), backward)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """逐元素 |a-b| 的平均值。"""
    if a.shape != b.shape:
        raise ShapeError("l1_distance", a.shape, b.shape)
    return tensor_mean(tensor_abs(sub(a, b)))


# ==============================================================================
# --- 卷积与上采样 ---
# ==============================================================================

def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """x: (N,C,H,W)，w: (O,C,kh,kw)，b: (O,)；零填充。"""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N,Ho,Wo,C,kh,kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        grads = (gx, gw)
        return grads + (g.sum(axis=(0, 2, 3)),) if b is not None else grads

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._wrap(out, "conv2d", inputs, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N,C,L)，w: (O,C,k)。实现为高度为 1 的 conv2d。"""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    n, c, length = x.shape
    o, _, k = w.shape
    if conv_output_size(length, k, stride, padding) < 1:
        raise ShapeError("conv1d", x.shape, w.shape)
    out = conv2d(
        reshape(x, (n, c, 1, length)),
        reshape(w, (o, c, 1, k)),
        b,
        stride=(1, stride),
        padding=(0, padding),
    )
    return reshape(out, (n, o, out.shape[-1]))


def pixel_shuffle_width(x: Tensor, factor: int) -> Tensor:
    """
    子像素上采样（通道 -> 宽度）：(N, C*r, H, W) -> (N, C, H, W*r)。
    三维输入 (N, C*r, L) -> (N, C, L*r) 同理。
    """
    if x.ndim == 3:
        n, cr, length = x.shape
        return reshape(pixel_shuffle_width(reshape(x, (n, cr, 1, length)), factor), (n, cr // factor, length * factor))
    if x.ndim != 4 or x.shape[1] % factor:
        raise ShapeError("pixel_shuffle_width", x.shape, (f"channels divisible by {factor}",))
    n, cr, h, w = x.shape
    c = cr // factor
    y = reshape(x, (n, c, factor, h, w))
    y = transpose(y, (0, 1, 3, 4, 2))
    return reshape(y, (n, c, h, w * factor))


# ==============================================================================
# --- 序列化 (TNSR) ---
# ==============================================================================

def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    head = TNSR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != TNSR_MAGIC:
        raise ValidationError("not a TNSR blob (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise ValidationError(f"TNSR payload size mismatch for shape {shape}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def save_tensor(t, fh: BinaryIO) -> None:
    fh.write(tensor_to_bytes(t))


def load_tensor(fh: BinaryIO) -> np.ndarray:
    return tensor_from_bytes(fh.read())
