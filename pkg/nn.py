# nn.py (带参数的网络层)

import math
from typing import Iterator

import numpy as np

import config
from errors import ShapeError, ValidationError
from tensor_autodiff import (
    Tensor,
    conv1d,
    conv2d,
    glu_split,
    layer_norm,
    matmul,
    softmax,
    transpose,
)


class Module:
    """参数容器。参数 = requires_grad 的叶子张量，按属性定义顺序遍历。"""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValidationError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            p.assign_(state[name])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (in_dim, out_dim), in_dim)
        self.bias = _zeros((out_dim,))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        self.weight = _uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel)
        self.bias = _zeros((out_ch,))
        self._stride = stride
        self._padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator, stride=1, padding=0):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.weight = _uniform(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw)
        self.bias = _zeros((out_ch,))
        self._stride = stride
        self._padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class LayerNorm(Module):
    """对最后一维归一化。"""

    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = _zeros((dim,))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=config.LAYER_NORM_EPS)


class ChannelNorm(Module):
    """
    对通道轴做层归一化（代替主干网络里的 instance norm）。
    每个时间步独立归一化，不会在时间轴上混合信息。
    """

    def __init__(self, channels: int):
        self.norm = LayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            return transpose(self.norm(transpose(x, (0, 2, 1))), (0, 2, 1))
        return transpose(self.norm(transpose(x, (0, 2, 3, 1))), (0, 3, 1, 2))


def sinusoidal_embedding(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValidationError(f"model_dim {dim} is not divisible by heads {heads}")
        self._heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        return transpose(x.reshape(n, t, self._heads, d // self._heads), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self._heads))
        context = matmul(softmax(scores, axis=-1), v)
        return self.out(transpose(context, (0, 2, 1, 3)).reshape(n, t, d))


class TransformerLayer(Module):
    """Pre-LN 编码层，前馈部分用 GLU 门控。"""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff_in = Linear(dim, 2 * ff_dim, rng)
        self.ff_out = Linear(ff_dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.ff_out(glu_split(self.ff_in(self.norm2(x)), axis=-1))


class TransformerEncoder(Module):
    """标准全注意力编码器：输入加正弦位置编码，输出前做层归一化。"""

    def __init__(self, layers: int, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self._dim = dim
        self.layers = [TransformerLayer(dim, heads, ff_dim, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def forward(self, tokens: Tensor, positions: np.ndarray | None = None) -> Tensor:
        """tokens: (N, T, D)。positions 可传入自定义位置表（跨模态拼接时用）。"""
        if tokens.ndim != 3 or tokens.shape[-1] != self._dim:
            raise ShapeError("transformer", tokens.shape, (None, None, self._dim))
        table = sinusoidal_embedding(tokens.shape[1], self._dim) if positions is None else positions
        x = tokens + Tensor(table[None])
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)
