# model.py (CycleDance 生成器 / 判别器 + 消融配置)

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

import config
from data import FeatureStats, pad_to_multiple
from errors import ValidationError
from nn import ChannelNorm, Conv1d, Conv2d, Module, TransformerEncoder, sinusoidal_embedding
from tensor_autodiff import (
    Tensor,
    concat,
    conv_output_size,
    glu_split,
    no_grad,
    pixel_shuffle_width,
    sigmoid,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass
class TransformerConfig:
    layers: int = config.TRANSFORMER_LAYERS
    heads: int = config.TRANSFORMER_HEADS
    model_dim: int = config.TRANSFORMER_MODEL_DIM
    ff_dim: int = config.TRANSFORMER_FF_DIM


@dataclass
class ArchConfig:
    base_channels: int = config.BASE_CHANNELS
    n_down_blocks: int = config.N_DOWN_BLOCKS
    n_res_blocks: int = config.N_RES_BLOCKS
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    use_motion_transformer: bool = True
    use_music_pathway: bool = True
    use_two_step_adv: bool = True
    motion_dim: int = config.MOTION_DIM
    music_dim: int = config.MUSIC_DIM

    def __post_init__(self):
        if isinstance(self.transformer, dict):
            self.transformer = TransformerConfig(**self.transformer)
        t = self.transformer
        sizes = (self.base_channels, self.n_down_blocks, t.layers, t.heads, t.model_dim, t.ff_dim, self.motion_dim, self.music_dim)
        if any(v <= 0 for v in sizes) or self.n_res_blocks < 0:
            raise ValidationError(f"architecture sizes must be positive: {asdict(self)}")
        if t.model_dim % t.heads:
            raise ValidationError(f"model_dim {t.model_dim} is not divisible by heads {t.heads}")

    @property
    def length_multiple(self) -> int:
        return 2 ** self.n_down_blocks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


# ==============================================================================
# --- 基本块 ---
# ==============================================================================

class DownBlock2d(Module):
    """2D 卷积下采样 + 通道归一化 + GLU。"""

    def __init__(self, in_ch, out_ch, rng, kernel=5, stride=2, padding=2):
        self.conv = Conv2d(in_ch, 2 * out_ch, kernel, rng, stride=stride, padding=padding)
        self.norm = ChannelNorm(2 * out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return glu_split(self.norm(self.conv(x)), axis=1)


class ResidualBlock1d(Module):
    def __init__(self, channels, rng, kernel=3):
        self.conv1 = Conv1d(channels, 2 * channels, kernel, rng, padding=kernel // 2)
        self.norm1 = ChannelNorm(2 * channels)
        self.conv2 = Conv1d(channels, channels, kernel, rng, padding=kernel // 2)
        self.norm2 = ChannelNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        h = glu_split(self.norm1(self.conv1(x)), axis=1)
        return x + self.norm2(self.conv2(h))


class UpBlock2d(Module):
    """卷积 + 子像素上采样（时间轴 x2）+ 通道归一化 + GLU。"""

    def __init__(self, in_ch, out_ch, rng, kernel=5):
        self.conv = Conv2d(in_ch, 4 * out_ch, kernel, rng, padding=kernel // 2)
        self.norm = ChannelNorm(2 * out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return glu_split(self.norm(pixel_shuffle_width(self.conv(x), 2)), axis=1)


def _channels(arch: ArchConfig) -> list[int]:
    return [arch.base_channels * 2 ** i for i in range(arch.n_down_blocks)]


class Pathway(Module):
    """
    单模态编码通路：2D 下采样块 -> 2D-1D 重排 -> 1D 残差块 -> (可选) 模态内 transformer。
    输入 (N, T, F)，输出 token (N, T/2^k, D)。
    """

    def __init__(self, features: int, arch: ArchConfig, rng, use_transformer: bool):
        t = arch.transformer
        in_ch, height = 1, features
        self.down = []
        for out_ch in _channels(arch):
            self.down.append(DownBlock2d(in_ch, out_ch, rng))
            in_ch, height = out_ch, conv_output_size(height, 5, 2, 2)
        self._channels, self._height = in_ch, height
        self.to_1d = Conv1d(in_ch * height, t.model_dim, 1, rng)
        self.to_1d_norm = ChannelNorm(t.model_dim)
        self.res = [ResidualBlock1d(t.model_dim, rng) for _ in range(arch.n_res_blocks)]
        self.transformer = TransformerEncoder(t.layers, t.model_dim, t.heads, t.ff_dim, rng) if use_transformer else None

    @property
    def grid(self) -> tuple[int, int]:
        return self._channels, self._height

    def forward(self, x: Tensor) -> Tensor:
        n, length, features = x.shape
        h = transpose(x, (0, 2, 1)).reshape(n, 1, features, length)
        for block in self.down:
            h = block(h)
        h = h.reshape(n, h.shape[1] * h.shape[2], h.shape[3])
        h = self.to_1d_norm(self.to_1d(h))
        for block in self.res:
            h = block(h)
        tokens = transpose(h, (0, 2, 1))
        return self.transformer(tokens) if self.transformer is not None else tokens


class Generator(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        t = arch.transformer
        self._arch = arch
        self.motion = Pathway(arch.motion_dim, arch, rng, use_transformer=arch.use_motion_transformer)
        self.music = None
        self.cross = None
        self.modality = None
        if arch.use_music_pathway:
            self.music = Pathway(arch.music_dim, arch, rng, use_transformer=True)
            self.cross = TransformerEncoder(t.layers, t.model_dim, t.heads, t.ff_dim, rng)
            # 模态嵌入：0 = 运动，1 = 音乐
            self.modality = Tensor(rng.normal(0.0, 0.02, size=(2, t.model_dim)), requires_grad=True)

        channels, height = self.motion.grid
        self._grid = (channels, height)
        self.to_2d = Conv1d(t.model_dim, channels * height, 1, rng)
        self.to_2d_norm = ChannelNorm(channels * height)
        ups = _channels(arch)[::-1] + [arch.base_channels]
        self.up = [UpBlock2d(c_in, c_out, rng) for c_in, c_out in zip(ups[:-1], ups[1:])]
        self.out = Conv1d(arch.base_channels * height, arch.motion_dim, 5, rng, padding=2)

    def _check(self, motion: Tensor, music: Tensor | None):
        arch = self._arch
        if motion.ndim != 3 or motion.shape[2] != arch.motion_dim:
            raise ValidationError(f"generator expects motion (N, T, {arch.motion_dim}), got {motion.shape}")
        length = motion.shape[1]
        if length < config.MIN_GENERATOR_LENGTH or length % arch.length_multiple:
            raise ValidationError(
                f"sequence length {length} must be >= {config.MIN_GENERATOR_LENGTH} and divisible by "
                f"{arch.length_multiple}; pad with data.pad_to_multiple first"
            )
        if arch.use_music_pathway:
            if music is None:
                raise ValidationError("this generator has a music pathway and requires music input")
            if music.shape != (motion.shape[0], length, arch.music_dim):
                raise ValidationError(f"music shape {music.shape} does not align with motion {motion.shape}")

    def forward(self, motion, music=None) -> Tensor:
        motion = _batched(motion)
        music = _batched(music) if (music is not None and self._arch.use_music_pathway) else None
        self._check(motion, music)
        n, length, _ = motion.shape

        tokens = self.motion(motion)
        if self.cross is not None:
            music_tokens = self.music(music)
            steps = tokens.shape[1]
            fused = concat([tokens + self.modality[0], music_tokens + self.modality[1]], axis=1)
            table = sinusoidal_embedding(steps, tokens.shape[2])
            # 两个模态在同一时间步共享位置编码
            tokens = self.cross(fused, positions=np.concatenate([table, table]))[:, :steps]

        channels, height = self._grid
        h = self.to_2d_norm(self.to_2d(transpose(tokens, (0, 2, 1))))
        h = h.reshape(n, channels, height, h.shape[2])
        for block in self.up:
            h = block(h)
        h = h.reshape(n, h.shape[1] * h.shape[2], h.shape[3])
        return transpose(self.out(h), (0, 2, 1))


class Discriminator(Module):
    """PatchGAN：2D 卷积下采样 + GLU，最后一层是卷积，sigmoid 输出每个 patch 的真假概率。"""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        c = arch.base_channels
        self._arch = arch
        self.stem = Conv2d(1, 2 * c, 3, rng, padding=1)
        self.down = []
        in_ch = c
        for i in range(arch.n_down_blocks):
            out_ch = c * 2 ** (i + 1)
            self.down.append(DownBlock2d(in_ch, out_ch, rng, kernel=3, stride=2, padding=1))
            in_ch = out_ch
        self.head = Conv2d(in_ch, 1, (1, 3), rng, padding=(0, 1))

    def patch_grid(self, length: int) -> tuple[int, int]:
        h, w = self._arch.motion_dim, length
        for _ in range(self._arch.n_down_blocks):
            h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
        return h, w

    def forward(self, motion) -> Tensor:
        x = _batched(motion)
        if x.ndim != 3 or x.shape[2] != self._arch.motion_dim or x.shape[1] < config.MIN_GENERATOR_LENGTH:
            raise ValidationError(f"discriminator expects (N, T>={config.MIN_GENERATOR_LENGTH}, {self._arch.motion_dim}), got {x.shape}")
        n, length, features = x.shape
        h = glu_split(self.stem(transpose(x, (0, 2, 1)).reshape(n, 1, features, length)), axis=1)
        for block in self.down:
            h = block(h)
        logits = self.head(h)
        return sigmoid(logits.reshape(n, logits.shape[2], logits.shape[3]))


def _batched(x):
    if x is None:
        return None
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


# ==============================================================================
# --- 完整模型 ---
# ==============================================================================

DIRECTIONS = ("x2y", "y2x")


class TransferModel(Module):
    """G_{X→Y}, G_{Y→X}, D_X, D_Y 以及两步对抗用的 D′_X, D′_Y。"""

    def __init__(self, arch: ArchConfig, seed: int = config.INIT_SEED):
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.seed = seed
        self.G_xy = Generator(arch, rng)
        self.G_yx = Generator(arch, rng)
        self.D_x = Discriminator(arch, rng)
        self.D_y = Discriminator(arch, rng)
        self.D2_x = Discriminator(arch, rng) if arch.use_two_step_adv else None
        self.D2_y = Discriminator(arch, rng) if arch.use_two_step_adv else None
        self.stats = {"X": FeatureStats.identity(), "Y": FeatureStats.identity()}

    def generators(self) -> list[Module]:
        return [self.G_xy, self.G_yx]

    def discriminators(self) -> list[Module]:
        return [d for d in (self.D_x, self.D_y, self.D2_x, self.D2_y) if d is not None]

    def generator_parameters(self) -> list[Tensor]:
        return [p for g in self.generators() for p in g.parameters()]

    def discriminator_parameters(self) -> list[Tensor]:
        return [p for d in self.discriminators() for p in d.parameters()]

    def generator_param_count(self) -> int:
        return sum(g.param_count() for g in self.generators())

    def transfer(self, direction: str, motion: np.ndarray, music: np.ndarray | None = None) -> np.ndarray:
        """原始（未归一化）特征进，原始特征出；长度不是 4 的倍数时先填充再裁剪。"""
        if direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        source, target = ("X", "Y") if direction == "x2y" else ("Y", "X")
        generator = self.G_xy if direction == "x2y" else self.G_yx
        if self.arch.use_music_pathway and music is None:
            raise ValidationError("this model requires music for transfer (--music)")

        x, n = pad_to_multiple(self.stats[source].normalize_motion(motion), self.arch.length_multiple)
        m = None
        if self.arch.use_music_pathway:
            m, _ = pad_to_multiple(self.stats[source].normalize_music(music), self.arch.length_multiple)
        with no_grad():
            out = generator(x, m).data[0, :n]
        return self.stats[target].denormalize_motion(out)


class IdentityTransfer:
    """调试用直通“模型”：输出即输入。"""

    arch = None

    def transfer(self, direction: str, motion: np.ndarray, music: np.ndarray | None = None) -> np.ndarray:
        if direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        return np.array(motion, dtype=np.float64)


# ==============================================================================
# --- 消融 ---
# ==============================================================================

@dataclass(frozen=True)
class AblationFlags:
    use_motion_transformer: bool
    use_music_pathway: bool
    curriculum: bool


ABLATIONS = {
    "baseline": AblationFlags(False, False, False),       # CycleGAN-VC2
    "transgan": AblationFlags(True, False, False),        # CycleTransGAN
    "transgan_cl": AblationFlags(True, False, True),      # CycleTransGAN + CL
    "crosstransgan": AblationFlags(True, True, False),    # CycleCrossTransGAN
    "cycledance": AblationFlags(True, True, True),
}


def ablation_arch(name: str, base: ArchConfig | None = None) -> tuple[ArchConfig, AblationFlags]:
    if name not in ABLATIONS:
        raise ValidationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    flags = ABLATIONS[name]
    arch = replace(
        base or ArchConfig(),
        use_motion_transformer=flags.use_motion_transformer,
        use_music_pathway=flags.use_music_pathway,
    )
    return arch, flags


def build_ablation(name: str, base: ArchConfig | None = None, seed: int = config.INIT_SEED) -> tuple[TransferModel, AblationFlags]:
    arch, flags = ablation_arch(name, base)
    model = TransferModel(arch, seed=seed)
    logger.info("🧩 模型: 构建消融 '%s'，生成器参数 %d", name, model.generator_param_count())
    return model, flags
