# losses.py (对抗 / 循环一致 / 身份映射 / 两步对抗损失 + 总目标)

import logging
import math
from dataclasses import asdict, dataclass, fields

import config
from errors import ValidationError
from tensor_autodiff import Tensor, clamp, l1_distance, log, tensor_mean
from utils.csv_io import write_result_csv

logger = logging.getLogger(__name__)

# 判别器损失的理论上限：两项都被钳到 ε 时
D_TERM_CEILING = -2.0 * math.log(config.PROB_CLAMP_EPS)


@dataclass
class LossWeights:
    lambda_cyc: float = config.LAMBDA_CYC
    lambda_id: float = config.LAMBDA_ID
    id_anneal_step: int | None = None   # 从这一步起 λ_id = 0；None 表示不退火

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.lambda_id < 0:
            raise ValidationError(f"loss weights must be non-negative: {self}")
        if self.id_anneal_step is not None and self.id_anneal_step < 0:
            raise ValidationError(f"id_anneal_step must be >= 0, got {self.id_anneal_step}")

    def identity_weight(self, step: int) -> float:
        if self.id_anneal_step is not None and step >= self.id_anneal_step:
            return 0.0
        return self.lambda_id

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _clamped(p: Tensor) -> Tensor:
    eps = config.PROB_CLAMP_EPS
    return clamp(p, eps, 1.0 - eps)


def generator_term(d_fake: Tensor) -> Tensor:
    """非饱和形式：−mean(log D(G(x)))。"""
    return -tensor_mean(log(_clamped(d_fake)))


def adv_loss(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """返回 (d_term, g_term)。期望用 batch × patch 的平均实现。"""
    d_term = -tensor_mean(log(_clamped(d_real))) - tensor_mean(log(1.0 - _clamped(d_fake)))
    return d_term, generator_term(d_fake)


def adv2_loss(d2_real: Tensor, d2_cycled: Tensor) -> tuple[Tensor, Tensor]:
    """两步对抗：D′ 区分真实数据和循环重建的数据，形式与 adv_loss 相同。"""
    return adv_loss(d2_real, d2_cycled)


def cycle_loss(x: Tensor, x_cycled: Tensor, y: Tensor, y_cycled: Tensor) -> Tensor:
    return l1_distance(x, x_cycled) + l1_distance(y, y_cycled)


def identity_loss(x: Tensor, g_yx_of_x: Tensor, y: Tensor, g_xy_of_y: Tensor) -> Tensor:
    """G_{Y→X} 作用在 x 上、G_{X→Y} 作用在 y 上，输出应当不变。"""
    return l1_distance(x, g_yx_of_x) + l1_distance(y, g_xy_of_y)


@dataclass
class LossParts:
    """一个 batch 的全部分项。分项可以是 Tensor（训练时）或 float（测试/记录时）。"""

    g_adv_xy: object = 0.0
    g_adv_yx: object = 0.0
    cycle: object = 0.0
    identity: object = 0.0
    g_adv2_xyx: object = 0.0
    g_adv2_yxy: object = 0.0
    d_adv_x: object = 0.0
    d_adv_y: object = 0.0
    d_adv2_x: object = 0.0
    d_adv2_y: object = 0.0

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.item() if isinstance(value, Tensor) else float(value)
        return out


def generator_objective(parts: LossParts, weights: LossWeights, step: int = 0):
    return (
        parts.g_adv_xy
        + parts.g_adv_yx
        + weights.lambda_cyc * parts.cycle
        + weights.identity_weight(step) * parts.identity
        + parts.g_adv2_xyx
        + parts.g_adv2_yxy
    )


def discriminator_objective(parts: LossParts):
    return parts.d_adv_x + parts.d_adv_y + parts.d_adv2_x + parts.d_adv2_y


def full_objective(parts: LossParts, weights: LossWeights, step: int = 0) -> tuple:
    """(生成器目标, 判别器目标)。"""
    return generator_objective(parts, weights, step), discriminator_objective(parts)


def check_saturation(d_term: float, name: str) -> None:
    if d_term >= 0.99 * D_TERM_CEILING:
        logger.warning("⚠️ 损失: %s = %.4f 接近钳位上限 %.4f，判别器已饱和", name, d_term, D_TERM_CEILING)


class LossLog:
    """逐步损失记录，写成 `step,loss_name,value` 的 CSV。"""

    HEADER = ["step", "loss_name", "value"]

    def __init__(self, rows: list | None = None):
        self.rows: list[tuple[int, str, float]] = list(rows or [])

    def add(self, step: int, values: dict[str, float]) -> None:
        for name, value in values.items():
            self.rows.append((step, name, float(value)))

    def series(self, name: str) -> list[float]:
        return [v for _, n, v in self.rows if n == name]

    def write(self, path, cfg_hash: str) -> None:
        write_result_csv(path, self.HEADER, self.rows, cfg_hash)

    @classmethod
    def from_csv_rows(cls, rows: list[dict], before_step: int | None = None) -> "LossLog":
        parsed = [(int(r["step"]), r["loss_name"], float(r["value"])) for r in rows]
        if before_step is not None:
            parsed = [r for r in parsed if r[0] < before_step]
        return cls(parsed)
