# training.py (两步对抗训练循环 + 长度课程学习 + 检查点)

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

import config
from data import FeatureStats, StyleDomain, UnpairedBatch, normalized_domain
from errors import NumericError, ShapeError, ValidationError
from losses import (
    LossLog,
    LossParts,
    LossWeights,
    adv2_loss,
    adv_loss,
    check_saturation,
    cycle_loss,
    discriminator_objective,
    generator_objective,
    generator_term,
    identity_loss,
)
from model import ArchConfig, TransferModel
from prefetcher import BatchPrefetcher
from tensor_autodiff import Tensor, load_tensor, no_grad, save_tensor
from utils.csv_io import config_hash, read_result_csv

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cycledance-checkpoint"
CHECKPOINT_VERSION = 1


# ==============================================================================
# --- 课程学习 ---
# ==============================================================================

@dataclass
class CurriculumSchedule:
    stages: list = field(default_factory=list)   # [(start_epoch, clip_len), ...]
    enabled: bool = True

    def __post_init__(self):
        self.stages = [(int(s), int(n)) for s, n in self.stages]
        if not self.stages:
            return
        starts = [s for s, _ in self.stages]
        lengths = [n for _, n in self.stages]
        if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValidationError(f"stage start epochs must increase strictly from 0: {starts}")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ValidationError(f"clip lengths must increase strictly: {lengths}")
        if any(n <= 0 or n % config.LENGTH_MULTIPLE for n in lengths):
            raise ValidationError(f"clip lengths must be positive multiples of {config.LENGTH_MULTIPLE}: {lengths}")

    @classmethod
    def default(cls, epochs: int, lengths=config.CURRICULUM_LENGTHS, enabled: bool = True) -> "CurriculumSchedule":
        """阶段起点在总 epoch 的 0, 1/3, 2/3 处（严格递增）。"""
        n = len(lengths)
        return cls([(max(k, k * epochs // n), length) for k, length in enumerate(lengths)], enabled)

    @property
    def boundaries(self) -> list[int]:
        return [s for s, _ in self.stages[1:]] if self.enabled else []

    def to_dict(self) -> dict:
        return {"stages": [list(s) for s in self.stages], "enabled": self.enabled}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumSchedule":
        return cls(d.get("stages", []), d.get("enabled", True))


def curriculum_length(schedule: CurriculumSchedule, epoch: int) -> int:
    """起点 ≤ epoch 的最后一个阶段的长度；关闭课程时总是最后阶段的长度。"""
    if not schedule.stages:
        raise ValidationError("curriculum schedule has no stages")
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if not schedule.enabled:
        return schedule.stages[-1][1]
    length = schedule.stages[0][1]
    for start, clip_len in schedule.stages:
        if start <= epoch:
            length = clip_len
    return length


# ==============================================================================
# --- 训练配置 ---
# ==============================================================================

@dataclass
class TrainConfig:
    epochs: int = config.DEFAULT_EPOCHS
    steps_per_epoch: int = config.DEFAULT_STEPS_PER_EPOCH
    batch_size: int = config.DEFAULT_BATCH_SIZE
    g_lr: float = config.G_LR
    d_lr: float = config.D_LR
    adam_beta1: float = config.ADAM_BETAS[0]
    adam_beta2: float = config.ADAM_BETAS[1]
    adam_eps: float = config.ADAM_EPS
    seed: int = config.DEFAULT_SEED
    weights: LossWeights | None = None
    schedule: CurriculumSchedule | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValidationError(
                f"need epochs >= 0, steps_per_epoch >= 1, batch_size >= 1; got "
                f"{self.epochs}, {self.steps_per_epoch}, {self.batch_size}"
            )
        if self.g_lr < 0 or self.d_lr < 0 or self.adam_eps <= 0:
            raise ValidationError("learning rates must be >= 0 and eps > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError(f"adam betas must lie in [0, 1): {self.adam_beta1}, {self.adam_beta2}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.weights is None:
            self.weights = LossWeights(id_anneal_step=int(config.ID_ANNEAL_FRACTION * self.total_steps))
        if isinstance(self.schedule, dict):
            self.schedule = CurriculumSchedule.from_dict(self.schedule)
        if self.schedule is None:
            self.schedule = CurriculumSchedule.default(self.epochs)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def with_curriculum(self, enabled: bool) -> "TrainConfig":
        return replace(self, schedule=replace(self.schedule, enabled=enabled))

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("weights", "schedule")}
        d["weights"] = self.weights.to_dict()
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown training config keys: {unknown}")
        return cls(**d)


# ==============================================================================
# --- Adam ---
# ==============================================================================

@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_update(param: np.ndarray, grad: np.ndarray, moments: AdamMoments, lr: float, beta1: float, beta2: float, eps: float) -> tuple[np.ndarray, AdamMoments]:
    """带偏差校正的一阶/二阶矩更新。返回新参数和新矩，不修改输入。"""
    if param.shape != grad.shape or param.shape != moments.m.shape:
        raise ShapeError("adam_update", param.shape, grad.shape)
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * grad
    v = beta2 * moments.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamMoments(m, v, t)


class Adam:
    def __init__(self, named_params, lr: float, beta1: float, beta2: float, eps: float = config.ADAM_EPS):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {name: AdamMoments.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            new_value, self.state[name] = adam_update(p.data, p.grad, self.state[name], self.lr, self.beta1, self.beta2, self.eps)
            p.assign_(new_value)

    def load_state(self, moments: dict[str, AdamMoments]) -> None:
        missing = sorted(set(self.params) - set(moments))
        if missing:
            raise ValidationError(f"optimizer state missing for {missing}")
        self.state = {name: moments[name] for name in self.params}


def _named(model: TransferModel, modules) -> list[tuple[str, Tensor]]:
    owner = {id(m): name for name, m in vars(model).items()}
    return [(f"{owner[id(m)]}.{n}", p) for m in modules for n, p in m.named_parameters()]


def make_optimizers(model: TransferModel, cfg: TrainConfig) -> tuple[Adam, Adam]:
    """生成器与判别器参数互不相交，各自一个优化器。"""
    g_opt = Adam(_named(model, model.generators()), cfg.g_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    d_opt = Adam(_named(model, model.discriminators()), cfg.d_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return g_opt, d_opt


# ==============================================================================
# --- 单步训练 ---
# ==============================================================================

@dataclass
class LossRecord:
    step: int
    clip_len: int
    values: dict[str, float]


@dataclass
class _Paths:
    fake_y: Tensor
    fake_x: Tensor
    cycled_x: Tensor
    cycled_y: Tensor
    id_x: Tensor
    id_y: Tensor


def _forward_paths(model: TransferModel, x, y, mx, my) -> _Paths:
    fake_y = model.G_xy(x, mx)
    fake_x = model.G_yx(y, my)
    return _Paths(
        fake_y=fake_y,
        fake_x=fake_x,
        cycled_x=model.G_yx(fake_y, mx),
        cycled_y=model.G_xy(fake_x, my),
        id_x=model.G_yx(x, mx),
        id_y=model.G_xy(y, my),
    )


def train_step(model: TransferModel, batch: UnpairedBatch, cfg: TrainConfig, g_opt: Adam, d_opt: Adam, step: int) -> LossRecord:
    """
    一步 = (1) 前向所有路径 (2) 用对抗 d_term 更新 D_X, D_Y, D′_X, D′_Y
    (3) 重新计算 fake，用生成器总目标更新两个生成器。判别器与生成器 1:1 交替。
    """
    x, y = Tensor(batch.x_motion), Tensor(batch.y_motion)
    use_music = model.arch.use_music_pathway
    mx = Tensor(batch.x_music) if use_music else None
    my = Tensor(batch.y_music) if use_music else None
    parts = LossParts()

    try:
        # --- 判别器 ---
        with no_grad():
            fixed = _forward_paths(model, x, y, mx, my)
        model.zero_grad()
        parts.d_adv_x, _ = adv_loss(model.D_x(x), model.D_x(fixed.fake_x))
        parts.d_adv_y, _ = adv_loss(model.D_y(y), model.D_y(fixed.fake_y))
        if model.arch.use_two_step_adv:
            parts.d_adv2_x, _ = adv2_loss(model.D2_x(x), model.D2_x(fixed.cycled_x))
            parts.d_adv2_y, _ = adv2_loss(model.D2_y(y), model.D2_y(fixed.cycled_y))
        d_total = discriminator_objective(parts)
        d_total.backward()
        d_opt.step()

        # --- 生成器 ---
        model.zero_grad()
        paths = _forward_paths(model, x, y, mx, my)
        parts.g_adv_xy = generator_term(model.D_y(paths.fake_y))
        parts.g_adv_yx = generator_term(model.D_x(paths.fake_x))
        parts.cycle = cycle_loss(x, paths.cycled_x, y, paths.cycled_y)
        parts.identity = identity_loss(x, paths.id_x, y, paths.id_y)
        if model.arch.use_two_step_adv:
            parts.g_adv2_xyx = generator_term(model.D2_x(paths.cycled_x))
            parts.g_adv2_yxy = generator_term(model.D2_y(paths.cycled_y))
        g_total = generator_objective(parts, cfg.weights, step)
        g_total.backward()
        g_opt.step()
        model.zero_grad()
    except NumericError as e:
        raise NumericError(f"step {step}: {e}") from e

    values = parts.as_floats()
    values["g_total"] = g_total.item()
    values["d_total"] = d_total.item()
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericError(f"step {step}: non-finite loss {values}")
    check_saturation(values["d_adv_x"], "d_adv_x")
    check_saturation(values["d_adv_y"], "d_adv_y")
    return LossRecord(step, batch.clip_len, values)


# ==============================================================================
# --- 检查点 ---
# ==============================================================================

@dataclass
class Checkpoint:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    moments: dict[str, AdamMoments]
    step: int
    epoch: int
    rng_state: dict
    config_hash: str
    stats: dict[str, dict]
    init_seed: int = config.INIT_SEED
    ablation: str = "cycledance"
    train_config: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: TransferModel, g_opt: Adam, d_opt: Adam, step: int, epoch: int, rng: np.random.Generator, cfg_hash: str, ablation: str, cfg: TrainConfig) -> "Checkpoint":
        moments = {**g_opt.state, **d_opt.state}
        return cls(
            arch=model.arch,
            params={k: np.array(v) for k, v in model.state_dict().items()},
            moments={k: AdamMoments(m.m.copy(), m.v.copy(), m.t) for k, m in moments.items()},
            step=step,
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            config_hash=cfg_hash,
            stats={k: s.to_dict() for k, s in model.stats.items()},
            init_seed=model.seed,
            ablation=ablation,
            train_config=cfg.to_dict(),
        )

    def build_model(self) -> TransferModel:
        model = TransferModel(self.arch, seed=self.init_seed)
        model.load_state_dict(self.params)
        model.stats = {k: FeatureStats.from_dict(v) for k, v in self.stats.items()}
        return model

    def restore_rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / "params").mkdir(parents=True, exist_ok=True)
        (directory / "moments").mkdir(parents=True, exist_ok=True)
        for name, value in self.params.items():
            with open(directory / "params" / f"{name}.tnsr", "wb") as fh:
                save_tensor(value, fh)
        for name, m in self.moments.items():
            with open(directory / "moments" / f"{name}.m.tnsr", "wb") as fh:
                save_tensor(m.m, fh)
            with open(directory / "moments" / f"{name}.v.tnsr", "wb") as fh:
                save_tensor(m.v, fh)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": self.arch.to_dict(),
            "ablation": self.ablation,
            "init_seed": self.init_seed,
            "step": self.step,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "config_hash": self.config_hash,
            "stats": self.stats,
            "train_config": self.train_config,
            "params": sorted(self.params),
            "moment_steps": {k: m.t for k, m in sorted(self.moments.items())},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise ValidationError(f"checkpoint not found: {directory} has no manifest.json")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"{manifest_path}: not a checkpoint manifest")

        params = {}
        for name in manifest["params"]:
            with open(directory / "params" / f"{name}.tnsr", "rb") as fh:
                params[name] = load_tensor(fh)
        moments = {}
        for name, t in manifest["moment_steps"].items():
            with open(directory / "moments" / f"{name}.m.tnsr", "rb") as fh:
                m = load_tensor(fh)
            with open(directory / "moments" / f"{name}.v.tnsr", "rb") as fh:
                v = load_tensor(fh)
            moments[name] = AdamMoments(m, v, int(t))
        return cls(
            arch=ArchConfig.from_dict(manifest["arch"]),
            params=params,
            moments=moments,
            step=manifest["step"],
            epoch=manifest["epoch"],
            rng_state=manifest["rng_state"],
            config_hash=manifest["config_hash"],
            stats=manifest["stats"],
            init_seed=manifest["init_seed"],
            ablation=manifest["ablation"],
            train_config=manifest["train_config"],
        )


# ==============================================================================
# --- 训练循环 ---
# ==============================================================================

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: LossLog
    config_hash: str


def run_config_hash(cfg: TrainConfig, arch: ArchConfig, ablation: str) -> str:
    return config_hash({"train": cfg.to_dict(), "arch": arch.to_dict(), "ablation": ablation})


def train(
    model: TransferModel,
    domain_x: StyleDomain,
    domain_y: StyleDomain,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    ablation: str = "cycledance",
) -> TrainResult:
    """
    按 epoch 迭代；每个 epoch 按课程长度重新切片；在每个阶段边界和结束时保存检查点。
    out_dir 下写 checkpoint/（最终）、checkpoints/epoch_XXXX/（阶段边界）、losses.csv。
    """
    for domain in (domain_x, domain_y):
        if not domain.clips:
            raise ValidationError(f"domain {domain.label} has no clips")
    cfg_hash = run_config_hash(cfg, model.arch, ablation)
    g_opt, d_opt = make_optimizers(model, cfg)

    if resume is not None:
        if resume.config_hash != cfg_hash:
            logger.warning("⚠️ 训练器: 恢复的检查点配置哈希 %s 与当前 %s 不同", resume.config_hash, cfg_hash)
        model.load_state_dict(resume.params)
        model.stats = {k: FeatureStats.from_dict(v) for k, v in resume.stats.items()}
        g_opt.load_state({k: resume.moments[k] for k in g_opt.params})
        d_opt.load_state({k: resume.moments[k] for k in d_opt.params})
        rng = resume.restore_rng()
        start_epoch, step = resume.epoch, resume.step
        log = _previous_log(out_dir, step)
        logger.info("🔁 训练器: 从 epoch %d / step %d 恢复", start_epoch, step)
    else:
        model.stats = {"X": FeatureStats.fit(domain_x), "Y": FeatureStats.fit(domain_y)}
        rng = np.random.default_rng(cfg.seed)
        start_epoch, step = 0, 0
        log = LossLog()

    norm_x = normalized_domain(domain_x, model.stats["X"])
    norm_y = normalized_domain(domain_y, model.stats["Y"])
    with_music = model.arch.use_music_pathway

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint.capture(model, g_opt, d_opt, step, epoch, rng, cfg_hash, ablation, cfg)

    checkpoint = snapshot(start_epoch)
    if start_epoch >= cfg.epochs:
        logger.info("🏋️ 训练器: 没有需要训练的 epoch，返回初始检查点")
        _persist(out_dir, checkpoint, log, cfg_hash, final=True)
        return TrainResult(checkpoint, log, cfg_hash)

    epochs = tqdm(range(start_epoch, cfg.epochs), desc=f"train[{ablation}]", disable=not config.SHOW_PROGRESS)
    for epoch in epochs:
        clip_len = curriculum_length(cfg.schedule, epoch)
        epoch_rng = np.random.default_rng(int(rng.integers(0, 2**62)))
        g_adv = []
        with BatchPrefetcher(norm_x, norm_y, cfg.batch_size, clip_len, cfg.steps_per_epoch, epoch_rng, with_music) as batches:
            for batch in batches:
                record = train_step(model, batch, cfg, g_opt, d_opt, step)
                log.add(step, record.values)
                g_adv.append(record.values["g_adv_xy"] + record.values["g_adv_yx"])
                step += 1
        logger.info(
            "🏋️ 训练器: epoch %d/%d clip_len=%d 生成器对抗损失中位数 %.4f",
            epoch + 1, cfg.epochs, clip_len, float(np.median(g_adv)),
        )

        done = epoch + 1
        if done in cfg.schedule.boundaries or done == cfg.epochs:
            checkpoint = snapshot(done)
            _persist(out_dir, checkpoint, log, cfg_hash, final=done == cfg.epochs)

    return TrainResult(checkpoint, log, cfg_hash)


def _persist(out_dir, checkpoint: Checkpoint, log: LossLog, cfg_hash: str, final: bool) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if final:
        checkpoint.save(out_dir / "checkpoint")
    else:
        checkpoint.save(out_dir / "checkpoints" / f"epoch_{checkpoint.epoch:04d}")
    log.write(out_dir / "losses.csv", cfg_hash)
    logger.info("💾 训练器: 检查点已保存 (epoch %d, step %d)", checkpoint.epoch, checkpoint.step)


def _previous_log(out_dir, before_step: int) -> LossLog:
    if out_dir is None or not (Path(out_dir) / "losses.csv").is_file():
        return LossLog()
    _, rows = read_result_csv(Path(out_dir) / "losses.csv")
    return LossLog.from_csv_rows(rows, before_step)
