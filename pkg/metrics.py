# metrics.py (运动 Fréchet 距离 MFD / 姿态 Fréchet 距离 PFD / 评估报告)

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import config
from data import StyleDomain
from errors import ShapeError, ValidationError
from features import MotionSequence
from utils.csv_io import write_result_csv

logger = logging.getLogger(__name__)

PLANAR_ROOT_DIMS = (config.ROOT_FORWARD_DIM, config.ROOT_LATERAL_DIM)
REPORT_HEADER = ["direction", "metric", "value", "n_clips"]


def _frames(m) -> np.ndarray:
    frames = m.frames if isinstance(m, MotionSequence) else np.asarray(m, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != config.MOTION_DIM:
        raise ValidationError(f"motion must be (T, {config.MOTION_DIM}), got {frames.shape}")
    return frames


# ==============================================================================
# --- 运动学特征 ---
# ==============================================================================

@dataclass
class KinematicFeatures:
    velocities: np.ndarray      # (T-1, 63)，v_i = x_i - x_{i-1}
    accelerations: np.ndarray   # (T-2, 63)，a_i = x_{i+1} - 2x_i + x_{i-1}

    def pooled(self) -> np.ndarray:
        """(T-2, 126)：第 i 帧的 (v_i, a_i) 拼接。"""
        return np.concatenate([self.velocities[:-1], self.accelerations], axis=1)


def kinematic_features(m) -> KinematicFeatures:
    """有限差分，帧为单位（30 fps），不做归一化。"""
    x = _frames(m)
    if x.shape[0] < 3:
        raise ValidationError(f"kinematic features need T >= 3, got {x.shape[0]}")
    return KinematicFeatures(x[1:] - x[:-1], x[2:] - 2.0 * x[1:-1] + x[:-2])


# ==============================================================================
# --- 高斯拟合与 Fréchet 距离 ---
# ==============================================================================

@dataclass
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ShapeError("GaussianFit", self.mean.shape, self.covariance.shape)
        if np.max(np.abs(self.covariance - self.covariance.T), initial=0.0) > config.SYMMETRY_TOL:
            raise ValidationError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(samples: np.ndarray, eps: float = config.COVARIANCE_EPS) -> GaussianFit:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValidationError(f"need at least 2 samples of shape (n, d), got {samples.shape}")
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T) + eps * np.eye(samples.shape[1])
    return GaussianFit(samples.mean(axis=0), cov, samples.shape[0])


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-9 * max(1.0, abs(w.max())):
        raise ValidationError(f"covariance is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(f1: GaussianFit, f2: GaussianFit) -> float:
    """
    sqrt(|μ1-μ2|² + Tr(Σ1 + Σ2 - 2(Σ1Σ2)^{1/2}))。
    Tr((Σ1Σ2)^{1/2}) 用对称矩阵 Σ1^{1/2} Σ2 Σ1^{1/2} 的特征值计算。
    """
    if f1.dim != f2.dim:
        raise ShapeError("frechet_distance", f1.mean.shape, f2.mean.shape)
    if np.array_equal(f1.mean, f2.mean) and np.array_equal(f1.covariance, f2.covariance):
        return 0.0
    root1 = _psd_sqrt(f1.covariance)
    _psd_sqrt(f2.covariance)
    middle = root1 @ f2.covariance @ root1
    w = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    trace_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = f1.mean - f2.mean
    fd2 = diff @ diff + np.trace(f1.covariance) + np.trace(f2.covariance) - 2.0 * trace_sqrt
    return float(np.sqrt(max(fd2, 0.0)))


# ==============================================================================
# --- MFD ---
# ==============================================================================

def _nonempty(motions, what: str) -> list:
    motions = list(motions)
    if not motions:
        raise ValidationError(f"{what} motion set is empty")
    return motions


def mfd(true_motions, generated_motions) -> float:
    """两组运动的 (速度, 加速度) 126 维特征各拟合一个高斯，返回 Fréchet 距离。"""
    true_feats = np.concatenate([kinematic_features(m).pooled() for m in _nonempty(true_motions, "true")])
    gen_feats = np.concatenate([kinematic_features(m).pooled() for m in _nonempty(generated_motions, "generated")])
    return frechet_distance(fit_gaussian(true_feats), fit_gaussian(gen_feats))


# ==============================================================================
# --- 关键帧与 PFD ---
# ==============================================================================

@dataclass
class KeyPoseSet:
    frames: np.ndarray      # (K, 63)，已去掉根节点平面分量
    indices: np.ndarray     # 原序列中的姿态下标


def acceleration_magnitude(m) -> np.ndarray:
    """s_j = mean(|a|)，s_j 对应第 j+1 个姿态。"""
    return np.abs(kinematic_features(m).accelerations).mean(axis=1)


def local_maxima(s: np.ndarray) -> np.ndarray:
    """严格局部极大值：s[i] > s[i-1] 且 s[i] > s[i+1]，端点不算。"""
    s = np.asarray(s, dtype=np.float64)
    if s.size < 3:
        return np.zeros(0, dtype=int)
    inner = (s[1:-1] > s[:-2]) & (s[1:-1] > s[2:])
    return np.flatnonzero(inner) + 1


def suppress_close(candidates: np.ndarray, strength: np.ndarray, min_gap: int) -> np.ndarray:
    """非极大值抑制：按强度从高到低保留，相互间隔至少 min_gap 帧。"""
    if min_gap <= 0 or candidates.size == 0:
        return candidates
    order = sorted(candidates.tolist(), key=lambda i: (-strength[i], i))
    kept: list[int] = []
    for i in order:
        if all(abs(i - k) >= min_gap for k in kept):
            kept.append(i)
    return np.array(sorted(kept), dtype=int)


def hip_center(frames: np.ndarray) -> np.ndarray:
    """去掉根节点的平面位移，保留高度与朝向变化。"""
    out = np.array(frames, dtype=np.float64)
    out[..., list(PLANAR_ROOT_DIMS)] = 0.0
    return out


def keyframe_indices(m, min_gap: int = 0) -> np.ndarray:
    s = acceleration_magnitude(m)
    return suppress_close(local_maxima(s), s, min_gap) + 1


def extract_keyframes(m, min_gap: int = 0) -> KeyPoseSet:
    x = _frames(m)
    indices = keyframe_indices(x, min_gap)
    if indices.size == 0:
        raise ValidationError("no keyframes: acceleration curve has no strict local maximum")
    return KeyPoseSet(hip_center(x[indices]), indices)


def _key_poses(motions, min_gap: int) -> np.ndarray:
    poses = []
    for m in motions:
        x = _frames(m)
        idx = keyframe_indices(x, min_gap)
        if idx.size:
            poses.append(hip_center(x[idx]))
    return np.concatenate(poses) if poses else np.zeros((0, config.MOTION_DIM))


def pfd(source_motions, generated_motions, min_gap: int = 0, min_keyframes: int | None = None) -> float:
    """源运动与迁移结果的关键姿态分布之间的 Fréchet 距离。"""
    required = config.MOTION_DIM + 1 if min_keyframes is None else min_keyframes
    if required <= config.MOTION_DIM:
        logger.warning("⚠️ PFD: 关键帧下限降为 %d，协方差可能秩亏", required)
    src = _key_poses(_nonempty(source_motions, "source"), min_gap)
    gen = _key_poses(_nonempty(generated_motions, "generated"), min_gap)
    for name, poses in (("source", src), ("generated", gen)):
        if poses.shape[0] < max(2, required):
            raise ValidationError(f"{name} set yields {poses.shape[0]} keyframes, need >= {required}")
    return frechet_distance(fit_gaussian(src), fit_gaussian(gen))


# ==============================================================================
# --- 评估 ---
# ==============================================================================

@dataclass
class MetricsRow:
    direction: str
    metric: str
    value: float
    n_clips: int


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)
    config_hash: str = ""

    def value(self, direction: str, metric: str) -> float:
        for row in self.rows:
            if row.direction == direction and row.metric == metric:
                return row.value
        raise KeyError((direction, metric))

    def as_rows(self) -> list[tuple]:
        return [(r.direction, r.metric, r.value, r.n_clips) for r in self.rows]

    def write_csv(self, path) -> None:
        write_result_csv(path, REPORT_HEADER, self.as_rows(), self.config_hash)


def _domains_for(direction: str, eval_x: StyleDomain, eval_y: StyleDomain) -> tuple[StyleDomain, StyleDomain]:
    if direction == "x2y":
        return eval_x, eval_y
    if direction == "y2x":
        return eval_y, eval_x
    raise ValidationError(f"unknown direction {direction!r}")


def _direction_name(direction: str, source: StyleDomain, target: StyleDomain) -> str:
    return f"{source.display_name}2{target.display_name}"


def transfer_clips(model, direction: str, source: StyleDomain, threads: int = config.EVAL_THREADS) -> list[np.ndarray]:
    """对源域每个片段做迁移；并行 map，结果顺序与输入一致。"""

    def run(clip):
        music = None if clip.audio is None else clip.audio.frames
        return model.transfer(direction, clip.motion.frames, music)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(run, source.clips))


def evaluate(
    model,
    eval_x: StyleDomain,
    eval_y: StyleDomain,
    directions=("x2y", "y2x"),
    min_gap: int = 0,
    min_keyframes: int | None = None,
    threads: int = config.EVAL_THREADS,
    cfg_hash: str = "",
) -> MetricsReport:
    """每个方向：MFD(目标风格真实数据, 迁移结果) 与 PFD(源数据, 迁移结果)。"""
    report = MetricsReport(config_hash=cfg_hash)
    for direction in directions:
        source, target = _domains_for(direction, eval_x, eval_y)
        if not source.clips or not target.clips:
            raise ValidationError(f"direction {direction}: missing evaluation clips")
        generated = transfer_clips(model, direction, source, threads)
        sources = [c.motion.frames for c in source.clips]
        targets = [c.motion.frames for c in target.clips]
        name = _direction_name(direction, source, target)
        report.rows.append(MetricsRow(name, "MFD", mfd(targets, generated), len(generated)))
        report.rows.append(MetricsRow(name, "PFD", pfd(sources, generated, min_gap, min_keyframes), len(generated)))
        logger.info("📏 评估: %s MFD=%.4f PFD=%.4f", name, report.rows[-2].value, report.rows[-1].value)
    return report


def reference_report(
    eval_x: StyleDomain,
    eval_y: StyleDomain,
    directions=("x2y", "y2x"),
    min_gap: int = 0,
    min_keyframes: int | None = None,
    cfg_hash: str = "",
) -> MetricsReport:
    """
    两个参照值：直通基线 MFD(源, 目标风格) 和
    PFD(源, 另一风格的无关运动)。迁移结果应当分别低于它们。
    """
    report = MetricsReport(config_hash=cfg_hash)
    for direction in directions:
        source, target = _domains_for(direction, eval_x, eval_y)
        sources = [c.motion.frames for c in source.clips]
        targets = [c.motion.frames for c in target.clips]
        name = _direction_name(direction, source, target)
        report.rows.append(MetricsRow(name, "MFD_passthrough", mfd(targets, sources), len(sources)))
        report.rows.append(MetricsRow(name, "PFD_unrelated", pfd(sources, targets, min_gap, min_keyframes), len(targets)))
    return report
