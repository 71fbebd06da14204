# data.py (合成双风格数据集、真实数据 CSV 读写、非配对采样)

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import config
from audio_handler import extract_audio_features, frame_count, synthesize_click_track
from errors import ValidationError
from features import (
    AudioSequence,
    MotionSequence,
    RawPoseSequence,
    RootSeed,
    Skeleton,
    encode_motion,
    expmap_decode,
    resample,
    yaw_quat,
)
from utils.csv_io import read_audio_csv, read_motion_csv, read_raw_pose_json, write_audio_csv, write_motion_csv

logger = logging.getLogger(__name__)

# 关节分组：脊柱、左臂、右臂、左腿、右腿（非根关节下标 1..20）
JOINT_GROUPS = ((1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (13, 14, 15, 16), (17, 18, 19, 20))


@dataclass
class Clip:
    name: str
    motion: MotionSequence
    audio: AudioSequence | None = None

    def __post_init__(self):
        if self.audio is not None and self.audio.n_frames != self.motion.n_frames:
            raise ValidationError(
                f"{self.name}: audio length {self.audio.n_frames} != motion length {self.motion.n_frames}"
            )


@dataclass
class StyleDomain:
    label: str               # "X" 或 "Y"
    display_name: str        # 例如 BJ / LC
    clips: list = field(default_factory=list)

    def __post_init__(self):
        for clip in self.clips:
            if clip.motion.style != self.display_name:
                raise ValidationError(f"{clip.name}: style {clip.motion.style!r} != domain {self.display_name!r}")

    @property
    def has_music(self) -> bool:
        return bool(self.clips) and all(c.audio is not None for c in self.clips)

    @property
    def min_length(self) -> int:
        return min(c.motion.n_frames for c in self.clips)


@dataclass
class SyntheticStyleSpec:
    label: str
    display_name: str
    base_freqs: tuple = (0.5, 0.75, 0.75, 0.5, 0.5)      # Hz，每个关节组
    amplitudes: tuple = (0.15, 0.6, 0.6, 0.35, 0.35)     # 弧度
    jerkiness: float = 0.0                               # 每拍“定格”的概率
    tempo_bpm: float = 90.0
    pitch_hz: float = 440.0
    travel_speed: float = 0.3                            # m/s
    seed: int = 0

    def __post_init__(self):
        if self.tempo_bpm <= 0:
            raise ValidationError(f"{self.display_name}: tempo must be positive")
        if not 0.0 <= self.jerkiness <= 1.0:
            raise ValidationError(f"{self.display_name}: jerkiness must lie in [0, 1]")
        if len(self.base_freqs) != len(JOINT_GROUPS) or len(self.amplitudes) != len(JOINT_GROUPS):
            raise ValidationError(f"{self.display_name}: need one frequency and amplitude per joint group")
        if any(f <= 0 for f in self.base_freqs) or any(a < 0 for a in self.amplitudes):
            raise ValidationError(f"{self.display_name}: frequencies must be positive, amplitudes non-negative")


def _bj_lc(seed: int) -> tuple[SyntheticStyleSpec, SyntheticStyleSpec]:
    """流畅的“芭蕾爵士” vs 顿挫定格的“锁舞”。"""
    smooth = SyntheticStyleSpec("X", "BJ", jerkiness=0.0, tempo_bpm=90.0, pitch_hz=440.0, seed=seed)
    locking = SyntheticStyleSpec(
        "Y", "LC",
        base_freqs=(1.0, 1.5, 1.5, 1.0, 1.0),
        amplitudes=(0.25, 0.9, 0.9, 0.45, 0.45),
        jerkiness=0.85,
        tempo_bpm=120.0,
        pitch_hz=659.25,
        travel_speed=0.15,
        seed=seed + 1,
    )
    return smooth, locking


def _wk_hp(seed: int) -> tuple[SyntheticStyleSpec, SyntheticStyleSpec]:
    """甩手的 Waacking（手臂快而大、腿几乎不动） vs 屈膝律动的 Hip-hop（躯干和腿为主）。"""
    waacking = SyntheticStyleSpec(
        "X", "WK",
        base_freqs=(0.5, 2.0, 2.0, 0.5, 0.5),
        amplitudes=(0.1, 1.1, 1.1, 0.15, 0.15),
        jerkiness=0.3,
        tempo_bpm=120.0,
        pitch_hz=523.25,
        travel_speed=0.1,
        seed=seed,
    )
    hiphop = SyntheticStyleSpec(
        "Y", "HP",
        base_freqs=(1.5, 0.75, 0.75, 1.5, 1.5),
        amplitudes=(0.45, 0.35, 0.35, 0.7, 0.7),
        jerkiness=0.4,
        tempo_bpm=95.0,
        pitch_hz=392.0,
        travel_speed=0.3,
        seed=seed + 1,
    )
    return waacking, hiphop


def _po_ho(seed: int) -> tuple[SyntheticStyleSpec, SyntheticStyleSpec]:
    """几乎每拍都“卡点”的 Popping vs 连贯滑步、位移大的 House。"""
    popping = SyntheticStyleSpec(
        "X", "PO",
        base_freqs=(0.75, 1.25, 1.25, 0.75, 0.75),
        amplitudes=(0.2, 0.7, 0.7, 0.3, 0.3),
        jerkiness=0.95,
        tempo_bpm=100.0,
        pitch_hz=587.33,
        travel_speed=0.1,
        seed=seed,
    )
    house = SyntheticStyleSpec(
        "Y", "HO",
        base_freqs=(1.0, 0.75, 0.75, 2.0, 2.0),
        amplitudes=(0.2, 0.4, 0.4, 0.8, 0.8),
        jerkiness=0.05,
        tempo_bpm=124.0,
        pitch_hz=349.23,
        travel_speed=0.45,
        seed=seed + 1,
    )
    return popping, house


# 合成风格对：名字是 "<X 风格>-<Y 风格>"
STYLE_PAIRS = {"BJ-LC": _bj_lc, "WK-HP": _wk_hp, "PO-HO": _po_ho}


def default_style_specs(seed: int = config.SYNTH_SEED, pair: str = "BJ-LC") -> tuple[SyntheticStyleSpec, SyntheticStyleSpec]:
    if pair not in STYLE_PAIRS:
        raise ValidationError(f"unknown style pair {pair!r}; choose from {sorted(STYLE_PAIRS)}")
    return STYLE_PAIRS[pair](seed)


# ==============================================================================
# --- 合成 ---
# ==============================================================================

def _step_hold(signal: np.ndarray, beat_frames: float, jerkiness: float, rng: np.random.Generator) -> np.ndarray:
    """按拍切段；以 jerkiness 概率把整段定格在段首的值。"""
    out = signal.copy()
    t = signal.shape[0]
    edges = np.unique(np.append(np.floor(np.arange(0.0, t, beat_frames)).astype(int), t))
    for start, stop in zip(edges[:-1], edges[1:]):
        if rng.random() < jerkiness:
            out[start:stop] = signal[start]
    return out


def synth_raw_pose(spec: SyntheticStyleSpec, n_frames: int, rng: np.random.Generator, skel: Skeleton) -> RawPoseSequence:
    t = np.arange(n_frames) / config.MOTION_FPS
    twist_joint = skel.index(config.DROPPED_TWIST_JOINT)

    expmaps = np.zeros((n_frames, config.N_JOINTS - 1, 3))
    for group, freq, amp in zip(JOINT_GROUPS, spec.base_freqs, spec.amplitudes):
        for j in group:
            jitter = rng.uniform(0.8, 1.2, size=3)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
            ratios = np.array([1.0, 1.5, 0.5])
            axes = amp * jitter * np.sin(2.0 * np.pi * freq * ratios * t[:, None] + phase)
            axes *= np.array([0.4, 1.0, 0.7])
            if j == twist_joint:
                axes[:, 0] = 0.0
            expmaps[:, j - 1] = axes

    beat_frames = config.MOTION_FPS * 60.0 / spec.tempo_bpm
    if spec.jerkiness > 0.0:
        expmaps = _step_hold(expmaps, beat_frames, spec.jerkiness, rng)

    heading = rng.uniform(-np.pi, np.pi) + 0.6 * np.sin(2.0 * np.pi * 0.1 * t + rng.uniform(0, 2 * np.pi))
    speed = spec.travel_speed * (1.0 + 0.3 * np.sin(2.0 * np.pi * 0.2 * t))
    step = speed / config.MOTION_FPS
    x = np.concatenate([[0.0], np.cumsum(step[1:] * np.sin(heading[:-1]))])
    z = np.concatenate([[0.0], np.cumsum(step[1:] * np.cos(heading[:-1]))])
    y = 0.95 + 0.03 * np.sin(2.0 * np.pi * (spec.tempo_bpm / 60.0) * t)

    rotations = np.concatenate([yaw_quat(heading)[:, None], expmap_decode(expmaps)], axis=1)
    return RawPoseSequence(fps=config.MOTION_FPS, root_position=np.stack([x, y, z], axis=1), joint_rotations=rotations)


def synth_domain(spec: SyntheticStyleSpec, n_clips: int, clip_seconds: float) -> StyleDomain:
    skel = Skeleton()
    clips = []
    for k in range(n_clips):
        rng = np.random.default_rng([spec.seed, k])
        offset = rng.uniform(0.0, 60.0 / spec.tempo_bpm)
        samples = synthesize_click_track(spec.tempo_bpm, clip_seconds, pitch_hz=spec.pitch_hz, offset_s=offset)
        audio = extract_audio_features(samples, config.SYNTH_SAMPLE_RATE)
        n_frames = frame_count(samples.size, config.SYNTH_SAMPLE_RATE)
        motion = encode_motion(synth_raw_pose(spec, n_frames, rng, skel), skel, style=spec.display_name)
        clips.append(Clip(f"clip_{k:03d}", motion, audio))
    return StyleDomain(spec.label, spec.display_name, clips)


def acceleration_profile(domain: StyleDomain) -> dict:
    """加速度幅值直方图的摘要统计：中位数、99 分位、尾部比值。"""
    mags = np.concatenate([
        np.abs(np.diff(c.motion.frames[:, : config.JOINT_FEATURE_DIMS], n=2, axis=0)).mean(axis=1)
        for c in domain.clips
    ])
    median = float(np.median(mags))
    p99 = float(np.quantile(mags, 0.99))
    return {"median": median, "p99": p99, "tail_ratio": p99 / median if median > 0 else math.inf}


def generate_synthetic(
    spec_x: SyntheticStyleSpec,
    spec_y: SyntheticStyleSpec,
    n_clips: int = config.SYNTH_CLIPS,
    clip_seconds: float = config.SYNTH_SECONDS,
) -> tuple[StyleDomain, StyleDomain]:
    if n_clips < 1:
        raise ValidationError(f"n_clips must be >= 1, got {n_clips}")
    if clip_seconds < 2:
        raise ValidationError(f"clip_seconds must be >= 2, got {clip_seconds}")
    if clip_seconds * config.MOTION_FPS < config.MIN_CLIP_FRAMES:
        logger.warning("⚠️ 数据: %.1f s 的片段短于最大课程长度 %d 帧", clip_seconds, config.MIN_CLIP_FRAMES)
    dx = synth_domain(spec_x, n_clips, clip_seconds)
    dy = synth_domain(spec_y, n_clips, clip_seconds)
    logger.info(
        "📦 数据: 合成完成 %s/%s，各 %d 段 x %.1f s，加速度尾部比 %.2f / %.2f",
        dx.display_name, dy.display_name, n_clips, clip_seconds,
        acceleration_profile(dx)["tail_ratio"], acceleration_profile(dy)["tail_ratio"],
    )
    return dx, dy


# ==============================================================================
# --- 读写 ---
# ==============================================================================

def save_domain(domain: StyleDomain, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "domain.json").write_text(json.dumps({"label": domain.label, "display_name": domain.display_name}))
    for clip in domain.clips:
        write_motion_csv(directory / f"{clip.name}.motion.csv", clip.motion)
        if clip.audio is not None:
            write_audio_csv(directory / f"{clip.name}.audio.csv", clip.audio)
    return directory


def load_raw_pose_motion(path, style: str = "") -> tuple[MotionSequence, RootSeed, Skeleton]:
    """原始姿态 JSON -> 降采样到动作帧率 -> 63 维编码。

    同时返回第 0 帧的根部种子和文件里的骨架，供解码还原全局位置。
    """
    raw, skel = read_raw_pose_json(path)
    if raw.fps != config.MOTION_FPS:
        logger.info("🔄 数据: %s 从 %.1f fps 降采样到 %d fps", Path(path).name, raw.fps, config.MOTION_FPS)
        raw = resample(raw, config.MOTION_FPS)
    return encode_motion(raw, skel, style=style), RootSeed.from_raw(raw), skel


def _clip_sources(directory: Path) -> dict:
    sources = {}
    for suffix in (".motion.csv", ".pose.json"):
        for path in sorted(directory.glob(f"*{suffix}")):
            name = path.name.removesuffix(suffix)
            if name in sources:
                raise ValidationError(f"{directory.name}/{name}: both .motion.csv and .pose.json present")
            sources[name] = path
    return dict(sorted(sources.items()))


def load_domain(directory) -> StyleDomain:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory}: not a directory")
    meta_path = directory / "domain.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    else:
        label = directory.name.removeprefix("domain_")
        meta = {"label": label, "display_name": label}

    clips = []
    for name, source in _clip_sources(directory).items():
        try:
            if source.name.endswith(".pose.json"):
                motion, _, _ = load_raw_pose_motion(source, style=meta["display_name"])
            else:
                motion = read_motion_csv(source, style=meta["display_name"])
            audio_path = directory / f"{name}.audio.csv"
            audio = read_audio_csv(audio_path) if audio_path.exists() else None
            clips.append(Clip(name, motion, audio))
        except ValidationError as e:
            raise ValidationError(f"{directory.name}/{name}: {e}") from None
    if not clips:
        raise ValidationError(f"{directory}: no *.motion.csv or *.pose.json clips found")
    return StyleDomain(meta["label"], meta["display_name"], clips)


def save_dataset(root, domains: tuple, manifest: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for domain in domains:
        save_domain(domain, root / f"domain_{domain.label}")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root) -> tuple[StyleDomain, StyleDomain, dict]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return load_domain(root / "domain_X"), load_domain(root / "domain_Y"), manifest


def synthetic_manifest(spec_x, spec_y, n_clips: int, clip_seconds: float, seed: int, dx, dy) -> dict:
    return {
        "pair": f"{spec_x.display_name}-{spec_y.display_name}",
        "seed": seed,
        "n_clips": n_clips,
        "clip_seconds": clip_seconds,
        "eval_fraction": config.EVAL_FRACTION,
        "specs": {"X": asdict(spec_x), "Y": asdict(spec_y)},
        "acceleration_profile": {"X": acceleration_profile(dx), "Y": acceleration_profile(dy)},
        "layout_version": config.LAYOUT_VERSION,
    }


def split_domain(domain: StyleDomain, eval_fraction: float = config.EVAL_FRACTION) -> tuple[StyleDomain, StyleDomain]:
    """最后 ⌈n·fraction⌉ 段作为留出评估集；至少各留一段。"""
    n = len(domain.clips)
    n_eval = min(n - 1, max(1, math.ceil(n * eval_fraction))) if n > 1 else 0
    if n_eval == 0:
        return domain, domain
    return (
        StyleDomain(domain.label, domain.display_name, domain.clips[: n - n_eval]),
        StyleDomain(domain.label, domain.display_name, domain.clips[n - n_eval :]),
    )


# ==============================================================================
# --- 归一化与填充 ---
# ==============================================================================

@dataclass
class FeatureStats:
    """某个风格域的逐维均值/标准差。"""

    motion_mean: np.ndarray
    motion_std: np.ndarray
    music_mean: np.ndarray | None = None
    music_std: np.ndarray | None = None

    @staticmethod
    def _moments(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        std = frames.std(axis=0)
        return frames.mean(axis=0), np.where(std < 1e-8, 1.0, std)

    @classmethod
    def fit(cls, domain: StyleDomain) -> "FeatureStats":
        motion_mean, motion_std = cls._moments(np.concatenate([c.motion.frames for c in domain.clips]))
        if not domain.has_music:
            return cls(motion_mean, motion_std)
        music_mean, music_std = cls._moments(np.concatenate([c.audio.frames for c in domain.clips]))
        return cls(motion_mean, motion_std, music_mean, music_std)

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls(np.zeros(config.MOTION_DIM), np.ones(config.MOTION_DIM), np.zeros(config.MUSIC_DIM), np.ones(config.MUSIC_DIM))

    def normalize_motion(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.motion_mean) / self.motion_std

    def denormalize_motion(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.motion_std + self.motion_mean

    def normalize_music(self, frames: np.ndarray) -> np.ndarray:
        if self.music_mean is None:
            return frames
        return (frames - self.music_mean) / self.music_std

    def to_dict(self) -> dict:
        return {k: (None if v is None else v.tolist()) for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(**{k: (None if v is None else np.asarray(v, dtype=np.float64)) for k, v in d.items()})


def pad_to_multiple(frames: np.ndarray, multiple: int = config.LENGTH_MULTIPLE, minimum: int = config.MIN_GENERATOR_LENGTH) -> tuple[np.ndarray, int]:
    """边缘复制填充到 multiple 的整数倍（且不短于 minimum）。返回 (填充后, 原长度)。"""
    n = frames.shape[0]
    target = max(minimum, -(-n // multiple) * multiple)
    if target == n:
        return frames, n
    return np.pad(frames, ((0, target - n), (0, 0)), mode="edge"), n


# ==============================================================================
# --- 非配对采样 ---
# ==============================================================================

@dataclass
class UnpairedBatch:
    x_motion: np.ndarray        # (B, L, 63)
    y_motion: np.ndarray
    x_music: np.ndarray | None  # (B, L, 35)
    y_music: np.ndarray | None

    @property
    def clip_len(self) -> int:
        return self.x_motion.shape[1]


def draw_windows(domain: StyleDomain, batch: int, clip_len: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """均匀选片段，再在片段内均匀选起点。"""
    clip_idx = rng.integers(0, len(domain.clips), size=batch)
    highs = np.array([domain.clips[i].motion.n_frames - clip_len + 1 for i in clip_idx])
    starts = np.floor(rng.random(batch) * highs).astype(int)
    return clip_idx, starts


def _cut(domain: StyleDomain, clip_idx, starts, clip_len: int, with_music: bool):
    motion = np.stack([domain.clips[i].motion.frames[s : s + clip_len] for i, s in zip(clip_idx, starts)])
    if not with_music:
        return motion, None
    music = np.stack([domain.clips[i].audio.frames[s : s + clip_len] for i, s in zip(clip_idx, starts)])
    return motion, music


def sample_unpaired_batch(
    domain_x: StyleDomain,
    domain_y: StyleDomain,
    batch: int,
    clip_len: int,
    rng: np.random.Generator,
    with_music: bool | None = None,
) -> UnpairedBatch:
    if batch < 1:
        raise ValidationError(f"batch must be >= 1, got {batch}")
    if clip_len % config.LENGTH_MULTIPLE:
        raise ValidationError(f"clip_len {clip_len} must be divisible by {config.LENGTH_MULTIPLE}")
    shortest = min(domain_x.min_length, domain_y.min_length)
    if clip_len > shortest:
        raise ValidationError(f"clip_len {clip_len} exceeds the shortest clip ({shortest} frames)")
    if with_music is None:
        with_music = domain_x.has_music and domain_y.has_music
    elif with_music and not (domain_x.has_music and domain_y.has_music):
        raise ValidationError("music requested but a domain has clips without audio")

    xi, xs = draw_windows(domain_x, batch, clip_len, rng)
    yi, ys = draw_windows(domain_y, batch, clip_len, rng)
    x_motion, x_music = _cut(domain_x, xi, xs, clip_len, with_music)
    y_motion, y_music = _cut(domain_y, yi, ys, clip_len, with_music)
    return UnpairedBatch(x_motion, y_motion, x_music, y_music)


def normalized_domain(domain: StyleDomain, stats: FeatureStats) -> StyleDomain:
    clips = [
        Clip(
            c.name,
            MotionSequence(stats.normalize_motion(c.motion.frames), style=c.motion.style),
            None if c.audio is None else _NormalizedAudio(stats.normalize_music(c.audio.frames)),
        )
        for c in domain.clips
    ]
    return StyleDomain(domain.label, domain.display_name, clips)


class _NormalizedAudio(AudioSequence):
    """归一化后的音频特征：峰值/节拍维不再是 0/1，跳过取值检查。"""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != config.MUSIC_DIM:
            raise ValidationError(f"audio frames must be (T, {config.MUSIC_DIM}), got {self.frames.shape}")
