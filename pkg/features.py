# features.py (骨骼运动特征：exp-map 关节 + 根节点四维特征)

from dataclasses import dataclass, field

import numpy as np

import config
from errors import ValidationError

UNIT_TOL = 1e-9

JOINT_NAMES = (
    "Hips",
    "Spine", "Spine1", "Neck", "Head",
    "LeftShoulder", "LeftArm", "LeftForeArm", "LeftHand",
    "RightShoulder", "RightArm", "RightForeArm", "RightHand",
    "LeftUpLeg", "LeftLeg", "LeftFoot", "LeftToeBase",
    "RightUpLeg", "RightLeg", "RightFoot", "RightToeBase",
)
JOINT_PARENTS = (-1, 0, 1, 2, 3, 2, 5, 6, 7, 2, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19)
JOINT_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.0, 0.10, 0.0), (0.0, 0.25, 0.0), (0.0, 0.20, 0.0), (0.0, 0.10, 0.0),
    (0.08, 0.15, 0.0), (0.12, 0.0, 0.0), (0.28, 0.0, 0.0), (0.25, 0.0, 0.0),
    (-0.08, 0.15, 0.0), (-0.12, 0.0, 0.0), (-0.28, 0.0, 0.0), (-0.25, 0.0, 0.0),
    (0.10, -0.05, 0.0), (0.0, -0.42, 0.0), (0.0, -0.40, 0.0), (0.0, -0.05, 0.12),
    (-0.10, -0.05, 0.0), (0.0, -0.42, 0.0), (0.0, -0.40, 0.0), (0.0, -0.05, 0.12),
)


# ==============================================================================
# --- 数据类型 ---
# ==============================================================================

@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple = JOINT_NAMES
    parent: tuple = JOINT_PARENTS
    offsets: tuple = JOINT_OFFSETS

    def __post_init__(self):
        n = len(self.joint_names)
        if n != config.N_JOINTS or len(self.parent) != n or len(self.offsets) != n:
            raise ValidationError(f"skeleton must have exactly {config.N_JOINTS} joints, got {n}")
        roots = [i for i, p in enumerate(self.parent) if p < 0]
        if roots != [0]:
            raise ValidationError(f"skeleton must have a single root at index 0, got roots {roots}")
        # 父节点总在子节点之前 => 单棵有根树
        if any(not (0 <= p < i) for i, p in enumerate(self.parent) if i > 0):
            raise ValidationError("skeleton parent indices must precede their children")
        if config.DROPPED_TWIST_JOINT not in self.joint_names:
            raise ValidationError(f"skeleton must name a {config.DROPPED_TWIST_JOINT!r} joint")

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    @property
    def dropped_feature_index(self) -> int:
        """被省略的扭转分量在 60 维非根关节 exp-map 中的位置（局部 x 轴）。"""
        return 3 * (self.index(config.DROPPED_TWIST_JOINT) - 1)


@dataclass
class RawPoseSequence:
    fps: float
    root_position: np.ndarray    # (T, 3)，单位米，y 轴向上
    joint_rotations: np.ndarray  # (T, 21, 4)，单位四元数 (w, x, y, z)

    def __post_init__(self):
        self.root_position = np.asarray(self.root_position, dtype=np.float64)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        t = self.root_position.shape[0]
        if t < 2:
            raise ValidationError(f"raw pose sequence needs T >= 2, got {t}")
        if self.root_position.shape != (t, 3) or self.joint_rotations.shape != (t, config.N_JOINTS, 4):
            raise ValidationError(
                f"raw pose shapes {self.root_position.shape} / {self.joint_rotations.shape} "
                f"do not match (T,3) / (T,{config.N_JOINTS},4)"
            )
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if not (np.all(np.isfinite(self.root_position)) and np.all(np.isfinite(self.joint_rotations))):
            raise ValidationError("raw pose sequence contains non-finite values")
        norms = np.linalg.norm(self.joint_rotations, axis=-1)
        if np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise ValidationError("joint rotations must be unit quaternions")

    @property
    def n_frames(self) -> int:
        return self.root_position.shape[0]


@dataclass
class MotionSequence:
    frames: np.ndarray  # (T, 63)
    style: str = ""
    fps: int = config.MOTION_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != config.MOTION_DIM:
            raise ValidationError(f"motion frames must be (T, {config.MOTION_DIM}), got {self.frames.shape}")
        if self.fps != config.MOTION_FPS:
            raise ValidationError(f"motion sequences are stored at {config.MOTION_FPS} fps, got {self.fps}")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("motion frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class AudioSequence:
    frames: np.ndarray  # (T, 35)
    fps: int = config.MOTION_FPS

    MFCC = slice(0, 20)
    CHROMA = slice(20, 32)
    PEAK = 32
    BEAT = 33
    ONSET = 34

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != config.MUSIC_DIM:
            raise ValidationError(f"audio frames must be (T, {config.MUSIC_DIM}), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("audio frames contain non-finite values")
        flags = self.frames[:, [self.PEAK, self.BEAT]]
        if not np.all((flags == 0.0) | (flags == 1.0)):
            raise ValidationError("audio peak/beat dims must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class RootSeed:
    """解码时的全局平面位置与朝向。"""

    x: float = 0.0
    z: float = 0.0
    heading: float = 0.0

    @classmethod
    def from_raw(cls, raw: "RawPoseSequence", frame: int = 0) -> "RootSeed":
        x, _, z = raw.root_position[frame]
        return cls(float(x), float(z), float(heading_of(raw.joint_rotations[frame, 0])))


# ==============================================================================
# --- 四元数与 exp-map ---
# ==============================================================================

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """用四元数旋转向量：v' = v + 2w(u×v) + 2u×(u×v)。"""
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def yaw_quat(heading) -> np.ndarray:
    half = 0.5 * np.asarray(heading, dtype=np.float64)
    zeros = np.zeros_like(half)
    return np.stack([np.cos(half), zeros, np.sin(half), zeros], axis=-1)


def heading_of(q: np.ndarray) -> np.ndarray:
    """朝向角：局部 +z 轴旋转后在地面 (x, z) 上的投影角。"""
    forward = quat_rotate(q, np.broadcast_to([0.0, 0.0, 1.0], q.shape[:-1] + (3,)))
    return np.arctan2(forward[..., 0], forward[..., 2])


def wrap_angle(a):
    """映射到 (-π, π]。"""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def expmap_encode(q) -> np.ndarray:
    """单位四元数 (…,4) -> 轴角向量 (…,3)，角度在 [0, π]。"""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValidationError(f"quaternion must have 4 components, got shape {q.shape}")
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValidationError("expmap_encode: quaternion is not unit-norm")
    # 半球规范化 w >= 0，消除双覆盖
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    safe = np.where(s > 0.0, s, 1.0)
    scale = np.where(s > 0.0, angle / safe, 2.0 / np.maximum(w, UNIT_TOL))
    return v * scale[..., None]


def expmap_decode(r) -> np.ndarray:
    """轴角向量 (…,3) -> 单位四元数 (…,4)。"""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    w = np.cos(0.5 * theta)
    # sin(θ/2)/θ = 0.5·sinc(θ/2π)，θ→0 时也稳定
    v = r * (0.5 * np.sinc(theta / (2.0 * np.pi)))[..., None]
    return np.concatenate([w[..., None], v], axis=-1)


def slerp(q0: np.ndarray, q1: np.ndarray, t) -> np.ndarray:
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    close = sin_theta < 1e-10
    safe = np.where(close, 1.0, sin_theta)
    w0 = np.where(close, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    w1 = np.where(close, t, np.sin(t * theta) / safe)
    out = w0 * q0 + w1 * q1
    return np.where(close, out / np.linalg.norm(out, axis=-1, keepdims=True), out)


# ==============================================================================
# --- 运动编码 / 解码 ---
# ==============================================================================

def encode_motion(raw: RawPoseSequence, skel: Skeleton | None = None, style: str = "") -> MotionSequence:
    skel = skel or Skeleton()
    if raw.fps != config.MOTION_FPS:
        raise ValidationError(f"encode_motion expects {config.MOTION_FPS} fps input, got {raw.fps}; resample first")
    if raw.n_frames < 2:
        raise ValidationError("encode_motion needs T >= 2")
    t = raw.n_frames

    joints = expmap_encode(raw.joint_rotations[:, 1:]).reshape(t, -1)
    joints = np.delete(joints, skel.dropped_feature_index, axis=1)

    heading = heading_of(raw.joint_rotations[:, 0])
    prev = heading[:-1]
    dx = np.diff(raw.root_position[:, 0])
    dz = np.diff(raw.root_position[:, 2])

    root = np.zeros((t, 4))
    root[:, 0] = raw.root_position[:, 1]
    root[1:, 1] = dx * np.sin(prev) + dz * np.cos(prev)
    root[1:, 2] = dx * np.cos(prev) - dz * np.sin(prev)
    root[1:, 3] = wrap_angle(np.diff(heading))
    return MotionSequence(np.concatenate([joints, root], axis=1), style=style)


def decode_motion(m: MotionSequence, skel: Skeleton | None = None, seed_root: RootSeed | None = None) -> RawPoseSequence:
    """encode_motion 的逆：从种子位置积分平面位移与朝向变化。第 0 帧的 Δ 相对于种子。"""
    skel = skel or Skeleton()
    seed_root = seed_root or RootSeed()
    frames = m.frames
    t = frames.shape[0]
    if t < 2:
        raise ValidationError("decode_motion needs T >= 2")

    joints = np.insert(frames[:, : config.JOINT_FEATURE_DIMS], skel.dropped_feature_index, 0.0, axis=1)
    joint_quats = expmap_decode(joints.reshape(t, config.N_JOINTS - 1, 3))

    heading = seed_root.heading + np.cumsum(frames[:, config.ROOT_HEADING_DIM])
    prev = np.concatenate([[seed_root.heading], heading[:-1]])
    forward = frames[:, config.ROOT_FORWARD_DIM]
    lateral = frames[:, config.ROOT_LATERAL_DIM]
    x = seed_root.x + np.cumsum(forward * np.sin(prev) + lateral * np.cos(prev))
    z = seed_root.z + np.cumsum(forward * np.cos(prev) - lateral * np.sin(prev))

    root_position = np.stack([x, frames[:, config.ROOT_VERTICAL_DIM], z], axis=1)
    rotations = np.concatenate([yaw_quat(heading)[:, None], joint_quats], axis=1)
    return RawPoseSequence(fps=m.fps, root_position=root_position, joint_rotations=rotations)


def resample(raw: RawPoseSequence, target_fps: float = config.MOTION_FPS) -> RawPoseSequence:
    """降采样：位置线性插值，旋转球面插值。不支持升采样。"""
    if raw.fps < target_fps:
        raise ValidationError(f"resample only downsamples: source {raw.fps} fps < target {target_fps} fps")
    if raw.fps == target_fps:
        return raw
    n_out = int(np.floor((raw.n_frames - 1) * target_fps / raw.fps + 1e-9)) + 1
    u = np.arange(n_out) * raw.fps / target_fps
    i0 = np.minimum(np.floor(u).astype(int), raw.n_frames - 1)
    i1 = np.minimum(i0 + 1, raw.n_frames - 1)
    frac = u - i0

    pos = raw.root_position[i0] + frac[:, None] * (raw.root_position[i1] - raw.root_position[i0])
    rot = slerp(raw.joint_rotations[i0], raw.joint_rotations[i1], np.broadcast_to(frac[:, None], (n_out, config.N_JOINTS)))
    return RawPoseSequence(fps=target_fps, root_position=pos, joint_rotations=rot)
