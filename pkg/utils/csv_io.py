# utils/csv_io.py (文件格式：运动/音频 CSV、结果 CSV、原始姿态 JSON、配置哈希)

import hashlib
import io
import json
from pathlib import Path

import numpy as np

import config
from errors import ValidationError
from features import AudioSequence, MotionSequence, RawPoseSequence, Skeleton

MOTION_HEADER = "fps,joints,layout_version"
FLOAT_FMT = "%.17g"


def config_hash(obj) -> str:
    """规范化 JSON（键排序）的 SHA-256 前 16 位。"""
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _read_matrix(path: Path, skip: int, width: int) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    except ValueError as e:
        raise ValidationError(f"{path.name}: unreadable numeric CSV ({e})") from None
    if data.shape[1] != width:
        raise ValidationError(f"{path.name}: expected width {width}, got {data.shape[1]}")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path.name}: contains non-finite values")
    return data


def write_motion_csv(path, motion: MotionSequence) -> None:
    path = Path(path)
    buf = io.StringIO()
    buf.write(MOTION_HEADER + "\n")
    buf.write(f"{motion.fps},{config.N_JOINTS},{config.LAYOUT_VERSION}\n")
    np.savetxt(buf, motion.frames, fmt=FLOAT_FMT, delimiter=",")
    path.write_text(buf.getvalue())


def read_motion_csv(path, style: str = "") -> MotionSequence:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        values = fh.readline().strip().split(",")
    if header != MOTION_HEADER or len(values) != 3:
        raise ValidationError(f"{path.name}: missing '{MOTION_HEADER}' header")
    try:
        fps, joints, layout = (int(float(v)) for v in values)
    except (ValueError, OverflowError):
        raise ValidationError(f"{path.name}: bad header values {values}") from None
    if joints != config.N_JOINTS or layout != config.LAYOUT_VERSION:
        raise ValidationError(f"{path.name}: unsupported joints={joints} layout_version={layout}")
    frames = _read_matrix(path, 2, config.MOTION_DIM)
    return MotionSequence(frames, style=style, fps=fps)


def write_audio_csv(path, audio: AudioSequence) -> None:
    np.savetxt(Path(path), audio.frames, fmt=FLOAT_FMT, delimiter=",")


def read_audio_csv(path) -> AudioSequence:
    return AudioSequence(_read_matrix(Path(path), 0, config.MUSIC_DIM))


def write_result_csv(path, header: list[str], rows: list, cfg_hash: str) -> None:
    """结果 CSV 第一行是 '# config_hash=…' 注释。浮点数用 repr 写出，保证逐字节可复现。"""
    lines = [f"# config_hash={cfg_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_result_csv(path) -> tuple[dict, list[dict]]:
    meta, rows, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif header is None:
            header = line.split(",")
        elif line:
            rows.append(dict(zip(header, line.split(","))))
    return meta, rows


def write_raw_pose_json(path, raw: RawPoseSequence, skel: Skeleton) -> None:
    doc = {
        "skeleton": {
            "joint_names": list(skel.joint_names),
            "parent": list(skel.parent),
            "offsets": [list(o) for o in skel.offsets],
        },
        "fps": float(raw.fps),
        "frames": [
            {"root_position": raw.root_position[t].tolist(), "rotations": raw.joint_rotations[t].tolist()}
            for t in range(raw.n_frames)
        ],
    }
    Path(path).write_text(json.dumps(doc))


def read_raw_pose_json(path) -> tuple[RawPoseSequence, Skeleton]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        sk = doc["skeleton"]
        skel = Skeleton(tuple(sk["joint_names"]), tuple(sk["parent"]), tuple(tuple(o) for o in sk["offsets"]))
        fps = float(doc["fps"])
        root_position = np.array([f["root_position"] for f in doc["frames"]], dtype=np.float64)
        joint_rotations = np.array([f["rotations"] for f in doc["frames"]], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{path.name}: malformed raw pose JSON ({type(e).__name__}: {e})") from None
    return RawPoseSequence(fps=fps, root_position=root_position, joint_rotations=joint_rotations), skel
