import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import config
from errors import ValidationError
from features import (
    AudioSequence,
    MotionSequence,
    RawPoseSequence,
    RootSeed,
    Skeleton,
    decode_motion,
    encode_motion,
    expmap_decode,
    expmap_encode,
    heading_of,
    quat_mul,
    resample,
    wrap_angle,
    yaw_quat,
)


def random_unit_quats(rng, shape):
    q = rng.normal(size=shape + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_raw(rng, n_frames=40, fps=config.MOTION_FPS):
    """根节点只有偏航；RightHand 没有扭转分量（编码会丢掉它）。"""
    skel = Skeleton()
    expmaps = rng.uniform(-1.0, 1.0, size=(n_frames, config.N_JOINTS - 1, 3))
    expmaps[:, skel.index("RightHand") - 1, 0] = 0.0
    heading = np.cumsum(rng.uniform(-0.3, 0.3, size=n_frames)) + rng.uniform(-np.pi, np.pi)
    rotations = np.concatenate([yaw_quat(heading)[:, None], expmap_decode(expmaps)], axis=1)
    position = np.cumsum(rng.normal(0.0, 0.02, size=(n_frames, 3)), axis=0) + [0.0, 0.9, 0.0]
    return RawPoseSequence(fps=fps, root_position=position, joint_rotations=rotations)


def _same_rotation(a, b, tol):
    # q 与 -q 表示同一旋转
    dots = np.abs(np.sum(a * b, axis=-1))
    return np.all(np.abs(dots - 1.0) < tol)


# ==============================================================================
# --- 骨架 ---
# ==============================================================================

def test_default_skeleton_is_valid():
    skel = Skeleton()
    assert len(skel.joint_names) == config.N_JOINTS
    assert skel.parent[0] == -1
    assert skel.dropped_feature_index == 3 * (skel.index("RightHand") - 1)


def test_skeleton_rejects_wrong_joint_count_and_multiple_roots():
    with pytest.raises(ValidationError):
        Skeleton(joint_names=("Hips",), parent=(-1,), offsets=((0.0, 0.0, 0.0),))
    parents = list(Skeleton().parent)
    parents[5] = -1
    with pytest.raises(ValidationError, match="single root"):
        Skeleton(parent=tuple(parents))


def test_skeleton_rejects_parent_after_child():
    parents = list(Skeleton().parent)
    parents[4] = 7
    with pytest.raises(ValidationError):
        Skeleton(parent=tuple(parents))


def test_skeleton_must_name_the_twist_joint():
    names = tuple("Wrist_R" if n == "RightHand" else n for n in Skeleton().joint_names)
    with pytest.raises(ValidationError, match="RightHand"):
        Skeleton(joint_names=names)


# ==============================================================================
# --- exp-map ---
# ==============================================================================

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_expmap_round_trip(seed):
    q = random_unit_quats(np.random.default_rng(seed), (64,))
    back = expmap_decode(expmap_encode(q))
    assert _same_rotation(q, back, 1e-9)


@settings(max_examples=50, deadline=None)
@given(r=arrays(np.float64, (16, 3), elements=st.floats(-3.0, 3.0)))
def test_expmap_angles_are_canonical(r):
    encoded = expmap_encode(expmap_decode(r))
    assert np.all(np.linalg.norm(encoded, axis=-1) <= np.pi + 1e-12)


def test_expmap_of_identity_is_zero():
    np.testing.assert_array_equal(expmap_encode(np.array([1.0, 0.0, 0.0, 0.0])), np.zeros(3))
    np.testing.assert_array_equal(expmap_decode(np.zeros(3)), [1.0, 0.0, 0.0, 0.0])


def test_expmap_encode_rejects_non_unit():
    with pytest.raises(ValidationError, match="unit"):
        expmap_encode(np.array([2.0, 0.0, 0.0, 0.0]))


def test_quat_mul_composes_yaws():
    np.testing.assert_allclose(quat_mul(yaw_quat(0.3), yaw_quat(0.4)), yaw_quat(0.7), atol=1e-14)


@pytest.mark.parametrize("angle", [0.0, 1.0, -2.5, np.pi - 1e-9])
def test_heading_of_yaw_quat(angle):
    assert heading_of(yaw_quat(angle)) == pytest.approx(angle, abs=1e-12)


def test_wrap_angle_range():
    a = np.linspace(-10.0, 10.0, 1001)
    w = wrap_angle(a)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)


# ==============================================================================
# --- 运动编码 ---
# ==============================================================================

def test_encode_emits_63_dims_with_zero_first_root_delta(rng):
    m = encode_motion(random_raw(rng))
    assert m.frames.shape == (40, config.MOTION_DIM)
    np.testing.assert_array_equal(m.frames[0, config.ROOT_FORWARD_DIM :], 0.0)


def test_encode_decode_round_trip_modulo_planar_pose(rng):
    raw = random_raw(rng)
    seed = RootSeed(raw.root_position[0, 0], raw.root_position[0, 2], float(heading_of(raw.joint_rotations[0, 0])))
    back = decode_motion(encode_motion(raw), seed_root=seed)
    np.testing.assert_allclose(back.root_position, raw.root_position, atol=1e-6)
    assert _same_rotation(back.joint_rotations, raw.joint_rotations, 1e-6)


def test_encoding_ignores_planar_translation(rng):
    raw = random_raw(rng)
    shifted = RawPoseSequence(raw.fps, raw.root_position + [3.0, 0.0, -2.0], raw.joint_rotations)
    np.testing.assert_allclose(encode_motion(shifted).frames, encode_motion(raw).frames, atol=1e-12)


def test_encode_requires_30_fps(rng):
    with pytest.raises(ValidationError, match="resample"):
        encode_motion(random_raw(rng, fps=60))


def test_raw_pose_validation(rng):
    raw = random_raw(rng)
    with pytest.raises(ValidationError, match="unit"):
        RawPoseSequence(30, raw.root_position, raw.joint_rotations * 1.1)
    with pytest.raises(ValidationError):
        RawPoseSequence(30, raw.root_position[:1], raw.joint_rotations[:1])


def test_resample_halves_60_fps(rng):
    raw = random_raw(rng, n_frames=61, fps=60)
    out = resample(raw, 30)
    assert out.n_frames == 31
    np.testing.assert_allclose(out.root_position, raw.root_position[::2], atol=1e-12)
    assert _same_rotation(out.joint_rotations, raw.joint_rotations[::2], 1e-12)


def test_resample_refuses_upsampling(rng):
    with pytest.raises(ValidationError, match="downsample"):
        resample(random_raw(rng, fps=24), 30)


# ==============================================================================
# --- 序列类型 ---
# ==============================================================================

def test_motion_sequence_width_check():
    with pytest.raises(ValidationError, match="63"):
        MotionSequence(np.zeros((10, 62)))
    with pytest.raises(ValidationError, match="non-finite"):
        MotionSequence(np.full((10, 63), np.inf))


def test_audio_sequence_flag_dims_must_be_binary():
    frames = np.zeros((5, config.MUSIC_DIM))
    frames[2, AudioSequence.BEAT] = 1.0
    AudioSequence(frames)
    frames[3, AudioSequence.PEAK] = 0.5
    with pytest.raises(ValidationError, match="0 or 1"):
        AudioSequence(frames)
