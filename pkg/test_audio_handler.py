import numpy as np
import pytest

import config
from audio_handler import (
    PITCH_CLASSES,
    dominant_period,
    extract_audio_features,
    frame_count,
    mel_filterbank,
    pick_peaks,
    synthesize_click_track,
)
from errors import ValidationError
from features import AudioSequence

SR = config.SYNTH_SAMPLE_RATE


@pytest.fixture(scope="module")
def click_features():
    # 120 BPM -> 每 15 帧一拍
    return extract_audio_features(synthesize_click_track(120.0, 4.0, SR), SR)


def test_mel_filterbank_shape_and_range():
    bank = mel_filterbank(22050)
    assert bank.shape == (config.AUDIO_N_MELS, config.AUDIO_N_FFT // 2 + 1)
    assert bank.min() >= 0.0 and bank.max() <= 1.0
    # 每个三角滤波器至少覆盖一个频点
    assert np.all(bank.sum(axis=1) > 0.0)


def test_frame_count_is_30_fps():
    assert frame_count(4 * SR, SR) == 120
    assert frame_count(SR // 2, SR) == 15


def test_click_track_feature_layout(click_features):
    assert isinstance(click_features, AudioSequence)
    assert click_features.frames.shape == (120, config.MUSIC_DIM)
    onset = click_features.frames[:, AudioSequence.ONSET]
    assert onset.min() >= 0.0 and onset.max() == pytest.approx(1.0)
    flags = click_features.frames[:, [AudioSequence.PEAK, AudioSequence.BEAT]]
    assert set(np.unique(flags)) <= {0.0, 1.0}


def test_click_track_period_and_peaks(click_features):
    onset = click_features.frames[:, AudioSequence.ONSET]
    assert abs(dominant_period(onset) - 15) <= 1
    # 0.25 s 起每 0.5 s 一拍，4 秒内 8 拍
    n_peaks = int(click_features.frames[:, AudioSequence.PEAK].sum())
    assert 6 <= n_peaks <= 8
    assert click_features.frames[:, AudioSequence.BEAT].sum() >= 6


def test_click_track_chroma_is_a(click_features):
    peaks = np.flatnonzero(click_features.frames[:, AudioSequence.PEAK])
    chroma = click_features.frames[peaks, AudioSequence.CHROMA]
    assert all(PITCH_CLASSES[i] == "A" for i in chroma.argmax(axis=1))
    np.testing.assert_allclose(np.linalg.norm(chroma, axis=1), 1.0, atol=1e-12)


def test_click_track_beats_are_one_period_apart(click_features):
    beats = np.flatnonzero(click_features.frames[:, AudioSequence.BEAT])
    assert np.all(np.abs(np.diff(beats) - 15) <= 1)


def test_pure_sine_chroma_is_a_on_interior_frames():
    t = np.arange(2 * SR) / SR
    features = extract_audio_features(np.sin(2.0 * np.pi * 440.0 * t), SR)
    # 首尾两帧的窗口伸出信号边界
    chroma = features.frames[2:-2, AudioSequence.CHROMA]
    assert {PITCH_CLASSES[i] for i in chroma.argmax(axis=1)} == {"A"}


def test_silence_has_no_peaks_or_beats():
    features = extract_audio_features(np.zeros(2 * SR), SR)
    assert features.frames[:, AudioSequence.PEAK].sum() == 0
    assert features.frames[:, AudioSequence.BEAT].sum() == 0
    np.testing.assert_array_equal(features.frames[:, AudioSequence.ONSET], 0.0)
    np.testing.assert_array_equal(features.frames[:, AudioSequence.CHROMA], 0.0)


def test_pick_peaks_needs_local_maximum_above_median():
    onset = np.zeros(40)
    onset[[10, 25]] = [0.5, 1.0]
    onset[26] = 1.0
    # 平顶取左端
    assert pick_peaks(onset).tolist() == [10, 25]
    assert pick_peaks(np.zeros(0)).size == 0


def test_dominant_period_on_short_signal_is_none():
    assert dominant_period(np.ones(4)) is None
    assert dominant_period(np.zeros(100)) is None


@pytest.mark.parametrize(
    "samples, sample_rate, match",
    [
        (np.zeros(100), SR, "too short"),
        (np.zeros(SR), 4000, "below minimum"),
        (np.zeros((SR, 2)), SR, "mono"),
        (np.full(SR, np.nan), SR, "non-finite"),
    ],
)
def test_extract_rejects_bad_input(samples, sample_rate, match):
    with pytest.raises(ValidationError, match=match):
        extract_audio_features(samples, sample_rate)
