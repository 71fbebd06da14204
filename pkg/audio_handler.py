# audio_handler.py (音频特征：MFCC / chroma / 峰值 / 节拍 / onset 强度，30 fps)

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct, rfft, rfftfreq
from scipy.ndimage import median_filter
from scipy.signal import get_window

import config
from errors import ValidationError
from features import AudioSequence

logger = logging.getLogger(__name__)

PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int = config.AUDIO_N_FFT, n_mels: int = config.AUDIO_N_MELS) -> np.ndarray:
    """(n_mels, n_fft//2+1) 三角滤波器组，0 .. sr/2 上等 mel 间隔。"""
    freqs = rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        left, center, right = edges[m : m + 3]
        rising = (freqs - left) / (center - left)
        falling = (right - freqs) / (right - center)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def chroma_matrix(sample_rate: int, n_fft: int = config.AUDIO_N_FFT) -> np.ndarray:
    """(n_fft//2+1, 12)：每个频点归到一个音级，C=0 … A=9。"""
    freqs = rfftfreq(n_fft, 1.0 / sample_rate)
    fold = np.zeros((freqs.size, config.AUDIO_N_CHROMA))
    valid = freqs >= config.CHROMA_FMIN_HZ
    pitch = np.mod(np.rint(12.0 * np.log2(freqs[valid] / 440.0)).astype(int) + 9, 12)
    fold[np.flatnonzero(valid), pitch] = 1.0
    return fold


def frame_count(n_samples: int, sample_rate: int) -> int:
    return (n_samples * config.MOTION_FPS) // sample_rate


def power_frames(samples: np.ndarray, sample_rate: int, n_fft: int = config.AUDIO_N_FFT) -> np.ndarray:
    """每个运动帧一帧：以 round(t·sr/30) 为中心的 Hann 窗，零填充。返回功率谱 (T, n_fft//2+1)。"""
    n = frame_count(samples.size, sample_rate)
    centers = np.rint(np.arange(n) * sample_rate / config.MOTION_FPS).astype(int)
    padded = np.pad(samples, n_fft // 2)
    frames = sliding_window_view(padded, n_fft)[centers]
    spectrum = rfft(frames * get_window("hann", n_fft), axis=-1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def onset_strength(log_mel: np.ndarray) -> np.ndarray:
    """正向谱通量，按片段最大值归一化到 [0, 1]；第 0 帧为 0。"""
    flux = np.zeros(log_mel.shape[0])
    flux[1:] = np.maximum(0.0, np.diff(log_mel, axis=0)).sum(axis=1)
    peak = flux.max(initial=0.0)
    return flux / peak if peak > 0.0 else flux


def pick_peaks(onset: np.ndarray, median_frames: int = config.ONSET_MEDIAN_FRAMES) -> np.ndarray:
    """局部极大值且高于滑动中值的帧下标。"""
    if onset.size == 0:
        return np.zeros(0, dtype=int)
    running_median = median_filter(onset, size=median_frames, mode="nearest")
    left = np.concatenate([[-np.inf], onset[:-1]])
    right = np.concatenate([onset[1:], [-np.inf]])
    return np.flatnonzero((onset > left) & (onset >= right) & (onset > running_median))


def dominant_period(onset: np.ndarray) -> int | None:
    """onset 强度自相关在 [最小, 最大] 滞后范围内的最大值位置；并列取最小滞后。"""
    max_lag = min(config.BEAT_MAX_LAG_FRAMES, onset.size - 1)
    if max_lag < config.BEAT_MIN_LAG_FRAMES:
        return None
    lags = np.arange(config.BEAT_MIN_LAG_FRAMES, max_lag + 1)
    scores = np.array([np.dot(onset[:-lag], onset[lag:]) for lag in lags])
    if scores.max() <= 0.0:
        return None
    return int(lags[np.argmax(scores)])


def track_beats(onset: np.ndarray, peaks: np.ndarray) -> np.ndarray:
    """
    以最强峰为锚点、主导周期为步长铺设节拍网格，每个预测位置吸附到容差内最近的峰。
    没有峰 -> 没有节拍。
    """
    beats = np.zeros(onset.size)
    if peaks.size == 0:
        return beats
    period = dominant_period(onset)
    if period is None:
        beats[peaks] = 1.0
        return beats
    tolerance = max(1, period // 4)
    anchor = int(peaks[np.argmax(onset[peaks])])
    beats[anchor] = 1.0

    for step in (period, -period):
        position = anchor
        while True:
            predicted = position + step
            if predicted < 0 or predicted >= onset.size:
                break
            distance = np.abs(peaks - predicted)
            nearest = int(np.argmin(distance))
            position = int(peaks[nearest]) if distance[nearest] <= tolerance else predicted
            beats[position] = 1.0
    return beats


def extract_audio_features(samples, sample_rate: int) -> AudioSequence:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValidationError(f"audio must be mono 1-D PCM, got shape {samples.shape}")
    if sample_rate < config.AUDIO_MIN_SAMPLE_RATE:
        raise ValidationError(f"sample_rate {sample_rate} below minimum {config.AUDIO_MIN_SAMPLE_RATE}")
    if samples.size < config.AUDIO_N_FFT:
        raise ValidationError(f"audio too short: {samples.size} samples < one {config.AUDIO_N_FFT}-sample window")
    if not np.all(np.isfinite(samples)):
        raise ValidationError("audio contains non-finite samples")

    power = power_frames(samples, sample_rate)
    log_mel = np.log(power @ mel_filterbank(sample_rate).T + config.AUDIO_LOG_FLOOR)
    mfcc = dct(log_mel, type=2, norm="ortho", axis=1)[:, : config.AUDIO_N_MFCC]

    chroma = power @ chroma_matrix(sample_rate)
    norms = np.linalg.norm(chroma, axis=1, keepdims=True)
    chroma = np.where(norms > 1e-12, chroma / np.where(norms > 1e-12, norms, 1.0), 0.0)

    onset = onset_strength(log_mel)
    peaks = pick_peaks(onset)
    peak_flags = np.zeros(onset.size)
    peak_flags[peaks] = 1.0
    beat_flags = track_beats(onset, peaks)

    frames = np.concatenate([mfcc, chroma, peak_flags[:, None], beat_flags[:, None], onset[:, None]], axis=1)
    logger.debug("🎵 音频处理器: %d 帧, %d 个峰, %d 个节拍", onset.size, peaks.size, int(beat_flags.sum()))
    return AudioSequence(frames)


def synthesize_click_track(
    bpm: float,
    seconds: float,
    sample_rate: int = config.SYNTH_SAMPLE_RATE,
    pitch_hz: float = 440.0,
    offset_s: float = 0.25,
    burst_s: float = 0.03,
) -> np.ndarray:
    """合成节拍音轨：每拍一个指数衰减的短音，拍与拍之间是数字静音。"""
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    burst_len = int(round(burst_s * sample_rate))
    t = np.arange(burst_len) / sample_rate
    burst = np.sin(2.0 * np.pi * pitch_hz * t) * np.exp(-t / (burst_s / 4.0))
    beat = 60.0 / bpm
    start = offset_s
    while start < seconds:
        i = int(round(start * sample_rate))
        j = min(n, i + burst_len)
        out[i:j] += burst[: j - i]
        start += beat
    return out
