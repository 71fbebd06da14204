# config.py (全局配置中心)

import logging
import os

from dotenv import load_dotenv

load_dotenv(override=True)

# ==============================================================================
# --- 数据表示 (DATA LAYOUT) ---
# ==============================================================================

MOTION_FPS = 30
N_JOINTS = 21
MOTION_DIM = 63
MUSIC_DIM = 35
LAYOUT_VERSION = 1

# 20 个非根关节 x 3 维 exp-map，去掉右手腕的扭转分量 = 59 维
JOINT_FEATURE_DIMS = 59
ROOT_VERTICAL_DIM = 59
ROOT_FORWARD_DIM = 60
ROOT_LATERAL_DIM = 61
ROOT_HEADING_DIM = 62
DROPPED_TWIST_JOINT = "RightHand"

# 序列长度必须能被 4 整除（两次 stride-2 下采样）
LENGTH_MULTIPLE = 4
MIN_GENERATOR_LENGTH = 16
MIN_CLIP_FRAMES = 128

# ==============================================================================
# --- 音频特征 (AUDIO CHAIN) ---
# ==============================================================================

AUDIO_MIN_SAMPLE_RATE = 8000
AUDIO_N_FFT = 1024
AUDIO_N_MELS = 40
AUDIO_N_MFCC = 20
AUDIO_N_CHROMA = 12
AUDIO_LOG_FLOOR = 1e-10
CHROMA_FMIN_HZ = 27.5
ONSET_MEDIAN_FRAMES = 31
BEAT_MIN_LAG_FRAMES = 6   # 300 BPM
BEAT_MAX_LAG_FRAMES = 60  # 30 BPM
SYNTH_SAMPLE_RATE = 12000

# ==============================================================================
# --- 模型 (ARCHITECTURE DEFAULTS) ---
# ==============================================================================

BASE_CHANNELS = 32
N_DOWN_BLOCKS = 2
N_RES_BLOCKS = 3
TRANSFORMER_LAYERS = 2
TRANSFORMER_HEADS = 4
TRANSFORMER_MODEL_DIM = 64
TRANSFORMER_FF_DIM = 128
LAYER_NORM_EPS = 1e-5
INIT_SEED = 0

# ==============================================================================
# --- 损失与训练 (LOSSES & TRAINING) ---
# ==============================================================================

PROB_CLAMP_EPS = 1e-7
LAMBDA_CYC = 10.0
LAMBDA_ID = 5.0
ID_ANNEAL_FRACTION = 0.2

G_LR = 2e-4
D_LR = 1e-4
ADAM_BETAS = (0.5, 0.999)
ADAM_EPS = 1e-8

DEFAULT_EPOCHS = 30
DEFAULT_STEPS_PER_EPOCH = 20
DEFAULT_BATCH_SIZE = 4
DEFAULT_SEED = 1234
CURRICULUM_LENGTHS = (32, 64, 128)

# 数据预取队列深度（训练线程 <- 预取线程）
PREFETCH_DEPTH = 4

# ==============================================================================
# --- 评估 (METRICS) ---
# ==============================================================================

COVARIANCE_EPS = 1e-6
SYMMETRY_TOL = 1e-12
EVAL_FRACTION = 0.2


# 【补全】评估并行度，由环境变量控制
def _env_threads(name: str = "CYCLEDANCE_THREADS") -> int:
    fallback = os.cpu_count() or 1
    raw = os.getenv(name)
    if not raw:
        return fallback
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger(__name__).warning("⚠️ 配置: %s=%r 不是整数，改用 CPU 核数 %d", name, raw, fallback)
        return fallback


EVAL_THREADS = _env_threads()

# ==============================================================================
# --- 合成数据 (SYNTHETIC BENCHMARK) ---
# ==============================================================================

SYNTH_CLIPS = 20
SYNTH_SECONDS = 10.0
SYNTH_SEED = 7
# 风格间 MFD 至少是同风格 MFD 的这么多倍，基准才有信号
SYNTH_SEPARATION_FACTOR = 10.0

# ==============================================================================
# --- 日志 (LOGGING) ---
# ==============================================================================

LOG_LEVEL = os.getenv("CYCLEDANCE_LOG_LEVEL", "INFO").upper()
SHOW_PROGRESS = os.getenv("CYCLEDANCE_PROGRESS", "1") not in ("0", "false", "False")


def setup_logging(level: str | None = None) -> None:
    """只在程序入口调用一次。"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s | %(message)s",
    )
