# main.py (命令行入口：synth-data / train / transfer / evaluate / ablate)

import argparse
import json
import logging
import sys
from pathlib import Path

from tqdm import tqdm

import config
from data import (
    STYLE_PAIRS,
    default_style_specs,
    generate_synthetic,
    load_dataset,
    load_raw_pose_motion,
    save_dataset,
    split_domain,
    synthetic_manifest,
)
from errors import NumericError, ValidationError
from features import MotionSequence, RootSeed, Skeleton, decode_motion
from metrics import evaluate, reference_report
from model import ABLATIONS, ArchConfig, IdentityTransfer, build_ablation
from training import Checkpoint, TrainConfig, train
from utils.csv_io import (
    config_hash,
    read_audio_csv,
    read_motion_csv,
    write_motion_csv,
    write_raw_pose_json,
    write_result_csv,
)

logger = logging.getLogger("cycledance")

ABLATION_HEADER = ["pair", "ablation", "direction", "metric", "value", "n_clips", "seed"]


def load_run_config(path, epochs: int | None = None) -> tuple[TrainConfig, ArchConfig]:
    """训练配置 JSON：TrainConfig 的字段 + 可选的 "arch" 对象（只覆盖尺寸，开关由消融名决定）。"""
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from None
    arch_fields = raw.pop("arch", {})
    try:
        arch = ArchConfig(**arch_fields)
    except TypeError as e:
        raise ValidationError(f"invalid arch config: {e}") from None
    if epochs is not None:
        raw["epochs"] = epochs
    return TrainConfig.from_dict(raw), arch


def _train_eval_split(data_dir):
    dx, dy, manifest = load_dataset(data_dir)
    fraction = manifest.get("eval_fraction", config.EVAL_FRACTION)
    return split_domain(dx, fraction), split_domain(dy, fraction)


# ==============================================================================
# --- 子命令 ---
# ==============================================================================

def cmd_synth_data(args) -> None:
    spec_x, spec_y = default_style_specs(args.seed, args.pair)
    dx, dy = generate_synthetic(spec_x, spec_y, args.clips, args.seconds)
    manifest = synthetic_manifest(spec_x, spec_y, args.clips, args.seconds, args.seed, dx, dy)
    save_dataset(args.out, (dx, dy), manifest)
    logger.info("📦 合成数据 (%s) 已写入 %s", args.pair, args.out)


def _run_training(data_dir, ablation: str, cfg: TrainConfig, arch: ArchConfig, out_dir, resume_path=None):
    (train_x, _), (train_y, _) = _train_eval_split(data_dir)
    if resume_path:
        ckpt = Checkpoint.load(resume_path)
        model = ckpt.build_model()
        return train(model, train_x, train_y, cfg, out_dir=out_dir, resume=ckpt, ablation=ckpt.ablation)
    model, flags = build_ablation(ablation, arch)
    return train(model, train_x, train_y, cfg.with_curriculum(flags.curriculum), out_dir=out_dir, ablation=ablation)


def cmd_train(args) -> None:
    if args.resume and not args.config:
        # 沿用检查点里的训练配置，保证可以逐位续训
        ckpt = Checkpoint.load(args.resume)
        stored = dict(ckpt.train_config)
        if args.epochs is not None:
            stored["epochs"] = args.epochs
        cfg, arch = TrainConfig.from_dict(stored), ckpt.arch
    else:
        cfg, arch = load_run_config(args.config, args.epochs)
    result = _run_training(args.data, args.ablation, cfg, arch, args.out, args.resume)
    logger.info("✅ 训练完成: step=%d config_hash=%s", result.checkpoint.step, result.config_hash)


def _read_transfer_input(path) -> tuple[MotionSequence, RootSeed, Skeleton]:
    if str(path).endswith(".pose.json"):
        return load_raw_pose_motion(path)
    return read_motion_csv(path), RootSeed(), Skeleton()


def cmd_transfer(args) -> None:
    if args.identity:
        model, cfg_hash = IdentityTransfer(), config_hash({"identity": True})
    else:
        ckpt = Checkpoint.load(args.ckpt)
        model, cfg_hash = ckpt.build_model(), ckpt.config_hash
    motion, seed_root, skel = _read_transfer_input(args.input)
    music = read_audio_csv(args.music).frames if args.music else None
    if music is not None and music.shape[0] != motion.n_frames:
        raise ValidationError(f"music has {music.shape[0]} frames, motion has {motion.n_frames}")
    out = MotionSequence(model.transfer(args.direction, motion.frames, music), fps=motion.fps)
    write_motion_csv(args.out, out)
    meta = {"config_hash": cfg_hash, "direction": args.direction, "source": str(args.input)}
    if args.raw_out:
        # 输出沿用输入的骨架和起始根部位置
        write_raw_pose_json(args.raw_out, decode_motion(out, skel, seed_root), skel)
        meta["raw_out"] = str(args.raw_out)
    Path(f"{args.out}.meta.json").write_text(json.dumps(meta, sort_keys=True))
    logger.info("🔀 迁移完成: %s -> %s (%d 帧)", args.input, args.out, out.n_frames)


def cmd_evaluate(args) -> None:
    (_, eval_x), (_, eval_y) = _train_eval_split(args.data)
    if args.identity:
        model, cfg_hash = IdentityTransfer(), config_hash({"identity": True})
    else:
        ckpt = Checkpoint.load(args.ckpt)
        model, cfg_hash = ckpt.build_model(), ckpt.config_hash
    report = evaluate(model, eval_x, eval_y, min_gap=args.min_gap, min_keyframes=args.min_keyframes, cfg_hash=cfg_hash)
    report.write_csv(args.out)
    reference = reference_report(eval_x, eval_y, min_gap=args.min_gap, min_keyframes=args.min_keyframes, cfg_hash=cfg_hash)
    reference.write_csv(Path(args.out).with_name("reference.csv"))
    logger.info("📏 评估报告已写入 %s", args.out)


def _pair_name(data_dir) -> str:
    dx, dy, manifest = load_dataset(data_dir)
    return manifest.get("pair", f"{dx.display_name}-{dy.display_name}")


def cmd_ablate(args) -> None:
    cfg, arch = load_run_config(args.config, args.epochs)
    out = Path(args.out)
    pairs = {}
    for data_dir in args.data:
        pair = _pair_name(data_dir)
        if pair in pairs:
            raise ValidationError(f"style pair {pair} given twice ({pairs[pair]} and {data_dir})")
        pairs[pair] = data_dir

    rows, hashes = [], {}
    for pair, data_dir in pairs.items():
        (_, eval_x), (_, eval_y) = _train_eval_split(data_dir)
        pair_hashes = {}
        for name in tqdm(list(ABLATIONS), desc=f"ablate {pair}", disable=not config.SHOW_PROGRESS):
            result = _run_training(data_dir, name, cfg, arch, out / pair / name)
            model = result.checkpoint.build_model()
            report = evaluate(model, eval_x, eval_y, min_keyframes=args.min_keyframes, cfg_hash=result.config_hash)
            report.write_csv(out / pair / name / "report.csv")
            pair_hashes[name] = result.config_hash
            rows.extend((pair, name, r.direction, r.metric, r.value, r.n_clips, cfg.seed) for r in report.rows)
        reference_report(eval_x, eval_y, min_keyframes=args.min_keyframes, cfg_hash=config_hash(pair_hashes)).write_csv(
            out / pair / "reference.csv"
        )
        hashes[pair] = pair_hashes

    write_result_csv(out / "ablation.csv", ABLATION_HEADER, rows, config_hash(hashes))
    logger.info("📊 消融对比已写入 %s（%d 个风格对）", out / "ablation.csv", len(pairs))


# ==============================================================================
# --- 入口 ---
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cycledance", description="音乐驱动的舞蹈风格迁移（桌面规模参考实现）")
    parser.add_argument("--log-level", default=None, help="覆盖 CYCLEDANCE_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="生成合成的双风格数据集")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=config.SYNTH_SEED)
    p.add_argument("--clips", type=int, default=config.SYNTH_CLIPS)
    p.add_argument("--seconds", type=float, default=config.SYNTH_SECONDS)
    p.add_argument("--pair", choices=sorted(STYLE_PAIRS), default="BJ-LC", help="合成的风格对")
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("train", help="训练一个消融配置")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ablation", default="cycledance")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="检查点目录")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("transfer", help="用检查点迁移一段运动")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--in", dest="input", required=True, help="*.motion.csv 或原始姿态 *.pose.json")
    p.add_argument("--music", default=None)
    p.add_argument("--direction", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw-out", default=None, help="另存解码后的原始姿态 JSON")
    p.add_argument("--identity", action="store_true", help="调试：直通模型")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("evaluate", help="在留出集上计算 MFD / PFD")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-gap", type=int, default=0)
    p.add_argument("--min-keyframes", type=int, default=None, help="PFD 所需的最少关键帧数（默认 64）")
    p.add_argument("--identity", action="store_true", help="调试：直通模型")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="训练并评估全部五个消融配置")
    p.add_argument("--data", required=True, action="append", help="数据集目录；可重复，每个风格对一个")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--min-keyframes", type=int, default=None)
    p.set_defaults(handler=cmd_ablate)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    reason = " ".join(str(exc).split())
    print(f"error code={code} kind={type(exc).__name__} reason={reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config.setup_logging(args.log_level)
    if args.command in ("transfer", "evaluate") and not args.identity and not args.ckpt:
        return _fail(2, ValidationError("--ckpt is required unless --identity is given"))
    try:
        args.handler(args)
    except ValidationError as e:
        return _fail(2, e)
    except NumericError as e:
        return _fail(3, e)
    except OSError as e:
        return _fail(2, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
