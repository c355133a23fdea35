"""Command-line surface: train, eval, explain, stream, synth.

Every run writes its fully-resolved configuration into the output directory
so artifacts are reproducible from the logged flags alone. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from divegest import gten, ppm, report
from divegest.dataset import (DatasetError, SyntheticSpec, load_dataset,
                              load_image, load_manifest, split, synth_generate)
from divegest.explain import (IgConfig, OcclusionConfig, integrated_gradients,
                              occlusion_map, render_heatmap)
from divegest.model import (TINY_RESNET_CONFIG, CheckpointError, ConfigError,
                            build_model, freeze_mask, load_checkpoint, predict,
                            save_checkpoint)
from divegest.stream import classify_stream, count_switches, write_annotations_csv
from divegest.train import (AugmentConfig, StepLrSchedule, TrainingDiverged,
                            evaluate, lr_at, normalize, train)


class UsageError(Exception):
    """Bad flags or unusable inputs; maps to exit code 2."""


class RuntimeFailure(Exception):
    """Command started but could not finish; maps to exit code 1."""


def _read_config(value: str) -> str:
    if value == "tiny-resnet":
        return TINY_RESNET_CONFIG
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    return path.read_text(encoding="utf-8")


def _require_file(value: str, what: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, args) -> None:
    skip = {"func"}
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        if key in skip or key == "command":
            continue
        lines.append(f"{key}={getattr(args, key)}")
    (out / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _triple(text: str, what: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"{what} must be three comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = SyntheticSpec(classes=args.classes, per_class=args.per_class,
                         size=args.size, seed=args.seed)
    manifest = synth_generate(spec, out)
    _write_run_config(out, args)
    print(f"wrote {len(manifest)} images for {spec.classes} classes to {out}")
    return 0


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    if not 0.0 < args.train_frac < 1.0:
        raise UsageError(f"--train-frac must be in (0, 1), got {args.train_frac}")
    config_text = _read_config(args.config)
    manifest_path = _require_file(args.data, "manifest")
    manifest = load_manifest(manifest_path)
    train_manifest, test_manifest = split(manifest, (args.train_frac, 1.0 - args.train_frac),
                                          seed=args.seed)
    train_data = load_dataset(train_manifest)
    test_data = load_dataset(test_manifest) if len(test_manifest) else None

    out = _out_dir(args)
    _write_run_config(out, args)
    mean = _triple(args.norm_mean, "--norm-mean")
    std = _triple(args.norm_std, "--norm-std")
    augment_cfg = AugmentConfig(mean=mean, std=std, seed=args.seed) if args.augment else None
    schedule = StepLrSchedule(base_lr=args.base_lr, period=args.lr_period)

    model = build_model(config_text, seed=args.seed)
    mask = freeze_mask(model, args.mode)
    frozen = sorted(name for name, f in mask.items() if f)

    started = time.perf_counter()
    try:
        result = train(model, train_data, epochs=args.epochs, batch_size=args.batch,
                       mode=args.mode, schedule=schedule, augment_cfg=augment_cfg,
                       seed=args.seed, test_data=test_data)
    except TrainingDiverged as err:
        raise RuntimeFailure(str(err)) from err
    wall = time.perf_counter() - started

    report.write_train_report_csv(out / "report.csv", result)
    if test_data is not None:
        _, confusion = evaluate(model, test_data, mean=mean, std=std)
        report.write_confusion_csv(out / "confusion.csv", confusion)
    save_checkpoint(model, out / "checkpoint", epoch=args.epochs,
                    lr=lr_at(schedule, max(args.epochs - 1, 0)), seed=args.seed)

    log_lines = [f"wall_time_s={wall:.3f}", f"frozen_parameters={len(frozen)}"]
    log_lines += [f"frozen: {name}" for name in frozen]
    (out / "run.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    final = result.epochs[-1]
    msg = f"epochs={args.epochs} final_loss={final.loss:.4f} train_acc={final.train_acc:.4f}"
    if result.test_accuracy is not None:
        msg += f" test_acc={report.format_accuracy_pct(result.test_accuracy)}"
    print(msg)
    return 0


def _load_model(args):
    config_text = _read_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_dir():
        raise UsageError(f"checkpoint directory not found: {ckpt}")
    try:
        model, meta = load_checkpoint(ckpt, config_text)
    except CheckpointError as err:
        raise RuntimeFailure(str(err)) from err
    return model, meta


def cmd_eval(args) -> int:
    model, _ = _load_model(args)
    manifest = load_manifest(_require_file(args.data, "manifest"))
    data = load_dataset(manifest)
    mean = _triple(args.norm_mean, "--norm-mean")
    std = _triple(args.norm_std, "--norm-std")

    out = _out_dir(args)
    _write_run_config(out, args)
    accuracy, confusion = evaluate(model, data, mean=mean, std=std)
    rows = report.confidence_table(model, data, mean=mean, std=std)
    report.write_confidence_csv(out / "confidence.csv", rows)
    report.write_confusion_csv(out / "confusion.csv", confusion)
    print(f"accuracy {report.format_accuracy_pct(accuracy)}")
    return 0


def cmd_explain(args) -> int:
    model, _ = _load_model(args)
    image_path = _require_file(args.image, "image")
    image = normalize(load_image(image_path),
                      _triple(args.norm_mean, "--norm-mean"),
                      _triple(args.norm_std, "--norm-std"))

    if args.target is None:
        target, name, _ = predict(model, image)
        print(f"target defaulted to predicted class {target} ({name})")
    else:
        target = args.target
        if not 0 <= target < len(model.vocab):
            raise UsageError(f"--target must be in [0, {len(model.vocab)}), got {target}")

    h, w = image.shape[1], image.shape[2]
    if args.method == "ig" and args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    if args.method == "occlusion" and (
            not 1 <= args.stride <= args.patch or args.patch > min(h, w)):
        raise UsageError(f"need 1 <= stride <= patch <= min(H, W)={min(h, w)}, "
                         f"got patch={args.patch}, stride={args.stride}")

    out = _out_dir(args)
    _write_run_config(out, args)
    binary = args.binary_top if args.binary_top > 0 else None
    if args.method == "ig":
        attribution = integrated_gradients(model, image, IgConfig(target=target, steps=args.steps))
        raster = render_heatmap(attribution, mode=args.render, binary_top_percent=binary)
        ppm.write_pgm(out / "heatmap.pgm", raster)
        if args.dump_gten:
            gten.save(out / "attributions.gten", attribution.values)
        print(f"completeness_gap {attribution.completeness_gap:.6e} "
              f"(score {attribution.score_input:.6f}, baseline {attribution.score_baseline:.6f})")
    else:
        heatmap = occlusion_map(model, image, OcclusionConfig(
            target=target, patch=args.patch, stride=args.stride, fill=args.fill))
        raster = render_heatmap(heatmap, mode=args.render, binary_top_percent=binary)
        ppm.write_pgm(out / "heatmap.pgm", raster)
        row, col = heatmap.max_drop_cell()
        gh, gw = heatmap.values.shape
        print(f"grid {gh}x{gw}; max drop {heatmap.values[row, col]:.6f} at cell "
              f"({row}, {col}), pixel origin {heatmap.cell_origin(row, col)}")
    return 0


def cmd_stream(args) -> int:
    model, _ = _load_model(args)
    if args.frames:
        frames_dir = Path(args.frames)
        if not frames_dir.is_dir():
            raise UsageError(f"frames directory not found: {frames_dir}")
        paths = sorted(frames_dir.glob("*.ppm"))
    else:
        list_file = _require_file(args.list, "frame list")
        paths = [list_file.parent / line.strip()
                 for line in list_file.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not paths:
        raise RuntimeFailure("no frames to classify")

    out = _out_dir(args)
    _write_run_config(out, args)
    mean = _triple(args.norm_mean, "--norm-mean")
    std = _triple(args.norm_std, "--norm-std")
    frames = classify_stream(model, paths, window=args.window, strict=args.strict,
                             mean=mean, std=std)
    write_annotations_csv(out / "annotations.csv", frames)

    switches_q = count_switches(frames)
    raw = [f.raw_label for f in frames]
    switches_1 = count_switches(raw)
    print(f"frames={len(frames)} switches(q={args.window})={switches_q} switches(q=1)={switches_1}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="divegest",
        description="Diver gesture recognition: train, evaluate, explain, and smooth frame streams.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for the run")
    common.add_argument("--out-dir", default="run", help="directory for run artifacts")

    norm = argparse.ArgumentParser(add_help=False)
    norm.add_argument("--norm-mean", default="0.5,0.5,0.5",
                      help="per-channel normalization mean (comma-separated)")
    norm.add_argument("--norm-std", default="0.5,0.5,0.5",
                      help="per-channel normalization std (comma-separated)")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--config", required=True,
                      help="model config path, or the bundled name 'tiny-resnet'")
    ckpt.add_argument("--checkpoint", required=True, help="checkpoint directory")

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic glyph dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, norm], help="train a model on a manifest")
    p.add_argument("--config", required=True,
                   help="model config path, or the bundled name 'tiny-resnet'")
    p.add_argument("--data", required=True, help="manifest.csv path")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--mode", choices=["feature-extraction", "fine-tuning", "all-frozen"],
                   default="fine-tuning")
    p.add_argument("--base-lr", type=float, default=1e-3)
    p.add_argument("--lr-period", type=int, default=7)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, norm, ckpt],
                       help="accuracy, confidence table, confusion matrix")
    p.add_argument("--data", required=True, help="test manifest.csv path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common, norm, ckpt],
                       help="attribution heatmap for one image")
    p.add_argument("--image", required=True, help="PPM image to explain")
    p.add_argument("--method", choices=["ig", "occlusion"], required=True)
    p.add_argument("--target", type=int, default=None,
                   help="class index to attribute (default: predicted class)")
    p.add_argument("--steps", type=int, default=64, help="integration steps (ig)")
    p.add_argument("--patch", type=int, default=8, help="occlusion patch size")
    p.add_argument("--stride", type=int, default=4, help="occlusion stride")
    p.add_argument("--fill", type=float, default=0.0,
                   help="occlusion fill value in normalized space")
    p.add_argument("--render", choices=["magnitude", "signed"], default="magnitude")
    p.add_argument("--binary-top", type=float, default=0.0,
                   help="if > 0, binary raster of the top N%% most important pixels")
    p.add_argument("--dump-gten", action="store_true",
                   help="also write raw attributions as attributions.gten")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("stream", parents=[common, norm, ckpt],
                       help="classify an ordered frame sequence with smoothing")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--frames", help="directory of PPM frames (lexicographic order)")
    src.add_argument("--list", help="text file of frame paths, one per line")
    p.add_argument("--window", type=int, default=5, help="rolling window size Q")
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                   help="abort on unreadable frames (default) or skip them")
    p.set_defaults(func=cmd_stream)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors already printed
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DatasetError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (RuntimeFailure, CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
