"""Command-line entry points: train, infer, eval, profile, make-hints.

Configuration comes from an optional YAML file; command-line flags override
file values, which override built-in defaults. The resolved configuration
is stored inside every checkpoint. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import priors, trainer
from .distill import FileHintProvider, TeacherHintProvider, write_hint_file
from .errors import DatasetError, NumericError, ParameterError, ShapeError
from .generator import DECODER_VARIANTS, GeneratorConfig

log = logging.getLogger(__name__)

# published complexity of the reference configuration at 512x512
REFERENCE_PARAMS = 3.10e6
REFERENCE_MACS = 19.2e9
PARAMS_TOLERANCE = 0.10
MACS_TOLERANCE = 0.15

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ParameterError(f"config file {p} does not exist")
    with open(p) as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise ParameterError(f"config file {p} must contain a mapping")
    return loaded


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_run_config(config_path, flag_overrides: dict) -> dict:
    """Precedence: CLI flag > config file > built-in default."""
    defaults = {
        "generator": asdict(GeneratorConfig()),
        "train": asdict(trainer.TrainConfig()),
        "data": {"root": None, "out_dir": "runs/default", "hint_mode": "surrogate",
                 "teacher_checkpoint": None, "hint_dir": None,
                 "teacher_base_channels": 32, "teacher_seed": 7},
    }
    return _merge(_merge(defaults, _load_config_file(config_path)), flag_overrides)


def _build_hint_provider(run_cfg: dict, train_cfg: trainer.TrainConfig, dataset_root):
    mode = run_cfg["data"].get("hint_mode", "surrogate")
    if mode == "none":
        train_cfg.weights.hint = 0.0
        return None
    if mode == "surrogate":
        teacher = trainer.build_surrogate_teacher(
            base_channels=run_cfg["data"].get("teacher_base_channels", 32),
            seed=run_cfg["data"].get("teacher_seed", 7))
        train_cfg.teacher_channels = teacher.cfg.channel_schedule[-1]
        return TeacherHintProvider(teacher)
    if mode == "checkpoint":
        ckpt_path = run_cfg["data"].get("teacher_checkpoint")
        if not ckpt_path:
            raise ParameterError("hint_mode 'checkpoint' needs data.teacher_checkpoint")
        teacher_state = trainer.load_checkpoint(ckpt_path)
        teacher = teacher_state.generator
        teacher.eval()
        train_cfg.teacher_channels = teacher.cfg.channel_schedule[-1]
        return TeacherHintProvider(teacher)
    if mode == "files":
        hint_dir = run_cfg["data"].get("hint_dir") or (Path(dataset_root) / "train" / "hazy")
        return FileHintProvider(hint_dir)
    raise ParameterError(f"unknown hint_mode {mode!r}")


def cmd_train(args) -> int:
    overrides = {
        "generator": {"decoder_variant": args.decoder,
                      "base_channels": args.base_channels},
        "train": {"epochs": args.epochs, "batch_size": args.batch_size,
                  "lr0": args.lr0, "delta": args.delta, "seed": args.seed,
                  "crop": args.crop, "steps_per_epoch": args.steps_per_epoch,
                  "n_critic": args.n_critic, "perceptual": args.perceptual,
                  "patience": args.patience,
                  "flip": False if args.no_flip else None},
        "data": {"root": args.dataset, "out_dir": args.out,
                 "hint_mode": args.hint_mode,
                 "teacher_checkpoint": args.teacher_checkpoint},
    }
    try:
        run_cfg = resolve_run_config(args.config, overrides)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    dataset_root = run_cfg["data"]["root"]
    if not dataset_root:
        print("error: no dataset root given (flag --dataset or config data.root)",
              file=sys.stderr)
        return EXIT_USAGE
    if not Path(dataset_root).exists():
        print(f"error: dataset root {dataset_root} does not exist", file=sys.stderr)
        return EXIT_USAGE

    try:
        gen_cfg = GeneratorConfig(**run_cfg["generator"])
        train_cfg = trainer.TrainConfig(**run_cfg["train"])
        hint_provider = _build_hint_provider(run_cfg, train_cfg, dataset_root)
        extractor = losses_mod.make_extractor(train_cfg.perceptual)
    except (ParameterError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(run_cfg["data"]["out_dir"])
    try:
        state, history, best = trainer.train(gen_cfg, train_cfg, dataset_root,
                                             hint_provider=hint_provider,
                                             out_dir=out_dir, extractor=extractor,
                                             run_config=run_cfg)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trained {len(history)} epochs; outputs in {out_dir}")
    if best is not None:
        print(f"best checkpoint: {best}")
    return EXIT_OK


def _infer_one(state, image_path, out_dir) -> bool:
    try:
        hazy = data_mod.load_image(image_path)
        hm = priors.extract_haze_map(hazy)
        restored = trainer.padded_inference(state.generator, hazy, hm.values)
        out_path = Path(out_dir) / (Path(image_path).stem + ".png")
        data_mod.save_image(out_path, restored)
        return True
    except Exception as exc:
        log.warning("skipping %s: %s", image_path, exc)
        print(f"warning: skipping {image_path}: {exc}", file=sys.stderr)
        return False


def cmd_infer(args) -> int:
    try:
        state = trainer.load_checkpoint(args.checkpoint)
    except Exception as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    source = Path(args.input)
    if source.is_dir():
        inputs = sorted(p for p in source.iterdir()
                        if p.suffix.lower() in data_mod.IMAGE_EXTENSIONS)
    else:
        inputs = [source]
    if not inputs:
        print(f"error: no images found at {source}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = [_infer_one(state, p, out_dir) for p in inputs]
    if not any(results):
        print("error: every input failed", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {sum(results)}/{len(results)} images to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        state = trainer.load_checkpoint(args.checkpoint)
    except Exception as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        pairs = data_mod.scan_dataset(args.dataset, splits=(args.split,))
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = []
    for pair in pairs:
        lp = data_mod.load_pair(pair)
        restored = trainer.padded_inference(state.generator, lp.hazy, lp.hazemap)
        rows.append((pair.id, metrics_mod.psnr(restored, lp.clean),
                     metrics_mod.ssim(restored, lp.clean)))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    out_path = Path(args.out) if args.out else None
    lines = [("id", "psnr", "ssim")]
    for rid, p, s in rows:
        lines.append((rid, f"{p:.4f}", f"{s:.6f}"))
        print(f"{rid}: PSNR {p:.2f} dB, SSIM {s:.4f}")
    lines.append(("mean", f"{mean_psnr:.4f}", f"{mean_ssim:.6f}"))
    print(f"mean: PSNR {mean_psnr:.2f} dB, SSIM {mean_ssim:.4f}")
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            csv.writer(fh).writerows(lines)
        print(f"wrote {out_path}")
    return EXIT_OK


def cmd_profile(args) -> int:
    overrides = {"generator": {"decoder_variant": args.decoder,
                               "base_channels": args.base_channels}}
    try:
        run_cfg = resolve_run_config(args.config, overrides)
        gen_cfg = GeneratorConfig(**run_cfg["generator"])
        report = metrics_mod.estimate_macs(
            gen_cfg, args.resolution, args.resolution,
            adaptation_mode=args.adaptation,
            teacher_channels=run_cfg["train"].get("teacher_channels", 512),
            adaptation_mlp_ratio=run_cfg["train"].get("adaptation_mlp_ratio", 1))
    except (ParameterError, ShapeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(report.to_text())
    p, m = report.total_params, report.total_macs
    p_ok = abs(p - REFERENCE_PARAMS) <= PARAMS_TOLERANCE * REFERENCE_PARAMS
    m_ok = abs(m - REFERENCE_MACS) <= MACS_TOLERANCE * REFERENCE_MACS
    print(f"params {p / 1e6:.2f}M vs target {REFERENCE_PARAMS / 1e6:.2f}M "
          f"(±{PARAMS_TOLERANCE:.0%}): {'PASS' if p_ok else 'FAIL'}")
    print(f"MACs {m / 1e9:.2f}G vs target {REFERENCE_MACS / 1e9:.2f}G "
          f"(±{MACS_TOLERANCE:.0%}): {'PASS' if m_ok else 'FAIL'}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_make_hints(args) -> int:
    try:
        teacher_state = trainer.load_checkpoint(args.teacher)
        pairs = data_mod.scan_dataset(args.dataset, splits=("train",))
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.hint_size % 16:
        print(f"error: hint size {args.hint_size} must be divisible by 16",
              file=sys.stderr)
        return EXIT_USAGE
    teacher = teacher_state.generator
    teacher.eval()
    provider = TeacherHintProvider(teacher)
    written = 0
    for pair in pairs:
        out_path = pair.hazy_path.with_suffix(".hint")
        if out_path.exists() and not args.force:
            continue
        lp = data_mod.load_pair(pair)
        hazy = _standardize(lp.hazy, args.hint_size)
        hazemap = _standardize(lp.hazemap, args.hint_size)
        x = np.concatenate([hazy, hazemap[..., None]], axis=2)
        tensor = torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        feature = provider.hints([pair.id], tensor).squeeze(0).numpy()
        write_hint_file(out_path, feature)
        written += 1
    print(f"wrote {written} hint files ({len(pairs) - written} already present)")
    return EXIT_OK


def _standardize(image: np.ndarray, size: int) -> np.ndarray:
    """Reflect-pad up to `size` if needed, then center-crop to size x size."""
    h, w = image.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        pad = [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
        pad += [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pad, mode="reflect")
        h, w = image.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptdehaze",
                                     description="Pooling-transformer image dehazing")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the dehazing network")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory for checkpoints and history")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--delta", type=float, help="Stage-I fraction of total epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--n-critic", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--perceptual", choices=("vgg16", "stub"))
    p.add_argument("--decoder", choices=DECODER_VARIANTS)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--hint-mode", choices=("surrogate", "checkpoint", "files", "none"))
    p.add_argument("--teacher-checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dehaze images with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input", help="an image file or a directory of images")
    p.add_argument("--out", default="dehazed")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM on a paired validation set")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter and MAC accounting")
    p.add_argument("--config")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--decoder", choices=DECODER_VARIANTS)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--adaptation", choices=("ptb", "conv"), default="ptb")
    p.add_argument("--csv", help="also write per-layer rows to this CSV path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("make-hints", help="precompute teacher hint files")
    p.add_argument("teacher", help="teacher checkpoint")
    p.add_argument("dataset", help="dataset root")
    p.add_argument("--hint-size", type=int, default=256)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_hints)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
