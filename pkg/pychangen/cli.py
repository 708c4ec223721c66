"""
Command-line interface: ``changen <subcommand>``.

    changen train    --out ckpt.pt [--config run.json] [--steps 2000]
    changen generate --checkpoint ckpt.pt --out data/ --count 512 [--lambda 0.5] [--T 50]
    changen verify   data/Changen2-S1-512
    changen stats    data/Changen2-S1-512
    changen pretrain data/Changen2-S1-512 --out runs/s1
    changen eval     --detector runs/s1/detector.pt --heldout data/heldout/Changen2-S1-128
    changen sweep    --checkpoint ckpt.pt --out sweep/ --ratios 0,0.5,1
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import RunConfig, load_run_config
from .constants import DEFAULT_DDIM_STEPS
from .datagen import dataset_stats, generate_dataset, verify_dataset
from .errors import ChangenError
from .evaluation import lambda_sweep, pretrain_detector, zero_shot_eval
from .models.detector import DetectorConfig
from .models.rsdit import DenoiserConfig
from .training import TrainConfig, train_denoiser

LOG = logging.getLogger("ChangenCLI")


def _run_config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def cmd_train(args) -> int:
    run = _run_config(args)
    kind = args.condition_kind or run.condition_kind
    channels = run.scene_spec.num_classes if kind == "semantic" else 1
    denoiser = run.denoiser or DenoiserConfig()
    denoiser = dataclasses.replace(denoiser, condition_channels=channels)
    train = run.training or TrainConfig()
    overrides = {"condition_kind": kind}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.seed is not None:
        overrides["seed"] = args.seed
    train = dataclasses.replace(train, **overrides)
    result = train_denoiser(denoiser, run.scene_spec, train, checkpoint_path=args.out,
                            show_progress=not args.quiet)
    LOG.info(f"Training finished: {result.get_summary()}")
    return 0


def cmd_generate(args) -> int:
    run = _run_config(args)
    guidance = run.guidance
    if args.guidance_ratio is not None or args.num_steps is not None:
        guidance = dataclasses.replace(
            guidance,
            guidance_ratio=guidance.guidance_ratio if args.guidance_ratio is None else args.guidance_ratio,
            num_steps=guidance.num_steps if args.num_steps is None else args.num_steps,
        )
    manifest = generate_dataset(
        args.out,
        args.count,
        run.scene_spec,
        run.event_specs,
        guidance,
        args.checkpoint,
        root_seed=run.root_seed if args.root_seed is None else args.root_seed,
        scene_seed_offset=args.scene_seed_offset,
        series_length=run.series_length if args.series_length is None else args.series_length,
        condition_kind=args.condition_kind or run.condition_kind,
        workers=args.workers,
        name=args.name,
        show_progress=not args.quiet,
    )
    manifest.print_summary()
    return 0


def cmd_verify(args) -> int:
    report = verify_dataset(args.dataset)
    report.print_summary()
    return 0 if report.ok else 1


def cmd_stats(args) -> int:
    stats = dataset_stats(args.dataset)
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    else:
        stats.print_summary()
    return 0


def _detector_config(args, run: Optional[RunConfig] = None) -> DetectorConfig:
    config = (run.detector if run and run.detector else None) or DetectorConfig()
    overrides = {}
    if args.detector_steps is not None:
        overrides["steps"] = args.detector_steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_d4:
        overrides["d4_augment"] = False
    return dataclasses.replace(config, **overrides)


def cmd_pretrain(args) -> int:
    run = load_run_config(args.config) if args.config else None
    result = pretrain_detector(args.dataset, _detector_config(args, run), out_dir=args.out,
                               show_progress=not args.quiet)
    if result.losses:
        LOG.info(f"Loss {result.losses[0][1]:.4f} -> {result.losses[-1][1]:.4f}")
    return 0


def cmd_eval(args) -> int:
    report = zero_shot_eval(args.detector, args.heldout, train_dir=args.train_dataset)
    report.print_summary()
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return 0


def cmd_sweep(args) -> int:
    run = _run_config(args)
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    result = lambda_sweep(
        args.checkpoint,
        ratios,
        args.out,
        count=args.count,
        scene_spec=run.scene_spec,
        event_specs=run.event_specs,
        num_steps=run.guidance.num_steps if args.num_steps is None else args.num_steps,
        detector_config=_detector_config(args, run),
        heldout_count=args.heldout_count,
        root_seed=run.root_seed,
        condition_kind=run.condition_kind,
        workers=args.workers,
    )
    result.print_summary()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="changen",
        description="Synthetic change-detection data: event simulation, masked change diffusion, "
                    "dataset generation and detector evaluation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="Hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train an RS-DiT denoiser on procedural scenes")
    p.add_argument("--config", type=str, default=None, help="JSON run config")
    p.add_argument("--out", type=str, required=True, help="Checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="Optimizer steps")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--condition-kind", choices=("semantic", "contour"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="Generate a synthetic change dataset")
    p.add_argument("--checkpoint", type=str, required=True, help="Trained RS-DiT checkpoint")
    p.add_argument("--config", type=str, default=None,
                   help="JSON run config (scene source, event config, guidance)")
    p.add_argument("--out", "-o", type=str, required=True, help="Output directory")
    p.add_argument("--count", "-n", type=int, required=True, help="Number of samples")
    p.add_argument("--lambda", dest="guidance_ratio", type=float, default=None,
                   help="Pre-event guidance ratio in [0, 1]")
    p.add_argument("--T", dest="num_steps", type=int, default=None,
                   help=f"DDIM sampling steps (default {DEFAULT_DDIM_STEPS})")
    p.add_argument("--series-length", type=int, default=None, help="Change steps per sample")
    p.add_argument("--root-seed", "-s", type=int, default=None)
    p.add_argument("--scene-seed-offset", type=int, default=0)
    p.add_argument("--condition-kind", choices=("semantic", "contour"), default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--name", type=str, default=None, help="Override the templated dataset name")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="Re-check a dataset's checksums and labels")
    p.add_argument("dataset", type=str)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="Change prevalence and change-type histogram")
    p.add_argument("dataset", type=str)
    p.add_argument("--json", action="store_true", help="Print JSON instead of a table")
    p.set_defaults(func=cmd_stats)

    def detector_flags(p):
        p.add_argument("--detector-steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-d4", action="store_true", help="Disable D4 augmentation")

    p = sub.add_parser("pretrain", help="Pre-train the Siamese detector on a dataset")
    p.add_argument("dataset", type=str)
    p.add_argument("--out", type=str, required=True,
                   help="Directory for detector.pt, loss.json and loss.png")
    p.add_argument("--config", type=str, default=None, help="JSON run config with a detector block")
    detector_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="Zero-shot evaluation on a held-out dataset")
    p.add_argument("--detector", type=str, required=True)
    p.add_argument("--heldout", type=str, required=True)
    p.add_argument("--train-dataset", type=str, default=None,
                   help="Training dataset for the leak guard (defaults to the checkpoint's seeds)")
    p.add_argument("--out", type=str, default=None, help="JSON metrics report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="Guidance-ratio sweep: coherence and downstream F1")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--ratios", type=str, default="0,0.5,1")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--heldout-count", type=int, default=None)
    p.add_argument("--T", dest="num_steps", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    detector_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    try:
        return args.func(args)
    except ChangenError as e:
        LOG.error(f"{type(e).__name__}: {e.message}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
