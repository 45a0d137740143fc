"""
Command-line entry point: ``python -m hiedit <command>``.

Commands: gen-data, train, eval, edit, selftest. Every error is mapped to one
exit code: 1 for configuration and input validation, 2 for file I/O, 3 for
invariant violations and anything unexpected.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from .config import PipelineConfig, load_config, parse_category_mix, write_config
from .dataset_builder import Dataset, build_dataset, load_dataset
from .errors import ConfigError, DataIOError, HieditError
from .metrics import PatchStatEmbedder, ToyEmbedder, evaluate, render_table, write_report
from .pipeline import EditingPipeline
from .seeding import RngStreams
from .selftest import run_selftest
from .tensor_io import read_tensor, save_archive, write_tensor
from .trainer import Trainer, resume_directory

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _open_dataset(config: PipelineConfig, root) -> Dataset:
    """
    Raises:
        ConfigError: the dataset was generated at a different image shape
    """
    manifest_path = Path(root) / "manifest.json"
    expected = [config.image.height, config.image.width, config.image.channels]
    try:
        found = json.loads(manifest_path.read_text(encoding="utf-8")).get("image_shape")
    except OSError as e:
        raise DataIOError(f"could not read dataset manifest: {e}", str(manifest_path)) from e
    except json.JSONDecodeError as e:
        raise DataIOError(f"dataset manifest is not valid JSON: {e}", str(manifest_path)) from e
    if found is not None and list(found) != expected:
        raise ConfigError(f"dataset image shape {found} does not match configured image shape {expected}")
    return load_dataset(root, image_shape=expected)


def read_image(path) -> np.ndarray:
    """
    Load an ``.rbt`` tensor or an 8-bit ``.ppm`` into [H, W, C] floats in [0, 1].

    Raises:
        DataIOError: unreadable file or unsupported format
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".rbt":
        return read_tensor(path)
    if suffix == ".ppm":
        try:
            with Image.open(path) as img:
                return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as e:
            raise DataIOError(f"invalid PPM image: {e}", str(path)) from e
    raise DataIOError(f"unsupported image format {suffix!r}; use .rbt or .ppm", str(path))


def write_preview(path, img: np.ndarray) -> None:
    """8-bit PPM preview of an [H, W, 3] image."""
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as e:
        raise DataIOError(f"could not write preview: {e}", str(path)) from e


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: PipelineConfig, args: argparse.Namespace) -> int:
    manifest = build_dataset(config, args.out_dir)
    _emit({
        "out_dir": str(args.out_dir),
        "count": manifest.count,
        "train": len(manifest.train_ids),
        "val": len(manifest.val_ids),
        "categories": {name: c.model_dump() for name, c in manifest.counts.items()},
    })
    return 0


def cmd_train(config: PipelineConfig, args: argparse.Namespace) -> int:
    dataset = _open_dataset(config, args.dataset)
    trainer = Trainer(config, dataset, args.out_dir)
    if args.resume:
        trainer.resume(resume_directory(args.resume, args.out_dir))
    summary = trainer.run()
    _emit(summary.model_dump())
    return 0


def cmd_eval(config: PipelineConfig, args: argparse.Namespace) -> int:
    dataset = _open_dataset(config, args.dataset)
    if args.checkpoint:
        pipeline, state = EditingPipeline.from_checkpoint(config, args.checkpoint)
        variant = state.variant
    elif config.eval.force_targets:
        pipeline, variant = EditingPipeline(config, dataset.vocab), config.ablation.variant
    else:
        raise ConfigError("eval needs --checkpoint unless --force-targets is set")

    split = config.eval.split
    samples = dataset.split_samples(split)
    streams = RngStreams(config.seed)
    outputs: Dict[str, np.ndarray] = {}
    for sample in samples:
        if config.eval.force_targets:
            outputs[sample.sample_id] = sample.target
        else:
            outputs[sample.sample_id], _ = pipeline.edit(sample.source, sample.instruction,
                                                         streams.generator("sampler", sample.sample_id))
    logger.info(f"Scoring {len(outputs)} {split} outputs")
    emb = ToyEmbedder(pipeline.image_encoder, pipeline.text_encoder, pipeline.vocab)
    report = evaluate(samples, outputs, emb, PatchStatEmbedder(config.fine_patch), split=split, variant=variant)
    write_report(report, args.out_dir)
    write_config(config, args.out_dir)
    sys.stdout.write(render_table(report))
    return 0


def cmd_edit(config: PipelineConfig, args: argparse.Namespace) -> int:
    source = read_image(args.image)
    pipeline, _ = EditingPipeline.from_checkpoint(config, args.checkpoint)
    rng = RngStreams(config.seed).generator("sampler", "edit")
    edited, bundle = pipeline.edit(source, args.instruction, rng)

    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"could not create output directory: {e}", str(out.parent)) from e
    write_tensor(out.with_name(out.name + ".rbt"), edited)
    write_preview(out.with_name(out.name + ".ppm"), edited)
    written = [str(out.with_name(out.name + ".rbt")), str(out.with_name(out.name + ".ppm"))]
    if args.dump_guidance:
        tensors = {"V": bundle.v.values, "V_hat": bundle.v_hat.values}
        tensors.update({name: t.values for name, t in bundle.enhanced().items()})
        dump = out.with_name(out.name + ".guidance.rba")
        save_archive(dump, tensors, {"layers": sorted(tensors), "hyperparameters": config.dimensions()})
        written.append(str(dump))
    _emit({"instruction": args.instruction, "written": written})
    return 0


def cmd_selftest(config: PipelineConfig, args: argparse.Namespace) -> int:
    report = run_selftest(seeds=args.seeds)
    _emit(report.model_dump())
    return 0 if report.passed else 3


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "edit": cmd_edit,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiedit", description="Hypothetical-instruction image editing at desk scale")
    parser.add_argument("--config", help="flat dotted-key JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic hypothetical-editing dataset")
    gen.add_argument("--count", type=int)
    gen.add_argument("--out-dir", required=True, type=Path)
    gen.add_argument("--category-mix", help='e.g. "Physical=1,Temporal=1,Causal=1,Story=1"')

    train = sub.add_parser("train", help="train the editing pipeline")
    train.add_argument("--dataset", required=True, type=Path)
    train.add_argument("--out-dir", required=True, type=Path)
    train.add_argument("--steps", type=int)
    train.add_argument("--overfit", type=int, metavar="N", help="train on one fixed batch of N samples")
    train.add_argument("--resume", metavar="CKPT", help='checkpoint directory or "latest"')
    train.add_argument("--no-wall-time", action="store_true", help="omit wall_ms from the training log")

    ev = sub.add_parser("eval", help="edit a dataset split and score the outputs")
    ev.add_argument("--dataset", required=True, type=Path)
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--split", choices=["train", "val"])
    ev.add_argument("--out-dir", required=True, type=Path)
    ev.add_argument("--force-targets", action="store_true", help="score the targets themselves (debug)")

    edit = sub.add_parser("edit", help="edit one image")
    edit.add_argument("--checkpoint", required=True, type=Path)
    edit.add_argument("--image", required=True, type=Path, help=".rbt or .ppm")
    edit.add_argument("--instruction", required=True)
    edit.add_argument("--out", required=True, help="output path prefix")
    edit.add_argument("--dump-guidance", action="store_true")

    st = sub.add_parser("selftest", help="gradient and invariant checks")
    st.add_argument("--seeds", type=int, default=5)
    return parser


def cli_values(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys set by dedicated flags; unset flags are left out."""
    values: Dict[str, Any] = {"seed": args.seed, "log_level": args.log_level}
    if args.command == "gen-data":
        values["data.count"] = args.count
        if args.category_mix is not None:
            values["data.category_mix"] = parse_category_mix(args.category_mix)
    elif args.command == "train":
        values["train.steps"] = args.steps
        values["train.overfit"] = args.overfit
        if args.no_wall_time:
            values["train.record_wall_time"] = False
    elif args.command == "eval":
        values["eval.split"] = args.split
        if args.force_targets:
            values["eval.force_targets"] = True
    return {k: v for k, v in values.items() if v is not None}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, HieditError):
        return error.exit_code
    if isinstance(error, ValidationError):
        return 1
    if isinstance(error, OSError):
        return 2
    return 3


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level or "INFO"), format=LOG_FORMAT, stream=sys.stderr)
    try:
        config = load_config(args.config, args.overrides, cli_values(args))
        logging.getLogger().setLevel(getattr(logging, config.log_level))
        return COMMANDS[args.command](config, args)
    except Exception as e:
        code = exit_code_for(e)
        if code == 3 and not isinstance(e, HieditError):
            logger.exception(f"{args.command} failed: {e}")
        else:
            logger.error(f"{args.command} failed: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
