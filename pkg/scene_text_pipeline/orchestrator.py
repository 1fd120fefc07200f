# orchestrator.py

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError
from tqdm import tqdm

from .config import PipelineConfig, RuntimeSettings, configure_logging
from .metrics_logging.metrics import summarize_loss_log
from .nn import numeric
from .nn.checkpoint import load_checkpoint
from .nn.gradcheck import check_blstm, check_conv, check_linear, check_tiny_model
from .nn.model import CRNN
from .services import imaging
from .services.errors import PipelineError, UsageError
from .services.evaluation import EvaluationService
from .services.recognizer import Recognizer
from .services.shared_config import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, LABELS_NAME, LOSS_LOG_NAME, VARIANTS
from .services.synthgen import (
    DatasetGenerator,
    LabelMap,
    build_label_map,
    load_background_pool,
    load_glyph_atlas,
    load_label_map,
    load_manifest,
    load_vocabulary,
    nfc,
)
from .services.training import Trainer, load_samples

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCES = {"model": 1e-4, "blstm": 1e-5, "conv": 1e-6, "linear": 1e-7}


class PipelineArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------- Commands ----------------
def cmd_render(args, settings: RuntimeSettings) -> int:
    cfg = PipelineConfig.load(
        args.config,
        {
            "count": args.count,
            "seed": args.seed,
            "vocabulary": args.vocabulary,
            "atlas": args.atlas,
            "backgrounds": args.backgrounds,
        },
    )
    render = cfg.render
    if render.count is None or render.count < 1:
        raise UsageError(f"--count must be >= 1, got {render.count}")
    if render.seed is None:
        raise UsageError("a seed is required (--seed or `seed = ...` in the config)")
    if render.vocabulary is None or render.atlas is None:
        raise UsageError("both a vocabulary and a glyph atlas are required")

    stages = 3
    with tqdm(total=stages, desc="Initializing render", bar_format="{l_bar}{bar:10}{r_bar}") as pbar:
        pbar.set_description(f"[Stage 1/{stages}] Loading vocabulary & atlas")
        vocab = load_vocabulary(render.vocabulary)
        atlas = load_glyph_atlas(render.atlas)
        bg_pool = load_background_pool(render.backgrounds)
        pbar.update(1)

        pbar.set_description(f"[Stage 2/{stages}] Building label map")
        labels = build_label_map(vocab, render.punctuation)
        pbar.update(1)

        pbar.set_description(f"[Stage 3/{stages}] Rendering")
        generator = DatasetGenerator(vocab, atlas, labels, cfg.ranges, render, bg_pool, settings.threads)
        generator.generate_dataset(render.count, render.seed, Path(args.out))
        pbar.update(1)
    return EXIT_OK


def _resolve_labels(cfg: PipelineConfig, manifest) -> LabelMap:
    if cfg.train.labels is not None:
        return load_label_map(cfg.train.labels)
    beside = manifest.root / LABELS_NAME
    if beside.is_file():
        return load_label_map(beside)
    logger.warning(f"⚠️ No {LABELS_NAME} next to the manifest; deriving the label map from its texts")
    chars = sorted({ch for text in manifest.texts for ch in nfc(text)} | set(cfg.render.punctuation))
    return LabelMap(tuple(chars))


def _train_settings(args, settings: RuntimeSettings, cfg: PipelineConfig) -> RuntimeSettings:
    """Flag > config file > environment/default, for the train-only `numeric` and `threads` keys."""
    return settings.model_copy(
        update={
            "numeric": args.numeric or cfg.train.numeric or settings.numeric,
            "threads": args.threads or cfg.train.threads or settings.threads,
        }
    )


def cmd_train(args, settings: RuntimeSettings) -> int:
    overrides: Dict[str, object] = {
        "manifest": args.manifest,
        "labels": args.labels,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "checkpoint_dir": args.checkpoint_dir,
        "checkpoint_every": args.checkpoint_every,
        "max_batches": args.max_batches,
        "variant": args.variant,
    }
    cfg = PipelineConfig.load(args.config, overrides)
    train = cfg.train
    if train.manifest is None:
        raise UsageError("a training manifest is required (--manifest or `manifest = ...`)")
    settings = _train_settings(args, settings, cfg)
    numeric.set_numeric_mode(settings.numeric)

    manifest = load_manifest(train.manifest)
    start_epoch = start_batch = 0
    state = None
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        model = checkpoint.build_model(settings.threads)
        labels = checkpoint.label_map
        state = checkpoint.optimizer_state()
        seed = checkpoint.get_int("train.seed", train.seed if train.seed is not None else 0)
        start_epoch = checkpoint.get_int("train.epoch")
        start_batch = checkpoint.get_int("train.next_batch")
        logger.info(f"↩️ Resuming from {args.resume} at epoch {start_epoch}, batch {start_batch}")
    else:
        if train.seed is None:
            raise UsageError("a seed is required (--seed or `seed = ...` in the config)")
        seed = train.seed
        labels = _resolve_labels(cfg, manifest)
        model_config = cfg.model.model_copy(update={"num_classes": labels.num_classes})
        model = CRNN.initialize(model_config, seed, settings.threads)

    samples = load_samples(manifest, labels, model.config.input_height, model.config.min_width)
    trainer = Trainer(model, labels, train, seed, state=state)
    summary = trainer.run(samples, start_epoch, start_batch)
    print(f"numeric\t{settings.numeric}")
    print(f"threads\t{settings.threads}")
    print(f"batches\t{summary.batches}")
    print(f"skipped\t{summary.skipped_samples}")
    if summary.last_loss is not None:
        print(f"last_loss\t{summary.last_loss:.6f}")

    per_epoch = summarize_loss_log(trainer.out_dir / LOSS_LOG_NAME)
    for epoch, row in per_epoch.iterrows():
        print(
            f"epoch_loss\t{epoch}\tcount={int(row['count'])}\tmean={row['mean']:.6f}"
            f"\tmin={row['min']:.6f}\tlast={row['last']:.6f}"
        )
    return EXIT_OK


def _recognizer(args, settings: RuntimeSettings) -> Recognizer:
    decoder = "beam" if args.beam else "greedy"
    return Recognizer.from_checkpoint(args.checkpoint, decoder, args.beam or 1, settings.threads)


def cmd_eval(args, settings: RuntimeSettings) -> int:
    recognizer = _recognizer(args, settings)
    manifest = load_manifest(args.manifest)
    report = EvaluationService(recognizer.recognize, recognizer.labels).evaluate_manifest(manifest)
    print(report.table(title=recognizer.model.config.variant))
    for line in report.metric_lines():
        print(line)
    if args.pairs_out:
        report.write_pairs(Path(args.pairs_out))
        logger.info(f"📝 Per-pair records written to {args.pairs_out}")
    return EXIT_OK


def cmd_decode(args, settings: RuntimeSettings) -> int:
    recognizer = _recognizer(args, settings)
    print(recognizer.recognize_file(Path(args.image)))
    return EXIT_OK


def cmd_gradcheck(args, settings: RuntimeSettings) -> int:
    numeric.set_numeric_mode("f64")
    options = dict(seed=args.seed, corrupt=args.corrupt, samples=args.samples)
    if args.layer == "model":
        model_config = None
        if args.config is not None:
            model_config = PipelineConfig.load(args.config).model
            if model_config.num_classes < 2:
                model_config = model_config.model_copy(update={"num_classes": 4})
        report = check_tiny_model(config=model_config, **options)
    else:
        report = {"linear": check_linear, "conv": check_conv, "blstm": check_blstm}[args.layer](**options)

    tolerance = args.tolerance if args.tolerance is not None else GRADCHECK_TOLERANCES[args.layer]
    for line in report.summary_lines():
        print(line)
    passed = report.passed(tolerance)
    print(f"tolerance\t{tolerance:.1e}")
    print(f"status\t{'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_dump_activations(args, settings: RuntimeSettings) -> int:
    recognizer = Recognizer.from_checkpoint(args.checkpoint, threads=settings.threads)
    model = recognizer.model
    if args.list:
        for name in model.layer_names():
            print(name)
        return EXIT_OK
    if not args.layer or not args.image or not args.out:
        raise UsageError("dump-activations needs --image, --layer and --out (or --list)")

    recognizer.dump_activations(imaging.load_pgm(args.image), args.layer, Path(args.out))
    return EXIT_OK


# ---------------- Parser ----------------
def build_parser() -> argparse.ArgumentParser:
    parser = PipelineArgumentParser(
        prog="scene-text",
        description="Synthetic word rendering, CRNN + CTC training, decoding and CRR/WRR evaluation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (1 = bit-exact reproducibility).")
    parser.add_argument("--numeric", choices=["f32", "f64"], default=None, help="Numeric mode; overrides CTCT_NUMERIC.")
    parser.add_argument("--log-level", default=None, help="Logging level; overrides CTCT_LOG_LEVEL.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=PipelineArgumentParser)

    render = sub.add_parser("render", help="Render a synthetic word-image dataset.")
    render.add_argument("--config", type=Path, default=None)
    render.add_argument("--count", type=int, default=None)
    render.add_argument("--seed", type=int, default=None)
    render.add_argument("--out", type=Path, required=True)
    render.add_argument("--vocabulary", type=Path, default=None)
    render.add_argument("--atlas", type=Path, default=None)
    render.add_argument("--backgrounds", type=Path, default=None)
    render.set_defaults(func=cmd_render)

    train = sub.add_parser("train", help="Train a model on a rendered manifest.")
    train.add_argument("--config", type=Path, default=None)
    train.add_argument("--manifest", type=Path, default=None)
    train.add_argument("--labels", type=Path, default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--checkpoint-dir", type=Path, default=None)
    train.add_argument("--checkpoint-every", type=int, default=None)
    train.add_argument("--max-batches", type=int, default=None)
    train.add_argument("--variant", choices=VARIANTS, default=None)
    train.add_argument("--resume", type=Path, default=None, help="Checkpoint to continue from.")
    train.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "Score a checkpoint on a manifest."), ("decode", "Transcribe one PGM image.")):
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--checkpoint", type=Path, required=True)
        cmd.add_argument("--beam", type=int, default=0, help="Beam width; 0 selects greedy decoding.")
        if name == "eval":
            cmd.add_argument("--manifest", type=Path, required=True)
            cmd.add_argument("--pairs-out", type=Path, default=None, help="Write per-pair RT/GT/distance TSV.")
            cmd.set_defaults(func=cmd_eval)
        else:
            cmd.add_argument("--image", type=Path, required=True)
            cmd.set_defaults(func=cmd_decode)

    grad = sub.add_parser("gradcheck", help="Finite-difference gradient check (64-bit).")
    grad.add_argument("--config", type=Path, default=None, help="Take the model shape from this config.")
    grad.add_argument("--layer", choices=sorted(GRADCHECK_TOLERANCES), default="model")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--samples", type=int, default=200)
    grad.add_argument("--tolerance", type=float, default=None)
    grad.add_argument("--corrupt", action="store_true", help="Flip the analytic gradient sign (negative control).")
    grad.set_defaults(func=cmd_gradcheck)

    dump = sub.add_parser("dump-activations", help="Write each channel of a layer's activation as a PGM.")
    dump.add_argument("--checkpoint", type=Path, required=True)
    dump.add_argument("--image", type=Path, default=None)
    dump.add_argument("--layer", default=None)
    dump.add_argument("--out", type=Path, default=None)
    dump.add_argument("--list", action="store_true", help="Print the valid layer names and exit.")
    dump.set_defaults(func=cmd_dump_activations)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = RuntimeSettings()
        updates = {k: v for k, v in (("threads", args.threads), ("numeric", args.numeric), ("log_level", args.log_level)) if v is not None}
        settings = RuntimeSettings(**{**settings.model_dump(), **updates})
    except ValidationError as e:
        print(f"error: invalid runtime settings: {e}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(settings.log_level)
    numeric.set_numeric_mode(settings.numeric)
    numeric.set_checked(settings.checked)

    try:
        return args.func(args, settings)
    except PipelineError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
