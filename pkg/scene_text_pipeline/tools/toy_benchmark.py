# tools/toy_benchmark.py

import argparse
import logging
import time
from pathlib import Path
from typing import Dict

from tqdm import tqdm

from ..config import PipelineConfig
from ..nn import numeric
from ..nn.model import CRNN
from ..services.evaluation import EvalReport, EvaluationService, comparison_table
from ..services.recognizer import Recognizer
from ..services.synthgen import (
    DatasetGenerator,
    Vocabulary,
    build_label_map,
    load_manifest,
)
from ..services.training import Trainer, load_samples
from .procedural_atlas import GLYPH_STROKES, build_procedural_atlas, make_backgrounds, make_vocabulary

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "toy.cfg"


def run_benchmark(
    work_dir: Path,
    config: PipelineConfig,
    train_count: int = 5000,
    test_count: int = 500,
    vocab_size: int = 50,
    seed: int = 7,
    threads: int = 1,
) -> Dict[str, EvalReport]:
    """Render a toy train/held-out split, train both variants on it and score each on the held-out set."""
    work_dir = Path(work_dir)
    stages = 6
    reports: Dict[str, EvalReport] = {}
    with tqdm(total=stages, desc="Initializing toy benchmark", bar_format="{l_bar}{bar:10}{r_bar}") as pbar:
        pbar.set_description(f"[Stage 1/{stages}] Building glyph atlas & backgrounds")
        atlas = build_procedural_atlas()
        backgrounds = make_backgrounds(8, seed)
        pbar.update(1)

        pbar.set_description(f"[Stage 2/{stages}] Drawing vocabulary")
        letters = "".join(ch for ch in GLYPH_STROKES if ch.isalpha())
        vocab = Vocabulary(tuple(make_vocabulary(letters, vocab_size, seed)))
        labels = build_label_map(vocab, config.render.punctuation)
        pbar.update(1)

        pbar.set_description(f"[Stage 3/{stages}] Rendering train & held-out sets")
        generator = DatasetGenerator(vocab, atlas, labels, config.ranges, config.render, backgrounds, threads)
        generator.generate_dataset(train_count, seed, work_dir / "train")
        generator.generate_dataset(test_count, seed + 1, work_dir / "heldout")
        train_manifest = load_manifest(work_dir / "train")
        heldout = load_manifest(work_dir / "heldout")
        pbar.update(1)

        for stage, variant in ((4, "hybrid"), (5, "rnn-only")):
            pbar.set_description(f"[Stage {stage}/{stages}] Training {variant}")
            model_config = config.model.model_copy(update={"variant": variant, "num_classes": labels.num_classes})
            model = CRNN.initialize(model_config, seed, threads)
            samples = load_samples(train_manifest, labels, model_config.input_height, model_config.min_width)
            trainer = Trainer(model, labels, config.train, seed, out_dir=work_dir / f"checkpoints_{variant}")
            trainer.run(samples)
            reports[variant] = EvaluationService(Recognizer(model, labels).recognize, labels).evaluate_manifest(heldout)
            pbar.update(1)

        pbar.set_description(f"[Stage 6/{stages}] Comparing")
        pbar.update(1)
    return reports


if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="Toy comparison of the hybrid and rnn-only recognizers on a procedural alphabet.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--work-dir", type=Path, default=Path("toy_benchmark"))
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    parser.add_argument("--train-count", type=int, default=5000)
    parser.add_argument("--test-count", type=int, default=500)
    parser.add_argument("--vocab-size", type=int, default=50)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--numeric", choices=["f32", "f64"], default="f32")
    args = parser.parse_args()

    numeric.set_numeric_mode(args.numeric)
    cfg = PipelineConfig.load(args.config)
    started = time.perf_counter()
    results = run_benchmark(args.work_dir, cfg, args.train_count, args.test_count, args.vocab_size, args.seed, args.threads)
    print(comparison_table(results))
    print(f"wall_time_s\t{time.perf_counter() - started:.1f}")
