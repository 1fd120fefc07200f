# services/training.py

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..config import TrainConfig
from ..metrics_logging.metrics_logger import LossLogger
from ..nn import numeric
from ..nn.checkpoint import save_checkpoint
from ..nn.model import CRNN
from ..nn.optimizer import AdadeltaState, adadelta_step
from . import ctc, imaging
from .errors import InfeasibleTarget, NonFiniteValue, UnwritableOutput, UsageError
from .shared_config import LATEST_CHECKPOINT_NAME, LOSS_LOG_NAME
from .synthgen import DatasetManifest, LabelMap, derive_seed

logger = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    image: np.ndarray  # already at the model's input height
    target: List[int]
    text: str


@dataclass
class TrainSummary:
    batches: int = 0
    skipped_samples: int = 0
    losses: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def first_loss(self) -> Optional[float]:
        return self.losses[0] if self.losses else None

    @property
    def last_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def load_samples(manifest: DatasetManifest, labels: LabelMap, input_height: int, min_width: int = 1) -> List[TrainingSample]:
    """Load, rescale and label every manifest record; an out-of-alphabet text is a dataset/label-map mismatch."""
    samples = []
    for index in tqdm(range(len(manifest)), desc="Loading training images"):
        text = manifest.records[index][1]
        target = labels.encode(text)
        image = imaging.resize_fixed_height(imaging.load_pgm(manifest.image_path(index)), input_height)
        if image.shape[1] < min_width:
            image = imaging.resize_to(image, input_height, min_width)
        samples.append(TrainingSample(image, target, text))
    logger.info(f"📥 Loaded {len(samples)} training samples from {manifest.root}")
    return samples


class Trainer:
    """Minibatch Adadelta training on the mean CTC loss, with seeded epoch shuffles and resumable checkpoints."""

    def __init__(
        self,
        model: CRNN,
        labels: LabelMap,
        config: TrainConfig,
        seed: int,
        state: Optional[AdadeltaState] = None,
        out_dir: Optional[Path] = None,
    ):
        if labels.num_classes != model.config.num_classes:
            raise UsageError(f"label map has {labels.num_classes} classes but the model emits {model.config.num_classes}")
        self.model = model
        self.labels = labels
        self.config = config
        self.seed = seed
        self.state = state if state is not None else AdadeltaState.zeros_like(model.params)
        self.out_dir = Path(out_dir if out_dir is not None else config.checkpoint_dir)
        self.skipped = 0

    def epoch_order(self, epoch: int, count: int) -> np.ndarray:
        return np.random.default_rng(derive_seed(self.seed, epoch)).permutation(count)

    def batches_per_epoch(self, count: int) -> int:
        return math.ceil(count / self.config.batch_size)

    def train_step(self, batch: Sequence[TrainingSample]) -> Optional[float]:
        """One update on the batch mean loss; infeasible targets are skipped. Returns None if nothing was trainable."""
        cfg = self.model.config
        usable = []
        for sample in batch:
            try:
                ctc.check_target(sample.target, cfg.num_classes, cfg.timesteps(sample.image.shape[1]))
                usable.append(sample)
            except InfeasibleTarget as e:
                self.skipped += 1
                logger.warning(f"⚠️ Skipping {sample.text!r}: {e}")
        if not usable:
            return None

        _, logprobs, cache = self.model.forward_batch([s.image for s in usable], train=True)
        results = [ctc.ctc_loss(lp, s.target) for lp, s in zip(logprobs, usable)]
        loss = float(np.mean([r.nll for r in results]))
        if numeric.is_checked() and not math.isfinite(loss):
            raise NonFiniteValue(f"batch loss is {loss}")

        scale = 1.0 / len(usable)
        grads = self.model.backward_batch([r.grad * scale for r in results], cache)
        adadelta_step(self.model.params, grads, self.state, self.config.rho, self.config.eps)
        return loss

    def _save(self, name: Optional[str], epoch: int, next_batch: int, done: int) -> List[Path]:
        extra = {
            "train.epoch": epoch,
            "train.next_batch": next_batch,
            "train.global_batch": done,
            "train.seed": self.seed,
            "numeric": numeric.numeric_mode(),
        }
        paths = [self.out_dir / LATEST_CHECKPOINT_NAME]
        if name is not None:
            paths.insert(0, self.out_dir / name)
        for path in paths:
            save_checkpoint(path, self.model, self.labels, self.state, extra)
        return paths

    def run(self, samples: Sequence[TrainingSample], start_epoch: int = 0, start_batch: int = 0) -> TrainSummary:
        """Train from (start_epoch, start_batch); losses go to `<out_dir>/loss_log.tsv` as `epoch\\tbatch\\tloss`."""
        if not samples:
            raise UsageError("no training samples")
        cfg = self.config
        per_epoch = self.batches_per_epoch(len(samples))
        done = start_epoch * per_epoch + start_batch
        summary = TrainSummary()
        self.skipped = 0
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise UnwritableOutput(f"cannot create checkpoint directory {self.out_dir}: {e}")
        logger.info(
            f"🚀 Training {self.model.config.variant} model: {len(samples)} samples, {per_epoch} batches/epoch, "
            f"epochs {start_epoch}..{cfg.epochs - 1}, seed {self.seed}"
        )

        position = (start_epoch, start_batch)
        with LossLogger(self.out_dir / LOSS_LOG_NAME) as loss_log:
            for epoch in range(start_epoch, cfg.epochs):
                order = self.epoch_order(epoch, len(samples))
                first = start_batch if epoch == start_epoch else 0
                progress = tqdm(range(first, per_epoch), desc=f"Epoch {epoch}", leave=False)
                for b in progress:
                    if cfg.max_batches and done >= cfg.max_batches:
                        break
                    indices = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                    loss = self.train_step([samples[i] for i in indices])
                    done += 1
                    summary.batches += 1
                    position = (epoch, b + 1) if b + 1 < per_epoch else (epoch + 1, 0)
                    if loss is not None:
                        loss_log.log(epoch, b, loss)
                        summary.losses.append(loss)
                        progress.set_postfix(loss=f"{loss:.4f}")
                    if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                        summary.checkpoints.extend(self._save(f"step_{done:06d}.ckpt", *position, done))
                else:
                    if not cfg.checkpoint_every:
                        summary.checkpoints.extend(self._save(f"epoch_{epoch:03d}.ckpt", epoch + 1, 0, done))
                    if summary.losses:
                        logger.info(f"📉 Epoch {epoch} done, last batch loss {summary.losses[-1]:.4f}")
                    continue
                break

        self._save(None, *position, done)
        summary.skipped_samples = self.skipped
        if self.skipped:
            logger.warning(f"⚠️ Skipped {self.skipped} samples with targets too long for their image width")
        logger.info(f"✅ Training finished after {done} batches")
        return summary
