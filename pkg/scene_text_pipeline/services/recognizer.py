# services/recognizer.py

import logging
from pathlib import Path
from typing import List

import numpy as np
from tqdm import tqdm

from ..nn.checkpoint import load_checkpoint
from ..nn.model import CRNN
from . import ctc, imaging
from .errors import UnwritableOutput, UsageError
from .shared_config import DECODERS
from .synthgen import LabelMap

logger = logging.getLogger(__name__)


class Recognizer:
    """Image -> text with a trained model: fixed-height rescale, forward pass, CTC decode, label lookup."""

    def __init__(self, model: CRNN, labels: LabelMap, decoder: str = "greedy", beam_width: int = 8):
        if decoder not in DECODERS:
            raise UsageError(f"decoder must be one of {DECODERS}, got {decoder!r}")
        if labels.num_classes != model.config.num_classes:
            raise UsageError(f"label map has {labels.num_classes} classes but the model emits {model.config.num_classes}")
        self.model = model
        self.labels = labels
        self.decoder = decoder
        self.beam_width = beam_width

    @classmethod
    def from_checkpoint(cls, path: Path, decoder: str = "greedy", beam_width: int = 8, threads: int = 1) -> "Recognizer":
        checkpoint = load_checkpoint(path)
        logger.info(f"📦 Loaded checkpoint {path}")
        return cls(checkpoint.build_model(threads), checkpoint.label_map, decoder, beam_width)

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        image = imaging.resize_fixed_height(image, self.model.config.input_height)
        min_width = self.model.config.min_width
        if image.shape[1] < min_width:
            image = imaging.resize_to(image, image.shape[0], min_width)
        return image

    def logprobs(self, image: np.ndarray) -> np.ndarray:
        return self.model.forward(self.preprocess(image))

    def decode_ids(self, logprobs: np.ndarray) -> List[int]:
        if self.decoder == "beam":
            return ctc.beam_decode(logprobs, self.beam_width)
        return ctc.greedy_decode(logprobs)

    def recognize(self, image: np.ndarray) -> str:
        return self.labels.decode(self.decode_ids(self.logprobs(image)))

    def recognize_file(self, path: Path) -> str:
        return self.recognize(imaging.load_pgm(path))

    def dump_activations(self, image: np.ndarray, layer: str, out_dir: Path) -> List[Path]:
        """Write each channel of `layer` as `<layer>_<channel>.pgm`, min-max scaled (a flat channel becomes all 0)."""
        maps = self.model.activations(self.preprocess(image), layer)
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise UnwritableOutput(f"cannot create {out_dir}: {e}")
        paths = []
        for channel, fmap in enumerate(tqdm(maps, desc=f"Dumping {layer}")):
            path = out_dir / f"{layer}_{channel}.pgm"
            imaging.save_pgm(imaging.minmax_normalize(fmap), path)
            paths.append(path)
        logger.info(f"✅ Wrote {len(paths)} activation maps to {out_dir}")
        return paths
