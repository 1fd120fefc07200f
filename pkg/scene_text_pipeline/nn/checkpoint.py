# nn/checkpoint.py
#
# Layout (all integers little-endian uint32):
#   magic "CRNNCKPT1\n"
#   config block length, config block (UTF-8 `key = value` lines)
#   tensor count, then per tensor: name length, name (UTF-8), rank, extents..., float32 data
# Optimizer accumulators use the reserved name prefix "opt/".

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..config import ModelConfig, dump_flat_config, model_config_from_values, model_config_to_values, parse_flat_config
from ..services.errors import BadCheckpoint, ConfigError, InvalidLabel, ShapeMismatch, UnwritableOutput
from ..services.shared_config import CHECKPOINT_MAGIC, OPTIMIZER_PREFIX
from ..services.synthgen import LabelMap
from . import numeric
from .model import CRNN
from .optimizer import AdadeltaState

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    meta: Dict[str, object]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        try:
            return model_config_from_values(self.meta)
        except ConfigError as e:
            raise BadCheckpoint(f"checkpoint model config is invalid: {e}")

    @property
    def label_map(self) -> LabelMap:
        if "labels" not in self.meta:
            raise BadCheckpoint("checkpoint carries no label map")
        try:
            return LabelMap.from_compact(str(self.meta["labels"]))
        except (ValueError, InvalidLabel) as e:
            raise BadCheckpoint(f"checkpoint label map is corrupt: {e}")

    def get_int(self, key: str, default: int = 0) -> int:
        try:
            return int(self.meta.get(key, default))
        except ValueError:
            raise BadCheckpoint(f"checkpoint field {key!r} is not an integer")

    def build_model(self, threads: int = 1) -> CRNN:
        config = self.model_config
        dtype = numeric.dtype()
        params = {n: t.astype(dtype) for n, t in self.tensors.items() if n in CRNN.parameter_shapes(config)}
        buffers = {n: t.astype(dtype) for n, t in self.tensors.items() if n in CRNN.buffer_shapes(config)}
        try:
            return CRNN(config, params, buffers, threads)
        except (ShapeMismatch, ConfigError) as e:
            raise BadCheckpoint(f"checkpoint tensors do not fit its config: {e}")

    def optimizer_state(self) -> Optional[AdadeltaState]:
        dtype = numeric.dtype()
        opt = {n: t.astype(dtype) for n, t in self.tensors.items() if n.startswith(OPTIMIZER_PREFIX)}
        return AdadeltaState.from_tensors(opt) if opt else None


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    block = dump_flat_config(checkpoint.meta).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _U32.pack(len(block)), block, _U32.pack(len(checkpoint.tensors))]
    for name in sorted(checkpoint.tensors):
        tensor = np.asarray(checkpoint.tensors[name])
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)) + encoded + _U32.pack(tensor.ndim))
        parts.extend(_U32.pack(extent) for extent in tensor.shape)
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise BadCheckpoint(f"{source}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(data):
            raise BadCheckpoint(f"{source}: truncated checkpoint")
        (value,) = _U32.unpack_from(data, pos)
        pos += 4
        return value

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(data):
            raise BadCheckpoint(f"{source}: truncated checkpoint")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    try:
        meta = parse_flat_config(take(u32()).decode("utf-8"), source=source)
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(u32()):
            name = take(u32()).decode("utf-8")
            shape = tuple(u32() for _ in range(u32()))
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    except (UnicodeDecodeError, ConfigError) as e:
        raise BadCheckpoint(f"{source}: corrupt checkpoint: {e}")
    if pos != len(data):
        raise BadCheckpoint(f"{source}: {len(data) - pos} trailing bytes")
    return Checkpoint(meta, tensors)


def save_checkpoint(
    path: Path,
    model: CRNN,
    labels: LabelMap,
    state: Optional[AdadeltaState] = None,
    extra: Optional[Dict[str, object]] = None,
) -> None:
    meta: Dict[str, object] = dict(model_config_to_values(model.config))
    meta["labels"] = labels.to_compact()
    meta.update(extra or {})
    tensors = {**model.params, **model.buffers}
    if state is not None:
        tensors.update(state.to_tensors())

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(encode_checkpoint(Checkpoint(meta, tensors)))
        os.replace(tmp, path)
    except OSError as e:
        raise UnwritableOutput(f"cannot write checkpoint {path}: {e}")
    logger.info(f"💾 Checkpoint saved: {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise BadCheckpoint(f"cannot read checkpoint {path}: {e}")
    return decode_checkpoint(data, source=str(path))
