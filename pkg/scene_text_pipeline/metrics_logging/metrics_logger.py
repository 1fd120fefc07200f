# metrics_logging/metrics_logger.py

import logging
from pathlib import Path
from typing import Dict, List, Union

from ..services.errors import InvalidManifest, UnwritableOutput

# ---------------- Logging Setup ----------------
logger = logging.getLogger("metrics")

HEADER = "epoch\tbatch\tloss"


# ---------------- Loss Log ----------------
class LossLogger:
    """
    Append-only `epoch<TAB>batch<TAB>loss` log, flushed after every record so an
    interrupted run leaves every finished batch on disk.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            self._file = open(self.path, "a", encoding="utf-8")
        except OSError as e:
            raise UnwritableOutput(f"cannot open loss log {self.path}: {e}")
        if fresh:
            self._file.write(HEADER + "\n")
            self._file.flush()

    def log(self, epoch: int, batch: int, loss: float) -> None:
        self._file.write(f"{epoch}\t{batch}\t{loss:.9g}\n")
        self._file.flush()
        logger.debug(f"[LOSS] epoch={epoch} batch={batch} loss={loss:.6f}")

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "LossLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------- Read Loss Log ----------------
def read_loss_log(path: Union[str, Path]) -> List[Dict[str, float]]:
    records: List[Dict[str, float]] = []
    path = Path(path)
    if not path.exists():
        return records
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line == HEADER:
                continue
            try:
                epoch, batch, loss = line.split("\t")
                records.append({"epoch": int(epoch), "batch": int(batch), "loss": float(loss)})
            except ValueError:
                raise InvalidManifest(f"malformed loss log line in {path}: {line[:200]!r}")
    return records
