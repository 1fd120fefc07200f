# metrics_logging/metrics.py
from pathlib import Path
from typing import Union

import pandas as pd

from .metrics_logger import read_loss_log


def loss_frame(path: Union[str, Path]) -> pd.DataFrame:
    return pd.DataFrame(read_loss_log(path), columns=["epoch", "batch", "loss"])


def summarize_loss_log(path: Union[str, Path]) -> pd.DataFrame:
    """Per-epoch count / mean / min / last of the batch losses."""
    frame = loss_frame(path)
    if frame.empty:
        return pd.DataFrame(columns=["count", "mean", "min", "last"]).rename_axis("epoch")
    return frame.groupby("epoch")["loss"].agg(["count", "mean", "min", "last"])
