# nn/numeric.py

import logging
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from ..services.errors import ConfigError, NonFiniteValue

logger = logging.getLogger(__name__)

_DTYPES = {"f32": np.float32, "f64": np.float64}

# Global per run: every tensor the model creates uses this dtype.
_state = {"mode": "f32", "checked": True}


def set_numeric_mode(mode: str) -> None:
    if mode not in _DTYPES:
        raise ConfigError(f"numeric mode must be one of {sorted(_DTYPES)}, got {mode!r}")
    _state["mode"] = mode


def numeric_mode() -> str:
    return _state["mode"]


def dtype():
    return _DTYPES[_state["mode"]]


def set_checked(flag: bool) -> None:
    _state["checked"] = bool(flag)


def is_checked() -> bool:
    return _state["checked"]


@contextmanager
def numeric(mode: str) -> Iterator[None]:
    previous = _state["mode"]
    set_numeric_mode(mode)
    try:
        yield
    finally:
        _state["mode"] = previous


def cast(array) -> np.ndarray:
    return np.asarray(array, dtype=dtype())


def check_finite(name: str, *arrays) -> None:
    if not _state["checked"]:
        return
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NonFiniteValue(f"non-finite values in {name}")
