# nn/gradcheck.py

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from ..services.errors import UsageError
from ..services.ctc import ctc_loss
from ..config import ModelConfig
from . import layers, numeric, recurrent
from .model import CRNN

logger = logging.getLogger(__name__)

DEFAULT_FD_EPS = 1e-5
# Linear and conv objectives are affine in each coordinate; the step only changes rounding.
AFFINE_FD_EPS = 1e-3
DEFAULT_SAMPLES = 200
# Gradients smaller than this are compared absolutely.
ERROR_FLOOR = 1e-4


@dataclass
class GradCheckEntry:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    checked: int = 0
    skipped_kinks: int = 0
    worst: Optional[GradCheckEntry] = None
    entries: List[GradCheckEntry] = field(default_factory=list)

    def passed(self, tolerance: float) -> bool:
        return self.checked > 0 and self.max_rel_error <= tolerance

    def summary_lines(self) -> List[str]:
        lines = [
            f"checked\t{self.checked}",
            f"skipped_kinks\t{self.skipped_kinks}",
            f"max_rel_error\t{self.max_rel_error:.3e}",
        ]
        if self.worst is not None:
            w = self.worst
            lines.append(f"worst\t{w.name}{list(w.index)}\tanalytic={w.analytic:.6e}\tnumeric={w.numeric:.6e}")
        return lines


def relative_error(analytic: float, approx: float, floor: float = ERROR_FLOOR) -> float:
    return abs(analytic - approx) / max(abs(analytic), abs(approx), floor)


def grad_check(
    loss_fn: Callable[[], float],
    params: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    eps: float = DEFAULT_FD_EPS,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    kink_fn: Optional[Callable[[], Hashable]] = None,
    floor: float = ERROR_FLOOR,
) -> GradCheckReport:
    """
    Compare `analytic` gradients with central differences (f(x+eps) - f(x-eps)) / 2eps on
    a random subsample of parameter coordinates (all of them when there are fewer than
    `samples`). `loss_fn` re-evaluates the objective from the current contents of `params`,
    which are perturbed in place and restored. When `kink_fn` is given, coordinates whose
    perturbation changes its value (a ReLU mask or pool routing flip) are skipped.
    """
    if numeric.numeric_mode() != "f64":
        raise UsageError("gradient checking needs the 64-bit numeric mode")

    coords: List[Tuple[str, int]] = [(name, i) for name in sorted(params) for i in range(params[name].size)]
    order = np.random.default_rng(seed).permutation(len(coords))
    base_signature = kink_fn() if kink_fn is not None else None

    report = GradCheckReport()
    for position in order:
        if report.checked >= samples:
            break
        name, flat_index = coords[position]
        tensor = params[name].reshape(-1)
        original = tensor[flat_index]

        tensor[flat_index] = original + eps
        plus = loss_fn()
        plus_sig = kink_fn() if kink_fn is not None else None
        tensor[flat_index] = original - eps
        minus = loss_fn()
        minus_sig = kink_fn() if kink_fn is not None else None
        tensor[flat_index] = original

        if kink_fn is not None and (plus_sig != base_signature or minus_sig != base_signature):
            report.skipped_kinks += 1
            continue

        approx = (plus - minus) / (2 * eps)
        exact = float(analytic[name].reshape(-1)[flat_index])
        err = relative_error(exact, approx, floor)
        entry = GradCheckEntry(name, tuple(int(v) for v in np.unravel_index(flat_index, params[name].shape)), exact, approx, err)
        report.entries.append(entry)
        report.checked += 1
        logger.debug(f"{name}{list(entry.index)} analytic={exact:.6e} numeric={approx:.6e} rel={err:.2e}")
        if report.worst is None or err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = entry

    logger.info(
        f"🔎 Gradient check: {report.checked} coordinates, {report.skipped_kinks} skipped at kinks, "
        f"max relative error {report.max_rel_error:.3e}"
    )
    return report


def check_model(
    model: CRNN, images: Sequence[np.ndarray], targets: Sequence[Sequence[int]], corrupt: bool = False, **kwargs
) -> GradCheckReport:
    """End-to-end check of the summed CTC loss of a batch through the whole network (train-mode forward)."""
    last: Dict[str, Hashable] = {}

    def objective(keep: bool = False):
        _, logprobs, cache = model.forward_batch(images, train=True, update_stats=False)
        results = [ctc_loss(lp, t) for lp, t in zip(logprobs, targets)]
        last["signature"] = model.kink_signature(cache)
        if keep:
            return results, cache
        return sum(r.nll for r in results)

    results, cache = objective(keep=True)
    analytic = model.backward_batch([r.grad for r in results], cache)
    return grad_check(objective, model.params, _maybe_corrupt(analytic, corrupt), kink_fn=lambda: last["signature"], **kwargs)


def random_targets(rng: np.random.Generator, num_classes: int, lengths: Sequence[int]) -> List[List[int]]:
    return [[int(v) for v in rng.integers(1, num_classes, size=length)] for length in lengths]


# ---------------- Per-layer checks ----------------
def _linear_objective(coeff: np.ndarray) -> Callable[[np.ndarray], float]:
    return lambda y: float(np.sum(coeff * y))


def check_linear(seed: int = 0, corrupt: bool = False, **kwargs) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    params = {"x": rng.normal(size=(5, 4)), "weight": rng.normal(size=(3, 4)), "bias": rng.normal(size=3)}
    coeff = rng.normal(size=(5, 3))
    objective = _linear_objective(coeff)

    def loss() -> float:
        return objective(layers.linear(params["x"], params["weight"], params["bias"]))

    dx, dw, db = layers.linear_backward(coeff, params["x"], params["weight"])
    analytic = {"x": dx, "weight": dw, "bias": db}
    kwargs.setdefault("eps", AFFINE_FD_EPS)
    return grad_check(loss, params, _maybe_corrupt(analytic, corrupt), seed=seed, **kwargs)


def check_conv(seed: int = 0, corrupt: bool = False, pad: int = 1, stride: int = 1, **kwargs) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    params = {"x": rng.normal(size=(2, 6, 7)), "weight": rng.normal(size=(3, 2, 3, 3)), "bias": rng.normal(size=3)}
    y, cache = layers.conv2d(params["x"], params["weight"], params["bias"], pad=pad, stride=stride)
    coeff = rng.normal(size=y.shape)
    objective = _linear_objective(coeff)

    def loss() -> float:
        return objective(layers.conv2d(params["x"], params["weight"], params["bias"], pad=pad, stride=stride)[0])

    dx, dw, db = layers.conv2d_backward(coeff, cache)
    analytic = {"x": dx, "weight": dw, "bias": db}
    kwargs.setdefault("eps", AFFINE_FD_EPS)
    return grad_check(loss, params, _maybe_corrupt(analytic, corrupt), seed=seed, **kwargs)


def check_blstm(seed: int = 0, corrupt: bool = False, steps: int = 4, dim: int = 3, hidden: int = 2, **kwargs) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    params = {"x": rng.normal(size=(steps, dim))}
    for direction in ("fwd", "bwd"):
        params[f"{direction}.W"] = rng.normal(scale=0.5, size=(4 * hidden, dim))
        params[f"{direction}.U"] = rng.normal(scale=0.5, size=(4 * hidden, hidden))
        params[f"{direction}.b"] = rng.normal(scale=0.5, size=4 * hidden)
    coeff = rng.normal(size=(steps, 2 * hidden))
    objective = _linear_objective(coeff)

    def direction(name: str) -> recurrent.LstmParams:
        return {key: params[f"{name}.{key}"] for key in ("W", "U", "b")}

    def loss() -> float:
        return objective(recurrent.blstm_layer(params["x"], direction("fwd"), direction("bwd"))[0])

    _, cache = recurrent.blstm_layer(params["x"], direction("fwd"), direction("bwd"))
    dx, grads_f, grads_b = recurrent.blstm_backward(coeff, cache)
    analytic = {"x": dx}
    analytic.update({f"fwd.{k}": v for k, v in grads_f.items()})
    analytic.update({f"bwd.{k}": v for k, v in grads_b.items()})
    return grad_check(loss, params, _maybe_corrupt(analytic, corrupt), seed=seed, **kwargs)


def _maybe_corrupt(analytic: Dict[str, np.ndarray], corrupt: bool) -> Dict[str, np.ndarray]:
    # Sign flip: the checker must report a large error.
    return {k: -v for k, v in analytic.items()} if corrupt else analytic


# Two conv layers (BN after the first), one BLSTM with 4 units per direction.
TINY_MODEL = dict(
    input_height=16,
    conv_channels=[4, 6],
    conv_kernels=[3, 4],
    conv_pads=[1, 0],
    pool_windows=["4x2", "none"],
    batchnorm_after=[1],
    blstm_layers=1,
    blstm_size=4,
    blstm_size_per_direction=True,
    num_classes=4,
)


def check_tiny_model(seed: int = 0, corrupt: bool = False, config: Optional[ModelConfig] = None, **kwargs) -> GradCheckReport:
    """CTC loss through a whole small network on a 16x24 and a 16x20 random image."""
    config = config if config is not None else ModelConfig(**TINY_MODEL)
    model = CRNN.initialize(config, seed)
    rng = np.random.default_rng(seed + 1)
    height = config.input_height
    images = [rng.uniform(0.0, 1.0, size=(height, 24)), rng.uniform(0.0, 1.0, size=(height, 20))]
    frames = min(config.timesteps(im.shape[1]) for im in images)
    length = max(1, min(3, (frames + 1) // 2))
    targets = random_targets(rng, config.num_classes, [length, max(1, length - 1)])
    return check_model(model, images, targets, corrupt=corrupt, seed=seed, **kwargs)
