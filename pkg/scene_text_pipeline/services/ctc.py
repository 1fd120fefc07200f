# services/ctc.py

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InfeasibleTarget, InstanceTooLarge, InvalidLabel, ShapeMismatch
from .shared_config import BLANK_ID, LOG_ZERO

logger = logging.getLogger(__name__)

MAX_ENUMERATED_PATHS = 10**7
_CHUNK = 1 << 16

LabelSeq = List[int]


@dataclass
class CtcResult:
    nll: float
    grad: np.ndarray  # d nll / d logits, shape [T, K]


def collapse(path: Sequence[int]) -> LabelSeq:
    """Merge adjacent repeats, then drop blanks."""
    out: LabelSeq = []
    prev = None
    for label in path:
        label = int(label)
        if label != prev and label != BLANK_ID:
            out.append(label)
        prev = label
    return out


def required_length(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_target(target: Sequence[int], num_classes: int, frames: int) -> None:
    for label in target:
        if not 1 <= label < num_classes:
            raise InvalidLabel(f"label {label} outside 1..{num_classes - 1}")
    need = required_length(target)
    if need > frames:
        raise InfeasibleTarget(need, frames)


def _as_logprobs(logprobs) -> np.ndarray:
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
        raise ShapeMismatch(f"expected [T, K] log-probabilities with K >= 2, got {lp.shape}")
    return np.maximum(lp, LOG_ZERO)


def ctc_loss(logprobs, target: Sequence[int]) -> CtcResult:
    """
    Negative log-likelihood of `target` under per-frame log-distributions, and its
    gradient with respect to the pre-softmax logits, via log-space forward-backward
    over the blank-augmented target.
    """
    lp = _as_logprobs(logprobs)
    frames, classes = lp.shape
    target = [int(t) for t in target]
    check_target(target, classes, frames)

    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    states = len(ext)
    skip = np.zeros(states, dtype=bool)
    skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # [T, S]

    alpha = np.full((frames, states), LOG_ZERO)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((frames, states), LOG_ZERO)
    beta[-1, -1] = emit[-1, -1]
    if states > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = alpha[-1, -1] if states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])

    # alpha and beta both include the emission at t
    occupancy = np.exp(alpha + beta - emit - log_p)
    posterior = np.zeros((frames, classes))
    for s in range(states):
        posterior[:, ext[s]] += occupancy[:, s]

    grad = np.exp(lp) - posterior
    return CtcResult(nll=float(-log_p), grad=grad)


# ---------------- Enumeration oracle ----------------
def _check_enumerable(frames: int, classes: int) -> int:
    total = classes**frames
    if total > MAX_ENUMERATED_PATHS:
        raise InstanceTooLarge(f"{classes}^{frames} = {total} paths exceeds {MAX_ENUMERATED_PATHS}")
    return total


def _paths(frames: int, classes: int, start: int, stop: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)
    digits = np.empty((len(codes), frames), dtype=np.int64)
    for t in range(frames - 1, -1, -1):
        codes, digits[:, t] = np.divmod(codes, classes)
    return digits


def brute_force_prob(probs, target: Sequence[int]) -> float:
    """Sum, over every frame-label path collapsing to `target`, of the product of frame probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    frames, classes = probs.shape
    total = _check_enumerable(frames, classes)
    target = np.asarray(list(target), dtype=np.int64)
    lookup = np.append(target, -1)

    mass = 0.0
    rows = np.arange(frames)
    for start in range(0, total, _CHUNK):
        paths = _paths(frames, classes, start, min(total, start + _CHUNK))
        prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
        keep = (paths != BLANK_ID) & (paths != prev)
        count = keep.sum(axis=1)
        position = np.clip(np.cumsum(keep, axis=1) - 1, 0, len(target))
        agrees = ~keep | (paths == lookup[position])
        match = (count == len(target)) & agrees.all(axis=1)
        if match.any():
            mass += float(np.prod(probs[rows, paths[match]], axis=1).sum())
    return mass


def brute_force_distribution(probs) -> Dict[Tuple[int, ...], float]:
    """Probability of every collapsed label sequence (the empty one included)."""
    probs = np.asarray(probs, dtype=np.float64)
    frames, classes = probs.shape
    total = _check_enumerable(frames, classes)
    rows = np.arange(frames)
    dist: Dict[Tuple[int, ...], float] = defaultdict(float)
    for start in range(0, total, _CHUNK):
        paths = _paths(frames, classes, start, min(total, start + _CHUNK))
        weights = np.prod(probs[rows, paths], axis=1)
        for path, weight in zip(paths, weights):
            dist[tuple(collapse(path))] += float(weight)
    return dict(dist)


# ---------------- Decoding ----------------
def greedy_decode(logprobs) -> LabelSeq:
    """Best path: per-frame argmax (lowest id on ties), then collapse."""
    lp = np.asarray(logprobs)
    return collapse(np.argmax(lp, axis=1))


def beam_search(logprobs, width: int) -> List[Tuple[Tuple[int, ...], float]]:
    """
    Prefix beam search without a language model. Returns the surviving prefixes with
    their log-probabilities, best first; ties go to the lexicographically smaller prefix.
    """
    if width < 1:
        raise InvalidLabel(f"beam width must be >= 1, got {width}")
    lp = _as_logprobs(logprobs)
    frames, classes = lp.shape

    # prefix -> [log P(ending in blank), log P(ending in a label)]
    beams: Dict[Tuple[int, ...], List[float]] = {(): [0.0, LOG_ZERO]}
    for t in range(frames):
        row = lp[t]
        nxt: Dict[Tuple[int, ...], List[float]] = defaultdict(lambda: [LOG_ZERO, LOG_ZERO])
        for prefix, (p_blank, p_label) in beams.items():
            p_total = np.logaddexp(p_blank, p_label)
            stay = nxt[prefix]
            stay[0] = np.logaddexp(stay[0], p_total + row[BLANK_ID])
            last = prefix[-1] if prefix else None
            if last is not None:
                stay[1] = np.logaddexp(stay[1], p_label + row[last])
            for label in range(1, classes):
                grown = nxt[prefix + (label,)]
                source = p_blank if label == last else p_total
                grown[1] = np.logaddexp(grown[1], source + row[label])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = dict(ranked[:width])

    scored = [(prefix, float(np.logaddexp(*p))) for prefix, p in beams.items()]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


def beam_decode(logprobs, width: int) -> LabelSeq:
    return list(beam_search(logprobs, width)[0][0])
