# services/evaluation.py

import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from Levenshtein import distance
from tqdm import tqdm

from . import imaging
from .errors import EmptyCorpus, InvalidManifest, UnwritableOutput
from .synthgen import DatasetManifest, LabelMap

logger = logging.getLogger(__name__)


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance over Unicode codepoints."""
    return distance(a, b)


@dataclass(frozen=True)
class EvalPair:
    rt: str  # recognized text
    gt: str  # ground truth

    def __post_init__(self):
        object.__setattr__(self, "rt", unicodedata.normalize("NFC", self.rt))
        object.__setattr__(self, "gt", unicodedata.normalize("NFC", self.gt))
        if not self.gt:
            raise InvalidManifest("ground truth text must be non-empty")

    @property
    def distance(self) -> int:
        return levenshtein(self.rt, self.gt)

    @property
    def correct(self) -> bool:
        return self.rt == self.gt


def crr(pairs: Sequence[EvalPair]) -> float:
    """(nCharacters - sum of distances) / nCharacters; negative when distances exceed the GT length."""
    n_chars = sum(len(p.gt) for p in pairs)
    if n_chars == 0:
        raise EmptyCorpus("no ground-truth characters to score")
    return (n_chars - sum(p.distance for p in pairs)) / n_chars


def wrr(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        raise EmptyCorpus("no words to score")
    return sum(1 for p in pairs if p.correct) / len(pairs)


@dataclass
class EvalReport:
    n_words: int
    n_characters: int
    total_distance: int
    crr: float
    wrr: float
    pairs: List[EvalPair] = field(default_factory=list)
    paths: List[str] = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs: Sequence[EvalPair], paths: Optional[Sequence[str]] = None) -> "EvalReport":
        pairs = list(pairs)
        return cls(
            n_words=len(pairs),
            n_characters=sum(len(p.gt) for p in pairs),
            total_distance=sum(p.distance for p in pairs),
            crr=crr(pairs),
            wrr=wrr(pairs),
            pairs=pairs,
            paths=list(paths) if paths is not None else [],
        )

    def pairs_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "path": self.paths if self.paths else [""] * len(self.pairs),
                "rt": [p.rt for p in self.pairs],
                "gt": [p.gt for p in self.pairs],
                "distance": [p.distance for p in self.pairs],
                "correct": [int(p.correct) for p in self.pairs],
            }
        )

    def metric_lines(self) -> List[str]:
        return [
            f"n_words\t{self.n_words}",
            f"n_characters\t{self.n_characters}",
            f"total_distance\t{self.total_distance}",
            f"crr\t{self.crr:.6f}",
            f"wrr\t{self.wrr:.6f}",
        ]

    def table(self, title: str = "model") -> str:
        frame = pd.DataFrame(
            {"WRR (%)": [100.0 * self.wrr], "CRR (%)": [100.0 * self.crr], "words": [self.n_words], "chars": [self.n_characters]},
            index=[title],
        )
        return frame.to_string(float_format=lambda v: f"{v:.2f}")

    def write_pairs(self, path: Path) -> None:
        try:
            self.pairs_frame().to_csv(path, sep="\t", index=False, encoding="utf-8")
        except OSError as e:
            raise UnwritableOutput(f"cannot write {path}: {e}")


def comparison_table(reports: dict) -> str:
    """Side-by-side WRR/CRR of several models, one row each."""
    frame = pd.DataFrame(
        {name: {"WRR (%)": 100.0 * r.wrr, "CRR (%)": 100.0 * r.crr} for name, r in reports.items()}
    ).T
    return frame.to_string(float_format=lambda v: f"{v:.2f}")


class EvaluationService:
    """Runs a recognizer over every manifest record and aggregates CRR/WRR."""

    def __init__(self, recognize: Callable[[np.ndarray], str], labels: Optional[LabelMap] = None):
        self.recognize = recognize
        self.labels = labels

    def evaluate_manifest(self, manifest: DatasetManifest) -> EvalReport:
        if len(manifest) == 0:
            raise EmptyCorpus(f"manifest {manifest.root} has no records")
        pairs, paths = [], []
        unreachable = 0
        for index in tqdm(range(len(manifest)), desc="Evaluating"):
            rel, gt = manifest.records[index]
            if self.labels is not None and self.labels.missing(gt):
                unreachable += 1
                logger.warning(f"⚠️ {rel}: ground truth {gt!r} has codepoints outside the label map; it cannot be matched")
            rt = self.recognize(imaging.load_pgm(manifest.image_path(index)))
            pairs.append(EvalPair(rt=rt, gt=gt))
            paths.append(rel)
        report = EvalReport.from_pairs(pairs, paths)
        logger.info(
            f"📊 Evaluated {report.n_words} words ({unreachable} out-of-alphabet): "
            f"WRR {report.wrr:.4f}, CRR {report.crr:.4f}"
        )
        return report
