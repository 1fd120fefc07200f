# tests/test_evaluation.py

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scene_text_pipeline.nn.model import CRNN
from scene_text_pipeline.services.errors import EmptyCorpus, InvalidManifest, UsageError
from scene_text_pipeline.services.evaluation import (
    EvalPair,
    EvalReport,
    EvaluationService,
    comparison_table,
    crr,
    levenshtein,
    wrr,
)
from scene_text_pipeline.services.recognizer import Recognizer
from scene_text_pipeline.services.synthgen import LabelMap

PAIRS = [
    ("cab", "cab"), ("bad", "bad"), ("hold", "hold"), ("rope", "rope"), ("text", "tent"),
    ("cb", "cab"), ("", "dot"), ("hello", "hell"), ("abc", "xyz"), ("kitten", "sitting"),
]


@pytest.fixture
def pairs():
    return [EvalPair(rt=rt, gt=gt) for rt, gt in PAIRS]


def reference_distance(a, b):
    row = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, cb in enumerate(b, 1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (ca != cb))
    return row[-1]


# ---------------- Distance ----------------
@pytest.mark.parametrize(
    "a, b, expected",
    [("kitten", "sitting", 3), ("", "abc", 3), ("abc", "abc", 0), ("flaw", "lawn", 2), ("क", "ख", 1)],
)
def test_levenshtein_cases(a, b, expected):
    assert levenshtein(a, b) == expected


def test_levenshtein_matches_dynamic_programming():
    rng = np.random.default_rng(0)
    alphabet = list("abcd")
    for _ in range(10_000):
        a = "".join(rng.choice(alphabet, size=int(rng.integers(0, 7))))
        b = "".join(rng.choice(alphabet, size=int(rng.integers(0, 7))))
        d = levenshtein(a, b)
        assert d == reference_distance(a, b)
        assert d == levenshtein(b, a)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
        assert (d == 0) == (a == b)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcé", max_size=8), st.text(alphabet="abcé", max_size=8), st.text(alphabet="abcé", max_size=8))
def test_levenshtein_triangle_inequality(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


# ---------------- CRR / WRR ----------------
def test_fixture_metrics(pairs):
    assert crr(pairs) == 26 / 38
    assert wrr(pairs) == 0.4


def test_crr_cases():
    assert crr([EvalPair("abc", "abc")]) == 1.0
    assert crr([EvalPair("abd", "abc")]) == pytest.approx(2 / 3)
    assert crr([EvalPair("", "abcd")]) == 0.0
    assert crr([EvalPair("xxxxxx", "a")]) == -5.0


def test_wrr_cases():
    assert wrr([EvalPair("a", "a"), EvalPair("b", "c")]) == 0.5
    assert wrr([EvalPair("ab", "abc")]) == 0.0


def test_random_corpora_obey_bounds():
    rng = np.random.default_rng(1)
    words = ["cab", "bad", "hold", "rope", "text", "a", "ba"]
    pairs = [EvalPair(rt=str(rng.choice(words + [""])), gt=str(rng.choice(words))) for _ in range(10_000)]
    assert crr(pairs) <= 1.0
    assert 0.0 <= wrr(pairs) <= 1.0
    exact = [p for p in pairs if p.correct]
    assert crr(exact) == 1.0 and wrr(exact) == 1.0


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        crr([])
    with pytest.raises(EmptyCorpus):
        wrr([])


def test_empty_ground_truth_is_rejected():
    with pytest.raises(InvalidManifest):
        EvalPair("abc", "")


def test_pairs_are_compared_after_nfc():
    pair = EvalPair(rt="cafe\u0301", gt="caf\u00e9")
    assert pair.correct
    assert pair.distance == 0


# ---------------- Reports ----------------
def test_report_lines(pairs):
    report = EvalReport.from_pairs(pairs)
    assert report.metric_lines() == [
        "n_words\t10",
        "n_characters\t38",
        "total_distance\t12",
        "crr\t0.684211",
        "wrr\t0.400000",
    ]
    assert "40.00" in report.table("hybrid")


def test_write_pairs(tmp_path, pairs):
    report = EvalReport.from_pairs(pairs, [f"img{i}.pgm" for i in range(10)])
    report.write_pairs(tmp_path / "pairs.tsv")
    frame = pd.read_csv(tmp_path / "pairs.tsv", sep="\t", keep_default_na=False)
    assert list(frame.columns) == ["path", "rt", "gt", "distance", "correct"]
    assert frame["distance"].sum() == 12
    assert frame.loc[6, "rt"] == "" and frame.loc[6, "gt"] == "dot"


def test_comparison_table(pairs):
    table = comparison_table({"hybrid": EvalReport.from_pairs(pairs), "rnn-only": EvalReport.from_pairs(pairs[:4])})
    lines = table.splitlines()
    assert "WRR (%)" in lines[0] and "CRR (%)" in lines[0]
    assert lines[1].startswith("hybrid") and "40.00" in lines[1]
    assert lines[2].startswith("rnn-only") and "100.00" in lines[2]


# ---------------- Service ----------------
def test_perfect_recognizer_scores_one(small_dataset):
    texts = iter(small_dataset.texts)
    report = EvaluationService(lambda image: next(texts)).evaluate_manifest(small_dataset)
    assert report.wrr == 1.0 and report.crr == 1.0
    assert report.paths == [rel for rel, _ in small_dataset.records]


def test_blank_recognizer_scores_zero(small_dataset):
    report = EvaluationService(lambda image: "").evaluate_manifest(small_dataset)
    assert report.wrr == 0.0 and report.crr == 0.0


def test_recognizer_checks_its_arguments(tiny_config):
    model = CRNN.initialize(tiny_config, seed=0)
    with pytest.raises(UsageError):
        Recognizer(model, LabelMap(("a", "b", "c")), decoder="viterbi")
    with pytest.raises(UsageError):
        Recognizer(model, LabelMap(("a",)))


def test_recognizer_output_uses_label_alphabet(tiny_config, rng):
    labels = LabelMap(("a", "b", "c"))
    model = CRNN.initialize(tiny_config, seed=0)
    for decoder in ("greedy", "beam"):
        text = Recognizer(model, labels, decoder=decoder, beam_width=4).recognize(rng.uniform(size=(40, 90)))
        assert set(text) <= {"a", "b", "c"}
