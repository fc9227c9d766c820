import math

import pytest

from exprag.exceptions import (
    EmptyInputError,
    InvalidParameterError,
    UndefinedCorrelationError,
    ZeroBaselineError,
)
from exprag.llm import ParsedAnswer
from exprag.metrics import (
    ContextMode,
    EvalRecord,
    exact_match_accuracy,
    invalid_rate,
    macro_f1,
    mean_relative_improvement,
    option_f1,
    pearson,
    relative_improvement,
    spearman,
)
from exprag.segmenter import TaskKind


def record(gold: list[str], letters: list[str] | None) -> EvalRecord:
    parsed = ParsedAnswer.of(letters) if letters else ParsedAnswer.invalid_because("no answer")
    return EvalRecord(
        question_id="q",
        task=TaskKind.DIAGNOSIS,
        context_mode=ContextMode.EXPRAG_EHR,
        gold_letters=gold,
        parsed=parsed,
    )


def test_exact_match_accuracy():
    records = [
        record(["A"], ["A"]),
        record(["B", "C"], ["C", "B"]),
        record(["D"], ["D"]),
        record(["A"], ["B"]),
    ]
    assert exact_match_accuracy(records) == 75.0
    with pytest.raises(EmptyInputError):
        exact_match_accuracy([])


def test_partial_selection_is_not_exact():
    partial = record(["A", "B"], ["A"])
    assert not partial.is_exact
    assert partial.f1 == pytest.approx(2 / 3)


def test_invalid_answers_count_as_wrong():
    invalid = record(["A"], None)
    assert not invalid.is_exact
    assert invalid.f1 == 0.0
    assert invalid_rate([invalid, record(["A"], ["A"])]) == 0.5
    assert exact_match_accuracy([invalid]) == 0.0


def test_option_f1():
    assert option_f1({"A", "B", "C"}, {"A", "B"}) == pytest.approx(0.8)
    assert option_f1({"C"}, {"A", "B"}) == 0.0
    assert option_f1(set(), {"A"}) == 0.0
    with pytest.raises(InvalidParameterError):
        option_f1({"A"}, set())


def test_macro_f1():
    records = [record(["A", "B"], ["A", "B", "C"]), record(["A"], ["A"])]
    assert macro_f1(records) == pytest.approx(0.9)


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [6, 4, 2]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)


def test_spearman_averages_tied_ranks():
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(3 / math.sqrt(10))
    assert spearman([1, 10, 100], [1, 2, 3]) == pytest.approx(1.0)


@pytest.mark.parametrize("correlation", [pearson, spearman])
def test_undefined_correlations(correlation):
    with pytest.raises(UndefinedCorrelationError):
        correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        correlation([1], [2])
    with pytest.raises(InvalidParameterError):
        correlation([1, 2], [1, 2, 3])


def test_relative_improvement():
    assert relative_improvement(79.5, 78.8) == pytest.approx(0.888, abs=1e-3)
    assert relative_improvement(50.0, 100.0) == -50.0
    with pytest.raises(ZeroBaselineError):
        relative_improvement(10.0, 0.0)
    with pytest.raises(ZeroDivisionError):
        relative_improvement(10.0, 0.0)


def test_mean_relative_improvement():
    assert mean_relative_improvement([(110.0, 100.0), (60.0, 50.0)]) == pytest.approx(15.0)
    with pytest.raises(EmptyInputError):
        mean_relative_improvement([])
