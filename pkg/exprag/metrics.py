"""Evaluation metrics: exact-match accuracy, option F1, correlations and relative improvement."""

from collections.abc import Collection, Sequence
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import stats

from exprag.exceptions import (
    EmptyInputError,
    InvalidParameterError,
    UndefinedCorrelationError,
    ZeroBaselineError,
)
from exprag.llm import ParsedAnswer
from exprag.segmenter import TaskKind


class ContextMode(StrEnum):
    DIRECT_ASK = "direct_ask"
    TEXT_RANKER = "text_ranker"
    EXPRAG_EHR = "exprag_ehr"


class EvalRecord(BaseModel):
    """The parsed answer to one question under one context mode."""

    model_config = ConfigDict(frozen=True)

    question_id: str
    task: TaskKind
    context_mode: ContextMode
    gold_letters: list[str]
    parsed: ParsedAnswer

    @property
    def is_exact(self) -> bool:
        return self.parsed.is_valid and self.parsed.letter_set == frozenset(self.gold_letters)

    @property
    def f1(self) -> float:
        if not self.parsed.is_valid:
            return 0.0
        return option_f1(self.parsed.letter_set, frozenset(self.gold_letters))


def exact_match_accuracy(records: Sequence[EvalRecord]) -> float:
    """Percentage of records whose parsed letters equal the gold set; invalid counts as wrong.

    Raises:
        EmptyInputError: If there are no records.
    """
    if not records:
        raise EmptyInputError("Accuracy of an empty record set is undefined.")
    return 100.0 * sum(record.is_exact for record in records) / len(records)


def option_f1(selected: Collection[str], gold: Collection[str]) -> float:
    """F1 between selected and gold option letters; 0 when nothing correct is selected.

    Raises:
        InvalidParameterError: If the gold set is empty.
    """
    gold = set(gold)
    if not gold:
        raise InvalidParameterError("option_f1 needs a non-empty gold set.")
    selected = set(selected)
    hits = len(selected & gold)
    precision = hits / len(selected) if selected else 0.0
    recall = hits / len(gold)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def macro_f1(records: Sequence[EvalRecord]) -> float:
    """Mean per-question option F1.

    Raises:
        EmptyInputError: If there are no records.
    """
    if not records:
        raise EmptyInputError("F1 of an empty record set is undefined.")
    return float(np.mean([record.f1 for record in records]))


def invalid_rate(records: Sequence[EvalRecord]) -> float:
    if not records:
        return 0.0
    return sum(not record.parsed.is_valid for record in records) / len(records)


def _checked(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"Sequences differ in length: {a.size} != {b.size}.")
    if a.size < 2:
        raise UndefinedCorrelationError(f"Correlation needs two points, got {a.size}.")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelationError("Correlation with a constant sequence is undefined.")
    return a, b


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson's correlation coefficient.

    Raises:
        UndefinedCorrelationError: If fewer than two points are given or either side is constant.
    """
    a, b = _checked(x, y)
    return float(stats.pearsonr(a, b).statistic)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rank correlation, with tied values sharing their average rank.

    Raises:
        UndefinedCorrelationError: If fewer than two points are given or either side is constant.
    """
    a, b = _checked(x, y)
    return float(stats.spearmanr(a, b).statistic)


def relative_improvement(new: float, base: float) -> float:
    """Relative improvement in percent of ``new`` over ``base``.

    Raises:
        ZeroBaselineError: If the baseline is not positive.
    """
    if base <= 0:
        raise ZeroBaselineError(f"Relative improvement needs a positive baseline, got {base}.")
    return 100.0 * (new - base) / base


def mean_relative_improvement(cells: Sequence[tuple[float, float]]) -> float:
    """Macro average of the relative improvement over (new, base) cells.

    Raises:
        EmptyInputError: If no cell is given.
    """
    if not cells:
        raise EmptyInputError("No cells to average.")
    return float(np.mean([relative_improvement(new, base) for new, base in cells]))
