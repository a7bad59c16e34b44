"""The answer vocabulary: the most frequent training answers as classes."""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable, Sequence

from .errors import ConfigurationError
from .question import QuestionRecord

logger = logging.getLogger(__name__)


def normalize_answer(answer: str) -> str:
    """Lowercases, trims and collapses internal whitespace. Nothing else."""
    return " ".join(answer.lower().split())


class AnswerVocabulary:
    """Bidirectional mapping between answer strings and class indices.

    Attributes:
        answers: Answer strings ordered by class index.
        coverage: Fraction of validation answers that are in the vocabulary,
            when a validation set was supplied.
    """

    def __init__(self, answers: Sequence[str], coverage: float | None = None) -> None:
        if len(set(answers)) != len(answers):
            raise ValueError("Answer vocabulary entries must be unique")
        self.answers = list(answers)
        self.index = {answer: i for i, answer in enumerate(self.answers)}
        self.coverage = coverage

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: object) -> bool:
        return isinstance(answer, str) and normalize_answer(answer) in self.index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnswerVocabulary):
            return NotImplemented
        return self.answers == other.answers

    def id_of(self, answer: str) -> int | None:
        return self.index.get(normalize_answer(answer))

    def ids_for(self, answers: Iterable[str]) -> list[int]:
        """Class ids of the in-vocabulary answers, duplicates kept."""
        ids = (self.id_of(answer) for answer in answers)
        return [answer_id for answer_id in ids if answer_id is not None]

    def compute_coverage(self, records: Iterable[QuestionRecord]) -> float:
        """Fraction of all answers of `records` that map to a class."""
        total = 0
        covered = 0
        for record in records:
            total += len(record.answers)
            covered += len(self.ids_for(record.answers))
        return covered / total if total else 0.0


def build_answer_vocab(
    train_records: Iterable[QuestionRecord],
    size: int,
    val_records: Iterable[QuestionRecord] | None = None,
) -> AnswerVocabulary:
    """Keeps the `size` most frequent training answers.

    Every one of the answers of every record is counted; frequency ties are
    broken lexicographically.

    Raises:
        ConfigurationError: If the training records carry no answers.
    """
    counts = Counter(
        normalize_answer(answer)
        for record in train_records
        for answer in record.answers
    )
    if not counts:
        raise ConfigurationError("Training records carry no answers")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    vocab = AnswerVocabulary([answer for answer, _ in ranked[:size]])
    if val_records is not None:
        vocab.coverage = vocab.compute_coverage(val_records)
        logger.info(
            "Answer vocabulary: %d answers covering %.2f%% of validation answers",
            len(vocab),
            100 * vocab.coverage,
        )
    else:
        logger.info("Answer vocabulary: %d answers", len(vocab))
    return vocab
