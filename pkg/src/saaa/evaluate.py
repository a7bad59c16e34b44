"""Consensus accuracy and per-answer-type evaluation reports."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .answer import predict, top_answers
from .checkpoint import Checkpoint
from .constants import (
    ANSWER_NORMALIZATION,
    ANSWERS_PER_QUESTION,
    CONSENSUS_THRESHOLD,
    AnswerType,
)
from .errors import ConfigurationError, InvalidArgumentError, InvalidRecordError
from .features import FeatureMap
from .model import Example, PreparedData, VqaModel
from .question import QuestionRecord
from .vocabulary import AnswerVocabulary, normalize_answer

logger = logging.getLogger(__name__)


def vqa_accuracy(predicted: str, gt: Sequence[str]) -> float:
    """Consensus accuracy of one answer against ten human answers.

    For each leave-one-out subset of nine answers the prediction scores
    min(matches / 3, 1); the result is the mean over the ten subsets.
    Strings are compared as given.

    Raises:
        InvalidRecordError: If there are not exactly ten answers.
    """
    if len(gt) != ANSWERS_PER_QUESTION:
        raise InvalidRecordError(
            f"Expected {ANSWERS_PER_QUESTION} answers, got {len(gt)}"
        )
    scores = []
    for k in range(len(gt)):
        matches = sum(
            1 for j, answer in enumerate(gt) if j != k and answer == predicted
        )
        scores.append(min(matches / CONSENSUS_THRESHOLD, 1.0))
    return math.fsum(scores) / len(gt)


def record_answer_type(record: QuestionRecord) -> AnswerType:
    """The record's answer type.

    Records that do not carry one get the type of their most frequent answer.
    """
    if record.answer_type is not None:
        return record.answer_type
    if not record.answers:
        return AnswerType.other
    counts = Counter(normalize_answer(answer) for answer in record.answers)
    answer, _ = min(counts.items(), key=lambda item: (-item[1], item[0]))
    return AnswerType.from_answer(answer)


@dataclass(frozen=True)
class Prediction:
    question_id: int
    answer: str
    top5: tuple[tuple[str, float], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "answer": self.answer,
            "top5": [{"answer": answer, "prob": prob} for answer, prob in self.top5],
        }


@dataclass
class EvalReport:
    """Accuracy overall and per answer type.

    Attributes:
        overall: Mean accuracy over all scored examples.
        accuracy: Mean accuracy per answer type, 0.0 for empty types.
        counts: Number of scored examples per answer type.
        example_count: Number of scored examples.
        skipped_count: Records that could not be scored.
        errors: Failure message by question id.
        predictions: Predicted answers, including unscored records.
    """

    overall: float
    accuracy: dict[AnswerType, float]
    counts: dict[AnswerType, int]
    example_count: int
    skipped_count: int
    errors: dict[int, str] = field(default_factory=dict)
    answer_coverage: float | None = None
    predictions: list[Prediction] = field(default_factory=list)

    @classmethod
    def from_scores(
        cls,
        scores: Iterable[tuple[AnswerType, float]],
        skipped_count: int = 0,
        errors: Mapping[int, str] | None = None,
        answer_coverage: float | None = None,
        predictions: Sequence[Prediction] = (),
    ) -> EvalReport:
        """Aggregates (type, score) pairs in an order-independent way."""
        by_type: dict[AnswerType, list[float]] = defaultdict(list)
        for answer_type, score in scores:
            by_type[answer_type].append(score)
        everything = [score for values in by_type.values() for score in values]
        return cls(
            overall=math.fsum(everything) / len(everything) if everything else 0.0,
            accuracy={
                t: math.fsum(by_type[t]) / len(by_type[t]) if by_type[t] else 0.0
                for t in AnswerType
            },
            counts={t: len(by_type[t]) for t in AnswerType},
            example_count=len(everything),
            skipped_count=skipped_count,
            errors=dict(errors or {}),
            answer_coverage=answer_coverage,
            predictions=sorted(predictions, key=lambda p: p.question_id),
        )

    def to_dict(self) -> dict[str, Any]:
        accuracy: dict[str, float] = {str(t): self.accuracy[t] for t in AnswerType}
        accuracy["overall"] = self.overall
        return {
            "accuracy": accuracy,
            "answer_coverage": self.answer_coverage,
            "answer_normalization": ANSWER_NORMALIZATION,
            "counts": {str(t): self.counts[t] for t in AnswerType},
            "errors": {str(qid): self.errors[qid] for qid in sorted(self.errors)},
            "example_count": self.example_count,
            "skipped_count": self.skipped_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Percentages with two decimals under Y/N, Num, Other and All."""
        headings = [t.label for t in AnswerType] + ["All"]
        values = [self.accuracy[t] for t in AnswerType] + [self.overall]
        widths = [max(len(heading), 6) for heading in headings]
        header = " | ".join(h.rjust(w) for h, w in zip(headings, widths))
        row = " | ".join(f"{100 * v:.2f}".rjust(w) for v, w in zip(values, widths))
        return f"{header}\n{row}\n"

    def write(self, path: Path | str) -> None:
        """Writes the JSON report, plus the table next to it as `.txt`."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        path.with_suffix(".txt").write_text(self.to_table(), encoding="utf-8")

    def write_predictions(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for prediction in self.predictions:
                f.write(json.dumps(prediction.to_dict(), sort_keys=True) + "\n")


def score_predictions(
    records: Iterable[QuestionRecord],
    predictions: Mapping[int, str],
    skipped_count: int = 0,
    errors: Mapping[int, str] | None = None,
) -> EvalReport:
    """Scores predicted answers against the records' human answers.

    Records without answers or without a prediction count as skipped.
    """
    scores = []
    for record in records:
        predicted = predictions.get(record.question_id)
        if predicted is None or not record.answers:
            skipped_count += 1
            continue
        gt = [normalize_answer(answer) for answer in record.answers]
        scores.append(
            (record_answer_type(record), vqa_accuracy(normalize_answer(predicted), gt))
        )
    return EvalReport.from_scores(scores, skipped_count, errors)


def _batches(examples: Sequence[Example], size: int) -> Iterable[list[Example]]:
    by_shape: dict[tuple[int, ...], list[Example]] = defaultdict(list)
    for example in examples:
        by_shape[example.features.values.shape].append(example)
    for group in by_shape.values():
        for start in range(0, len(group), size):
            yield group[start : start + size]


def evaluate_examples(
    model: VqaModel, prepared: PreparedData, batch_size: int | None = None
) -> EvalReport:
    """Predicts with dropout off and scores every prepared example."""
    batch_size = batch_size or model.config.eval_batch_size
    predictions: list[Prediction] = []
    for batch in _batches(prepared.examples, batch_size):
        result = model.forward_examples(batch, training=False)
        for row, example in enumerate(batch):
            dist = result.dist.row(row)
            predictions.append(
                Prediction(
                    example.record.question_id,
                    predict(dist, model.answer_vocab),
                    tuple(top_answers(dist, model.answer_vocab, 5)),
                )
            )
    report = score_predictions(
        [example.record for example in prepared.examples],
        {p.question_id: p.answer for p in predictions},
        prepared.skipped,
        prepared.errors,
    )
    report.answer_coverage = model.answer_vocab.coverage
    report.predictions = sorted(predictions, key=lambda p: p.question_id)
    return report


def evaluate_model(
    model: VqaModel,
    records: Sequence[QuestionRecord],
    features: Mapping[int, FeatureMap],
    batch_size: int | None = None,
) -> EvalReport:
    """Evaluates a model on records.

    Records whose features are missing or malformed are reported as errors
    and counted as skipped.

    Raises:
        InvalidArgumentError: If `records` is empty.
    """
    if not records:
        raise InvalidArgumentError("Cannot evaluate an empty record list")
    prepared = model.prepare(records, features, require_answers=False)
    for qid, message in sorted(prepared.errors.items()):
        logger.warning("Question %d skipped: %s", qid, message)
    report = evaluate_examples(model, prepared, batch_size)
    logger.info(
        "Evaluated %d questions (%d skipped): %.2f%%",
        report.example_count,
        report.skipped_count,
        100 * report.overall,
    )
    return report


def evaluate(
    checkpoint: Checkpoint,
    records: Sequence[QuestionRecord],
    features: Mapping[int, FeatureMap],
    vocab: AnswerVocabulary | None = None,
    batch_size: int | None = None,
) -> EvalReport:
    """Evaluates a checkpoint, optionally with a replacement answer vocabulary.

    Raises:
        ConfigurationError: If `vocab` does not match the checkpoint's classes.
    """
    model = VqaModel.from_checkpoint(checkpoint)
    if vocab is not None:
        if len(vocab) != len(model.answer_vocab):
            raise ConfigurationError(
                f"Answer vocabulary has {len(vocab)} entries, the checkpoint "
                f"was trained with {len(model.answer_vocab)}"
            )
        model.answer_vocab = vocab
    return evaluate_model(model, records, features, batch_size)
