"""Constant values and string enums."""

from __future__ import annotations

from enum import StrEnum
from typing import Any

import numpy as np

FEATURE_MAGIC = b"SAAF"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".saaf"

CHECKPOINT_MAGIC = b"SAAC"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".saac"

ANSWERS_PER_QUESTION = 10
"""Number of human answers collected for every train/val question."""

CONSENSUS_THRESHOLD = 3
"""Number of agreeing annotators needed for full credit."""

MAX_QUESTION_LENGTH = 15
UNK_TOKEN = "<unk>"
UNK_ID = 0

L2_EPSILON = 1e-12

MILESTONE_STEPS = (1000, 3000, 6000, 12000, 25000, 50000, 100000, 200000)
"""Evaluation milestones used as the columns of an ablation table."""

ANSWER_NORMALIZATION = "lowercase, trim, collapse whitespace"
"""Human-readable description of the answer matching rule, echoed in reports."""


class AnswerType(StrEnum):
    yes_no = "yes/no"
    number = "number"
    other = "other"

    @classmethod
    def from_answer(cls, answer: str) -> AnswerType:
        """Infers an answer type for records that do not carry one.

        Args:
            answer: A normalized answer string.

        Returns:
            `yes_no` for "yes" and "no", `number` for all-digit answers,
            `other` for everything else.
        """
        match answer:
            case "yes" | "no":
                return AnswerType.yes_no
            case _ if answer.isdigit():
                return AnswerType.number
            case _:
                return AnswerType.other

    @property
    def label(self) -> str:
        """The column heading used in report tables."""
        match self:
            case AnswerType.yes_no:
                return "Y/N"
            case AnswerType.number:
                return "Num"
            case AnswerType.other:
                return "Other"
            case _:
                raise ValueError(f"Unexpected answer type: {self}")


class Activation(StrEnum):
    tanh = "tanh"
    relu = "relu"
    sigmoid = "sigmoid"


class Precision(StrEnum):
    float32 = "float32"
    float64 = "float64"

    @property
    def dtype(self) -> type[np.floating[Any]]:
        """The numpy scalar type used for tensor storage."""
        match self:
            case Precision.float32:
                return np.float32
            case Precision.float64:
                return np.float64
            case _:
                raise ValueError(f"Unexpected precision: {self}")
