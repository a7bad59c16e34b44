"""Training configuration and its `key = value` file format."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .constants import MAX_QUESTION_LENGTH, MILESTONE_STEPS, Precision
from .errors import ConfigurationError

PositiveInt = Annotated[int, Field(gt=0)]
Rate = Annotated[float, Field(ge=0.0, lt=1.0)]


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Parses `key = value` lines.

    Blank lines and lines starting with `#` are ignored; a `#` after a value
    starts a comment.

    Raises:
        ConfigurationError: On a line without `=` or a repeated key.
    """
    values: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value'")
        if key in values:
            raise ConfigurationError(f"{source}:{number}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def milestone_label(step: int) -> str:
    """Column heading for a milestone, e.g. 1000 -> "1K"."""
    if step % 1000 == 0:
        return f"{step // 1000}K"
    return str(step)


class TrainConfig(BaseModel):
    """Every knob of a training run.

    Defaults reproduce the full-scale recipe: 300-d embeddings, a 1024-unit
    LSTM, two glimpses from a 512-channel attention layer, a 1024-unit
    classifier over the 3000 most frequent answers, and Adam for 100K steps
    of batch 128 with the learning rate halving every 50K steps.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    embedding_dim: PositiveInt = 300
    lstm_state_size: PositiveInt = 1024
    lstm_layers: PositiveInt = 1
    attention_hidden: PositiveInt = 512
    glimpse_count: PositiveInt = 2
    classifier_sizes: tuple[PositiveInt, ...] = (1024,)
    """Hidden layer sizes; the output layer always has `answer_vocab_size`."""
    answer_vocab_size: PositiveInt = 3000

    l2_norm: bool = True
    dropout_fc_conv: bool = True
    dropout_lstm: bool = True
    attention: bool = True
    sampled_loss: bool = False
    positional_features: bool = False
    bidirectional: bool = False

    batch_size: PositiveInt = 128
    total_steps: Annotated[int, Field(ge=0)] = 100_000
    l0: Annotated[float, Field(gt=0.0)] = 0.001
    decay_steps: PositiveInt = 50_000
    beta1: Rate = 0.9
    beta2: Rate = 0.999
    adam_epsilon: Annotated[float, Field(gt=0.0)] = 1e-8
    dropout_rate: Rate = 0.5
    unk_rate: Rate = 0.01
    """Share of question tokens replaced by UNK while training."""
    seed: Annotated[int, Field(ge=0)] = 0
    milestone_steps: tuple[PositiveInt, ...] = MILESTONE_STEPS
    milestone_divisor: PositiveInt = 1
    """Divides every milestone for toy runs while keeping the table columns."""

    precision: Precision = Precision.float32
    grad_clip_norm: Annotated[float, Field(gt=0.0)] | None = None
    max_question_length: Annotated[int, Field(gt=0, le=MAX_QUESTION_LENGTH)] = (
        MAX_QUESTION_LENGTH
    )
    eval_batch_size: PositiveInt = 256
    workers: PositiveInt = 4

    @field_validator("classifier_sizes", "milestone_steps", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(item.strip() for item in value.split(",") if item.strip())
        return value

    @field_validator("grad_clip_norm", mode="before")
    @classmethod
    def _none_string(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("", "none", "off"):
            return None
        return value

    @field_validator("milestone_steps")
    @classmethod
    def _sorted_milestones(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if list(value) != sorted(set(value)):
            raise ValueError("milestone_steps must be strictly increasing")
        return value

    @classmethod
    def from_mapping(
        cls, values: dict[str, Any], source: str = "<config>"
    ) -> TrainConfig:
        """Validates raw values, reporting every problem at once.

        Raises:
            ConfigurationError: On unknown keys or invalid values.
        """
        try:
            return cls.model_validate(values)
        except ValidationError as error:
            problems = "; ".join(
                f"{'.'.join(str(part) for part in e['loc'])}: {e['msg']}"
                for e in error.errors()
            )
            raise ConfigurationError(f"{source}: {problems}") from error

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> TrainConfig:
        return cls.from_mapping(parse_key_values(text, source), source)

    @classmethod
    def from_file(cls, path: Path | str) -> TrainConfig:
        """Reads a `key = value` config file.

        Raises:
            ConfigurationError: If the file is missing or invalid.
        """
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as error:
            raise ConfigurationError(f"Cannot read config {path}: {error}") from error
        return cls.from_text(text, str(path))

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        return cls.from_mapping(json.loads(text), "<checkpoint>")

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def to_text(self) -> str:
        """Renders the config in the `key = value` file format."""
        lines = []
        for key, value in self.model_dump(mode="json").items():
            if isinstance(value, list):
                value = ", ".join(str(item) for item in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            elif value is None:
                value = "none"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **overrides: Any) -> TrainConfig:
        """Returns a validated copy with some fields replaced."""
        return self.from_mapping({**self.model_dump(), **overrides}, "<overrides>")

    @property
    def dtype(self) -> type[np.floating[Any]]:
        return Precision(self.precision).dtype

    @property
    def milestones(self) -> dict[int, int]:
        """Maps each milestone column to the step it is evaluated at."""
        return {
            step: max(1, step // self.milestone_divisor)
            for step in self.milestone_steps
        }
