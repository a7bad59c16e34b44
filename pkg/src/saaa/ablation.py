"""Ablation suites: one training run per mutation of the default model."""

from __future__ import annotations

import csv
import importlib.resources
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, cast

from .config import TrainConfig, milestone_label, parse_key_values
from .dataset import Dataset
from .errors import ConfigurationError, SaaaError
from .train import train

logger = logging.getLogger(__name__)

SIZE_FIELDS = ("embedding_dim", "lstm_state_size", "attention_hidden")
TABLE_FILE = "milestones.csv"


@dataclass(frozen=True)
class AblationVariant:
    """One row of the ablation table.

    Attributes:
        name: Row id, e.g. "no-attention".
        group: The kind of change, e.g. "lstm state size".
        overrides: Config fields that differ from the default model.
    """

    name: str
    group: str
    overrides: dict[str, Any] = field(default_factory=dict)

    def build(self, base: dict[str, Any], size_divisor: int = 1) -> TrainConfig:
        """Applies the overrides to `base`, then scales every layer size down.

        Raises:
            ConfigurationError: If the result is not a valid config.
        """
        values = {**base, **self.overrides}
        if size_divisor > 1:
            defaults = TrainConfig()
            for key in SIZE_FIELDS:
                size = int(values.get(key, getattr(defaults, key)))
                values[key] = _scale(size, size_divisor)
            sizes = values.get("classifier_sizes", defaults.classifier_sizes)
            if isinstance(sizes, str):
                sizes = [item for item in sizes.split(",") if item.strip()]
            values["classifier_sizes"] = [_scale(int(s), size_divisor) for s in sizes]
        return TrainConfig.from_mapping(values, f"<variant {self.name}>")


def _scale(size: int, divisor: int) -> int:
    return max(1, round(size / divisor))


def table_variants() -> list[AblationVariant]:
    """Every row of the packaged ablation table, in table order."""
    path = importlib.resources.files("saaa").joinpath("ablations.json")
    with path.open() as f:
        rows = cast(list[dict[str, Any]], json.load(f))
    return [
        AblationVariant(row["name"], row["group"], row["overrides"]) for row in rows
    ]


@dataclass
class AblationSuite:
    """Named variants that share a seed, a base config and a dataset.

    Attributes:
        variants: The rows to run.
        base: Config fields shared by all variants, at full scale.
        size_divisor: Divides every layer size so the table runs at desk
            scale while keeping the relative sizes of its rows.
    """

    variants: list[AblationVariant]
    base: dict[str, Any] = field(default_factory=dict)
    size_divisor: int = 1

    def __post_init__(self) -> None:
        names = [variant.name for variant in self.variants]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ConfigurationError(f"Duplicate variant names: {duplicates}")
        if self.size_divisor < 1:
            raise ConfigurationError("size_divisor must be positive")

    @classmethod
    def from_text(cls, text: str, source: str = "<suite>") -> AblationSuite:
        """Parses a suite file.

        `variants` lists row ids separated by commas (`all` for the whole
        table) and `size_divisor` scales the layer sizes; every other key is
        a config field shared by all variants.

        Raises:
            ConfigurationError: On unknown variants or invalid fields.
        """
        values: dict[str, Any] = dict(parse_key_values(text, source))
        known = {variant.name: variant for variant in table_variants()}
        requested = values.pop("variants", "all").strip()
        if requested == "all":
            variants = list(known.values())
        else:
            names = [name.strip() for name in requested.split(",") if name.strip()]
            unknown = [name for name in names if name not in known]
            if unknown:
                raise ConfigurationError(f"{source}: unknown variants {unknown}")
            variants = [known[name] for name in names]
        try:
            size_divisor = int(values.pop("size_divisor", "1"))
        except ValueError as error:
            raise ConfigurationError(f"{source}: invalid size_divisor") from error
        suite = cls(variants, values, size_divisor)
        suite.configs()
        return suite

    @classmethod
    def from_file(cls, path: Path | str) -> AblationSuite:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as error:
            raise ConfigurationError(f"Cannot read suite {path}: {error}") from error
        return cls.from_text(text, str(path))

    def configs(self) -> dict[str, TrainConfig]:
        """Builds every variant's config, validating all of them."""
        return {
            variant.name: variant.build(self.base, self.size_divisor)
            for variant in self.variants
        }


@dataclass
class MilestoneTable:
    """Eval accuracy per variant (rows) and milestone (columns).

    Attributes:
        columns: The milestone steps, as configured.
        rows: Accuracy by milestone for each variant, None where missing.
        errors: Failure message of each variant that did not finish.
    """

    columns: tuple[int, ...]
    rows: dict[str, dict[int, float | None]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.errors and all(
            value is not None for row in self.rows.values() for value in row.values()
        )

    def to_csv(self) -> str:
        lines = [",".join(["variant", *(milestone_label(c) for c in self.columns)])]
        for name, row in self.rows.items():
            cells = [
                "" if row.get(c) is None else f"{100 * cast(float, row[c]):.2f}"
                for c in self.columns
            ]
            lines.append(",".join([name, *cells]))
        return "\n".join(lines) + "\n"

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path | str) -> MilestoneTable:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            columns = tuple(_parse_label(label) for label in header[1:])
            table = cls(columns)
            for name, *cells in reader:
                table.rows[name] = {
                    c: float(cell) / 100 if cell else None
                    for c, cell in zip(columns, cells)
                }
        return table


def _parse_label(label: str) -> int:
    return int(label[:-1]) * 1000 if label.endswith("K") else int(label)


def _run_variant(
    name: str, config: TrainConfig, dataset: Dataset, out_dir: Path | None
) -> tuple[str, dict[int, float | None] | None, str | None]:
    try:
        result = train(
            config,
            dataset.train,
            dataset.features,
            val_records=dataset.val,
            out_dir=out_dir / name if out_dir is not None else None,
        )
    except SaaaError as error:
        return name, None, str(error)
    return name, result.milestone_accuracy, None


def run_suite(
    suite: AblationSuite,
    dataset: Dataset,
    out_dir: Path | str | None = None,
    jobs: int = 1,
) -> MilestoneTable:
    """Trains every variant and collects its milestone accuracies.

    A variant that fails is recorded in the table's errors; the others still
    run. With `jobs` > 1 the variants run in separate processes.
    """
    configs = suite.configs()
    columns = tuple(
        sorted({c for config in configs.values() for c in config.milestones})
    )
    table = MilestoneTable(columns)
    output = Path(out_dir) if out_dir is not None else None
    if output is not None:
        output.mkdir(parents=True, exist_ok=True)
    outcomes: Sequence[tuple[str, dict[int, float | None] | None, str | None]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = [
                executor.submit(_run_variant, name, config, dataset, output)
                for name, config in configs.items()
            ]
            outcomes = [future.result() for future in futures]
    else:
        outcomes = [
            _run_variant(name, config, dataset, output)
            for name, config in configs.items()
        ]
    for name, accuracy, error in outcomes:
        if error is not None:
            logger.error("Variant %s failed: %s", name, error)
            table.errors[name] = error
            table.rows[name] = {c: None for c in columns}
        else:
            assert accuracy is not None
            table.rows[name] = {c: accuracy.get(c) for c in columns}
            logger.info("Variant %s finished", name)
    if output is not None:
        table.write(output / TABLE_FILE)
    return table
