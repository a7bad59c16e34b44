"""A data directory: question records plus their feature files.

Layout::

    <data dir>/train.jsonl
    <data dir>/val.jsonl        (optional)
    <data dir>/features/<image_id>.saaf
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .features import FeatureStore
from .question import QuestionRecord, read_records

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.jsonl"
VAL_FILE = "val.jsonl"
FEATURES_DIR = "features"


@dataclass
class Dataset:
    directory: Path
    train: list[QuestionRecord]
    val: list[QuestionRecord] | None
    features: FeatureStore

    @classmethod
    def load(
        cls, directory: Path | str, workers: int = 4, preload: bool = True
    ) -> Dataset:
        """Reads the records and, optionally, every referenced feature file.

        Raises:
            ConfigurationError: If the directory, the training records or the
                features directory is missing.
        """
        directory = Path(directory)
        train_path = directory / TRAIN_FILE
        feature_dir = directory / FEATURES_DIR
        for path in (directory, train_path, feature_dir):
            if not path.exists():
                raise ConfigurationError(f"Missing path: {path}")
        train = read_records(train_path)
        val_path = directory / VAL_FILE
        val = read_records(val_path) if val_path.exists() else None
        features = FeatureStore(feature_dir)
        if preload:
            records = train + (val or [])
            features.preload((record.image_id for record in records), workers)
        logger.info(
            "Loaded %d training and %d validation records from %s",
            len(train),
            len(val or []),
            directory,
        )
        return cls(directory, train, val, features)

    @property
    def records(self) -> list[QuestionRecord]:
        """All records, training first."""
        return self.train + (self.val or [])

    def eval_records(self) -> list[QuestionRecord]:
        """The validation records, or the training records when there are none."""
        return self.val if self.val is not None else self.train

    def find(self, question_id: int) -> QuestionRecord | None:
        for record in self.records:
            if record.question_id == question_id:
                return record
        return None
