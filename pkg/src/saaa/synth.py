"""A synthetic dataset whose answers can only be read off by attending.

Every cell of an image holds `[key / 2 ; value / sqrt(2)]` times a random
positive scale, where the key encodes the cell's row and column on two
circles and the value is the unit prototype of an answer class. All images
hold the same multiset of classes, so after l2 normalization their spatial
means are identical; the question names a cell and the answer is the class
stored there.

Questions come in groups of M that ask about the same cell and have M
distinct answers, so a model that cannot look at that cell is right on at
most one question per group.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .constants import ANSWERS_PER_QUESTION, MAX_QUESTION_LENGTH, AnswerType
from .dataset import FEATURES_DIR, TRAIN_FILE, VAL_FILE
from .errors import InvalidArgumentError
from .features import FeatureHref, FeatureMap, save_feature_map
from .question import QuestionRecord, write_records
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROTOTYPE_STREAM = 0
IMAGE_STREAM = 1
KEY_SIZE = 4

FILLER_WORDS = ("what", "is", "in", "cell", "the", "shown", "at", "which")
ANSWER_POOL = (
    "yes",
    "no",
    "2",
    "3",
    "red",
    "green",
    "blue",
    "cat",
    "dog",
    "tree",
    "car",
    "boat",
)


def answer_names(count: int) -> list[str]:
    """The first `count` answer strings."""
    names = list(ANSWER_POOL[:count])
    names += [f"class{k}" for k in range(len(names), count)]
    return names


def filler_words(count: int) -> list[str]:
    words = list(FILLER_WORDS[:count])
    words += [f"word{k}" for k in range(len(words), count)]
    return words


def location_token(row: int, column: int) -> str:
    return f"r{row}c{column}"


def question_fillers(fillers: list[str], group: int) -> list[str]:
    """The filler words of a question group, leaving room for the location.

    Larger filler sets are spread over the groups in rotating windows so no
    question outgrows the encoder's length limit.
    """
    limit = MAX_QUESTION_LENGTH - 1
    if len(fillers) <= limit:
        return fillers
    start = group * limit % len(fillers)
    return [fillers[(start + j) % len(fillers)] for j in range(limit)]


@dataclass(frozen=True)
class SynthSpec:
    """Sizes of a synthetic dataset.

    Attributes:
        count: Number of training questions, one image each.
        height: Grid rows.
        width: Grid columns.
        depth: Feature depth; four channels hold the cell key.
        question_vocab: Distinct question words: fillers plus one location
            token per cell.
        answers: Number of distinct answers M, at most height * width.
        seed: Seed of every random draw.
        val_count: Number of extra validation questions.
    """

    count: int = 32
    height: int = 4
    width: int = 4
    depth: int = 8
    question_vocab: int = 20
    answers: int = 6
    seed: int = 0
    val_count: int = 0

    def __post_init__(self) -> None:
        for name in ("count", "height", "width", "answers"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.val_count < 0 or self.seed < 0:
            raise InvalidArgumentError("val_count and seed must not be negative")
        if self.depth <= KEY_SIZE:
            raise InvalidArgumentError(f"depth must exceed {KEY_SIZE}")
        if self.answers > self.locations:
            raise InvalidArgumentError("answers must not exceed the number of cells")
        if self.question_vocab <= self.locations:
            raise InvalidArgumentError(
                "question_vocab must exceed the number of cells to leave room "
                "for filler words"
            )

    @property
    def locations(self) -> int:
        return self.height * self.width

    def cell_of(self, index: int) -> int:
        """The cell asked about by question `index`."""
        return (index // self.answers) % self.locations

    def answer_of(self, index: int) -> int:
        return index % self.answers


@dataclass
class SynthDataset:
    spec: SynthSpec
    records: list[QuestionRecord]
    val_records: list[QuestionRecord]
    features: dict[int, FeatureMap]
    prototypes: npt.NDArray[np.float64]
    cells: dict[int, int] = field(default_factory=dict)
    """Asked cell by question id."""


def cell_keys(height: int, width: int) -> npt.NDArray[np.float64]:
    """Row and column of every cell encoded on two unit circles."""
    rows = 2 * math.pi * np.arange(height) / height
    columns = 2 * math.pi * np.arange(width) / width
    keys = np.zeros((height, width, KEY_SIZE))
    keys[:, :, 0] = np.cos(rows)[:, np.newaxis]
    keys[:, :, 1] = np.sin(rows)[:, np.newaxis]
    keys[:, :, 2] = np.cos(columns)[np.newaxis, :]
    keys[:, :, 3] = np.sin(columns)[np.newaxis, :]
    return keys


def answer_prototypes(spec: SynthSpec) -> npt.NDArray[np.float64]:
    """One random unit vector per answer class."""
    rng = np.random.default_rng([spec.seed, PROTOTYPE_STREAM])
    vectors = rng.standard_normal((spec.answers, spec.depth - KEY_SIZE))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def _example(
    spec: SynthSpec,
    index: int,
    keys: npt.NDArray[np.float64],
    prototypes: npt.NDArray[np.float64],
    fillers: list[str],
    names: list[str],
) -> tuple[QuestionRecord, FeatureMap]:
    rng = np.random.default_rng([spec.seed, IMAGE_STREAM, index])
    cell = spec.cell_of(index)
    answer = spec.answer_of(index)
    classes = rng.permutation(np.arange(spec.locations) % spec.answers)
    holder = int(np.flatnonzero(classes == answer)[0])
    classes[holder], classes[cell] = classes[cell], classes[holder]
    scales = rng.uniform(0.5, 2.0, size=spec.locations)
    values = np.concatenate(
        [
            keys.reshape(spec.locations, KEY_SIZE) / 2.0,
            prototypes[classes] / math.sqrt(2.0),
        ],
        axis=1,
    )
    values *= scales[:, np.newaxis]
    grid = values.reshape(spec.height, spec.width, spec.depth).astype(np.float32)
    row, column = divmod(cell, spec.width)
    words = question_fillers(fillers, index // spec.answers)
    text = " ".join([*words, location_token(row, column)])
    record = QuestionRecord(
        question_id=index,
        image_id=index,
        text=text,
        answers=(names[answer],) * ANSWERS_PER_QUESTION,
        answer_type=AnswerType.from_answer(names[answer]),
    )
    return record, FeatureMap(image_id=index, values=Tensor(grid))


def make_synthetic(spec: SynthSpec) -> SynthDataset:
    """Builds the dataset in memory."""
    keys = cell_keys(spec.height, spec.width)
    prototypes = answer_prototypes(spec)
    fillers = filler_words(spec.question_vocab - spec.locations)
    names = answer_names(spec.answers)
    records = []
    val_records = []
    features = {}
    cells = {}
    for index in range(spec.count + spec.val_count):
        record, fm = _example(spec, index, keys, prototypes, fillers, names)
        (records if index < spec.count else val_records).append(record)
        features[fm.image_id] = fm
        cells[record.question_id] = spec.cell_of(index)
    return SynthDataset(spec, records, val_records, features, prototypes, cells)


def generate_synthetic(spec: SynthSpec, out_dir: Path | str) -> SynthDataset:
    """Writes the dataset to `out_dir`.

    The records go to `train.jsonl` and, when there are any, `val.jsonl`;
    each image gets a feature file under `features/`.
    Identical specs give byte-identical files.
    """
    dataset = make_synthetic(spec)
    out = Path(out_dir)
    feature_dir = out / FEATURES_DIR
    feature_dir.mkdir(parents=True, exist_ok=True)
    write_records(out / TRAIN_FILE, dataset.records)
    if dataset.val_records:
        write_records(out / VAL_FILE, dataset.val_records)
    for image_id, fm in sorted(dataset.features.items()):
        save_feature_map(fm, FeatureHref.for_image(feature_dir, image_id).path)
    logger.info(
        "Wrote %d training and %d validation questions to %s",
        len(dataset.records),
        len(dataset.val_records),
        out,
    )
    return dataset
