"""Answer classifier and training losses."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from . import ops
from .errors import InvalidArgumentError, ShapeError, SkipExample
from .tensor import Array, ParamStore, Rng, Tensor, as_rng, glorot_init

if TYPE_CHECKING:
    from .vocabulary import AnswerVocabulary


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor

    @property
    def input_size(self) -> int:
        return self.weight.shape[0]

    @property
    def output_size(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def create(
        cls,
        input_size: int,
        output_size: int,
        seed: Rng,
        dtype: npt.DTypeLike = np.float64,
    ) -> DenseLayer:
        return cls(
            glorot_init(
                (input_size, output_size), input_size, output_size, seed, dtype
            ),
            Tensor(np.zeros(output_size, dtype=dtype)),
        )


@dataclass
class ClassifierParams:
    """Fully connected layers from [glimpses ; question state] to M logits.

    Every layer but the last is followed by a ReLU.
    """

    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("A classifier needs an output layer")
        for below, above in zip(self.layers, self.layers[1:]):
            if above.input_size != below.output_size:
                raise ShapeError("Classifier layer sizes do not conform")

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(layer.output_size for layer in self.layers[:-1])

    @property
    def answer_count(self) -> int:
        """M, the number of answer classes."""
        return self.layers[-1].output_size

    @classmethod
    def create(
        cls,
        input_size: int,
        hidden_sizes: Sequence[int],
        answer_count: int,
        seeds: Sequence[Rng],
        dtype: npt.DTypeLike = np.float64,
    ) -> ClassifierParams:
        sizes = [input_size, *hidden_sizes, answer_count]
        if len(seeds) != len(sizes) - 1:
            raise ValueError(f"Expected {len(sizes) - 1} seeds, got {len(seeds)}")
        return cls(
            [
                DenseLayer.create(fan_in, fan_out, seed, dtype)
                for fan_in, fan_out, seed in zip(sizes, sizes[1:], seeds)
            ]
        )

    def register(self, store: ParamStore, prefix: str) -> None:
        for i, layer in enumerate(self.layers):
            store.add(f"{prefix}/layer{i}/weight", layer.weight)
            store.add(f"{prefix}/layer{i}/bias", layer.bias)


@dataclass
class AnswerDistribution:
    """Class probabilities for one question, or one row per question.

    `log_probs` comes from a log-sum-exp over the logits, never from taking
    the log of `probs`.
    """

    logits: Tensor
    probs: Tensor
    log_probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> AnswerDistribution:
        return cls(logits, ops.softmax(logits, axis=-1), ops.log_softmax(logits))

    @property
    def answer_count(self) -> int:
        return self.logits.shape[-1]

    def row(self, i: int) -> AnswerDistribution:
        """The distribution of one question in a batch."""
        if self.logits.ndim != 2:
            raise ShapeError("Only batched distributions have rows")
        return AnswerDistribution(
            *(
                ops.reshape(ops.slice_axis(t, i, i + 1, axis=0), (t.shape[-1],))
                for t in (self.logits, self.probs, self.log_probs)
            )
        )


def classify(
    x: Tensor,
    s: Tensor,
    params: ClassifierParams,
    training: bool = False,
    seed: Rng = 0,
    dropout_rate: float = 0.5,
) -> AnswerDistribution:
    """Classifies the concatenated glimpses and question state.

    Dropout is applied to the input of every layer when training.

    Raises:
        ShapeError: If the inputs do not match the first layer.
    """
    if x.shape[:-1] != s.shape[:-1] or x.shape[-1] + s.shape[-1] != params.input_size:
        raise ShapeError(
            f"Classifier input {x.shape} + {s.shape} does not match "
            f"input size {params.input_size}"
        )
    rng = as_rng(seed)
    h = ops.concat([x, s], axis=-1)
    for i, layer in enumerate(params.layers):
        h = ops.dropout(h, dropout_rate, training, rng)
        h = ops.linear(h, layer.weight, layer.bias)
        if i < len(params.layers) - 1:
            h = ops.relu(h)
    return AnswerDistribution.from_logits(h)


def _check_ids(answer_ids: Sequence[int], answer_count: int) -> None:
    if not answer_ids:
        raise SkipExample("No in-vocabulary answers")
    for answer_id in answer_ids:
        if not 0 <= answer_id < answer_count:
            raise InvalidArgumentError(
                f"Answer id {answer_id} is out of range for {answer_count} classes"
            )


def answer_weights(
    answer_ids: Sequence[int], answer_count: int, dtype: npt.DTypeLike = np.float64
) -> Array:
    """Per-class weights 1/K' for each of the K' answers, duplicates adding up."""
    _check_ids(answer_ids, answer_count)
    weights = np.zeros(answer_count, dtype=dtype)
    np.add.at(weights, np.asarray(answer_ids, dtype=np.intp), 1.0)
    return weights / len(answer_ids)


def averaged_nll(dist: AnswerDistribution, answer_ids: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over the in-vocabulary answers.

    Duplicate answers count once each, so agreement among annotators
    up-weights the shared answer.

    Raises:
        SkipExample: If `answer_ids` is empty.
        InvalidArgumentError: If an id is out of range.
    """
    weights = answer_weights(answer_ids, dist.answer_count, dist.log_probs.dtype)
    return -ops.sum(dist.log_probs * Tensor(weights))


def sampled_nll(
    dist: AnswerDistribution, answer_ids: Sequence[int], seed: Rng
) -> Tensor:
    """Negative log-likelihood of one answer drawn uniformly from the list."""
    _check_ids(answer_ids, dist.answer_count)
    drawn = answer_ids[int(as_rng(seed).integers(len(answer_ids)))]
    return averaged_nll(dist, [drawn])


def batch_loss(
    dist: AnswerDistribution,
    answer_ids: Sequence[Sequence[int]],
    sampled: bool = False,
    seed: Rng = 0,
) -> Tensor:
    """Mean over the batch of the per-question loss.

    Args:
        dist: A batched (B, M) distribution.
        answer_ids: In-vocabulary answer ids for each of the B questions.
        sampled: Draw one answer per question instead of averaging.
        seed: A seed or generator for the draws.
    """
    if dist.log_probs.ndim != 2 or dist.log_probs.shape[0] != len(answer_ids):
        raise ShapeError(
            f"Distribution {dist.log_probs.shape} does not match "
            f"{len(answer_ids)} answer lists"
        )
    rng = as_rng(seed)
    dtype = dist.log_probs.dtype
    targets = np.zeros(dist.log_probs.shape, dtype=dtype)
    for row, ids in enumerate(answer_ids):
        _check_ids(ids, dist.answer_count)
        if sampled:
            ids = [ids[int(rng.integers(len(ids)))]]
        targets[row] = answer_weights(ids, dist.answer_count, dtype)
    return -ops.sum(dist.log_probs * Tensor(targets)) * (1.0 / len(answer_ids))


def predict(dist: AnswerDistribution, vocab: AnswerVocabulary) -> str:
    """The most probable answer; ties go to the lowest class index."""
    return vocab.answers[int(np.argmax(dist.logits.data))]


def top_answers(
    dist: AnswerDistribution, vocab: AnswerVocabulary, k: int = 5
) -> list[tuple[str, float]]:
    """The `k` most probable answers with their probabilities, best first."""
    probs = dist.probs.data
    order = sorted(range(probs.size), key=lambda i: (-float(probs[i]), i))
    return [(vocab.answers[i], float(probs[i])) for i in order[:k]]
