"""The training loop: batching, dropout, Adam and milestone evaluation.

Randomness is stateless. The example order of each epoch is drawn from
(seed, epoch) and the dropout masks and sampled answers of each step from
(seed, step), so a run resumed from a checkpoint continues exactly as the
uninterrupted run would.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .answer import batch_loss
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .constants import CHECKPOINT_SUFFIX
from .errors import ConfigurationError, FeatureFormatError, TrainingDivergedError
from .evaluate import evaluate_examples
from .features import FeatureMap
from .model import PreparedData, VqaModel
from .optim import AdamState, adam_step, clip_gradients, learning_rate
from .question import QuestionRecord
from .tensor import backward
from .vocabulary import AnswerVocabulary, build_answer_vocab

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 0
STEP_STREAM = 1
FINAL_CHECKPOINT = f"final{CHECKPOINT_SUFFIX}"
METRICS_FILE = "metrics.csv"
METRICS_COLUMNS = ("step", "lr", "train_loss", "eval_accuracy")


def step_rng(seed: int, step: int) -> np.random.Generator:
    """The generator for the dropout masks and answer draws of one step."""
    return np.random.default_rng([seed, STEP_STREAM, step])


def checkpoint_name(step: int) -> str:
    return f"step-{step:06d}{CHECKPOINT_SUFFIX}"


class BatchSampler:
    """Fixed-size batches over a reshuffled stream of epochs.

    Batch t holds positions [t * B, (t + 1) * B) of the concatenation of
    one random permutation per epoch, so a batch may straddle two epochs.
    """

    def __init__(self, count: int, batch_size: int, seed: int) -> None:
        if count < 1 or batch_size < 1:
            raise ValueError("Need at least one example and a positive batch size")
        self.count = count
        self.batch_size = batch_size
        self.seed = seed
        self._orders: dict[int, npt.NDArray[np.int64]] = {}

    def order(self, epoch: int) -> npt.NDArray[np.int64]:
        if epoch not in self._orders:
            if len(self._orders) > 4:
                self._orders.pop(min(self._orders))
            rng = np.random.default_rng([self.seed, SHUFFLE_STREAM, epoch])
            self._orders[epoch] = rng.permutation(self.count)
        return self._orders[epoch]

    def batch(self, step: int) -> list[int]:
        positions = step * self.batch_size + np.arange(self.batch_size)
        return [
            int(self.order(int(p // self.count))[p % self.count]) for p in positions
        ]


@dataclass(frozen=True)
class MetricsRow:
    step: int
    lr: float
    train_loss: float
    eval_accuracy: float | None = None


def write_metrics(path: Path | str, rows: Sequence[MetricsRow]) -> None:
    """Writes the metrics CSV; eval_accuracy is blank off the milestones."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.step,
                    repr(row.lr),
                    repr(row.train_loss),
                    "" if row.eval_accuracy is None else repr(row.eval_accuracy),
                ]
            )


def read_metrics(path: Path | str) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as f:
        return [
            MetricsRow(
                int(row["step"]),
                float(row["lr"]),
                float(row["train_loss"]),
                float(row["eval_accuracy"]) if row["eval_accuracy"] else None,
            )
            for row in csv.DictReader(f)
        ]


@dataclass
class TrainResult:
    """What a training run produced.

    Attributes:
        checkpoint: The state after the last step.
        model: The trained model.
        metrics: One row per step taken in this run.
        milestone_accuracy: Eval accuracy per milestone column, None for
            milestones this run did not reach.
        skipped: Training records left out, by question id.
    """

    checkpoint: Checkpoint
    model: VqaModel
    metrics: list[MetricsRow] = field(default_factory=list)
    milestone_accuracy: dict[int, float | None] = field(default_factory=dict)
    skipped: dict[int, str] = field(default_factory=dict)


def _feature_depth(
    records: Sequence[QuestionRecord], features: Mapping[int, FeatureMap]
) -> int:
    for record in records:
        try:
            return features[record.image_id].depth
        except (KeyError, FeatureFormatError):
            continue
    raise ConfigurationError("No feature map found for any training image")


def _check_resume(config: TrainConfig, resumed: TrainConfig) -> None:
    ours = config.model_dump(exclude={"total_steps"})
    theirs = resumed.model_dump(exclude={"total_steps"})
    changed = sorted(key for key in ours if ours[key] != theirs[key])
    if changed:
        raise ConfigurationError(
            f"Cannot resume with a different config; changed: {', '.join(changed)}"
        )


def _report_skips(prepared: PreparedData, what: str) -> None:
    if prepared.skipped:
        logger.warning(
            "Skipped %d of %d %s records (e.g. question %d: %s)",
            prepared.skipped,
            prepared.skipped + len(prepared.examples),
            what,
            *next(iter(prepared.errors.items())),
        )


def train(
    config: TrainConfig,
    records: Sequence[QuestionRecord],
    features: Mapping[int, FeatureMap],
    val_records: Sequence[QuestionRecord] | None = None,
    answer_vocab: AnswerVocabulary | None = None,
    resume: Checkpoint | None = None,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Trains a model.

    Args:
        config: Hyperparameters; `total_steps` is the step count to reach.
        records: Training records.
        features: Feature maps by image id.
        val_records: Records evaluated at milestones; the training records
            are used when absent.
        answer_vocab: A fixed answer vocabulary; by default the most
            frequent training answers.
        resume: A checkpoint to continue from. Its config must equal
            `config` except for `total_steps`.
        out_dir: Where milestone and final checkpoints plus the metrics CSV
            go; nothing is written when None.

    Raises:
        ConfigurationError: If no training record has usable answers and
            features, or the resumed config differs.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    if resume is not None:
        _check_resume(config, resume.config)
        model = VqaModel.from_checkpoint(resume)
        model.config = config
        adam = AdamState(
            m={name: value.copy() for name, value in resume.adam.m.items()},
            v={name: value.copy() for name, value in resume.adam.v.items()},
            step=resume.adam.step,
        )
        start = resume.step
        logger.info("Resuming from step %d", start)
    else:
        vocab = answer_vocab or build_answer_vocab(
            records, config.answer_vocab_size, val_records
        )
        depth = _feature_depth(records, features)
        model = VqaModel.build(config, records, vocab, depth)
        adam = AdamState.create(model.store)
        start = 0
    prepared = model.prepare(records, features)
    _report_skips(prepared, "training")
    if not prepared.examples:
        raise ConfigurationError(
            "No usable training examples: every record lacks in-vocabulary "
            "answers or features"
        )
    eval_prepared = (
        model.prepare(val_records, features) if val_records is not None else prepared
    )
    if val_records is not None:
        _report_skips(eval_prepared, "validation")

    output = Path(out_dir) if out_dir is not None else None
    if output is not None:
        output.mkdir(parents=True, exist_ok=True)
    milestone_steps = set(config.milestones.values())
    sampler = BatchSampler(len(prepared.examples), config.batch_size, config.seed)
    rows: list[MetricsRow] = []
    for step in range(start, config.total_steps):
        rng = step_rng(config.seed, step)
        batch = [prepared.examples[i] for i in sampler.batch(step)]
        lr = learning_rate(step, config.l0, config.decay_steps)
        result = model.forward_examples(batch, training=True, seed=rng)
        loss = batch_loss(
            result.dist,
            [example.answer_ids for example in batch],
            config.sampled_loss,
            rng,
        )
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                step,
                {
                    "lr": lr,
                    "loss": value,
                    "question_ids": [e.record.question_id for e in batch],
                    "max_abs_param": max(
                        float(np.max(np.abs(t.data))) for _, t in model.store.items()
                    ),
                },
            )
        grads = backward(loss, model.store)
        if config.grad_clip_norm is not None:
            grads = clip_gradients(grads, config.grad_clip_norm)
        adam_step(
            model.store,
            grads,
            adam,
            lr,
            config.beta1,
            config.beta2,
            config.adam_epsilon,
        )
        done = step + 1
        accuracy = None
        if done in milestone_steps:
            accuracy = evaluate_examples(model, eval_prepared).overall
            logger.info(
                "Step %d: lr %.3g, loss %.4f, eval accuracy %.2f%%",
                done,
                lr,
                value,
                100 * accuracy,
            )
            if output is not None:
                save_checkpoint(
                    model.to_checkpoint(done, adam), output / checkpoint_name(done)
                )
        else:
            logger.debug("Step %d: lr %.3g, loss %.6f", done, lr, value)
        rows.append(MetricsRow(done, lr, value, accuracy))

    checkpoint = model.to_checkpoint(max(start, config.total_steps), adam)
    if output is not None:
        save_checkpoint(checkpoint, output / FINAL_CHECKPOINT)
        write_metrics(output / METRICS_FILE, rows)
    reached = {row.step: row.eval_accuracy for row in rows}
    return TrainResult(
        checkpoint=checkpoint,
        model=model,
        metrics=rows,
        milestone_accuracy={
            column: reached.get(step) for column, step in config.milestones.items()
        },
        skipped=prepared.errors,
    )
