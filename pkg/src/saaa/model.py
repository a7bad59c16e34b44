"""The full question answering model: encoder, attention and classifier."""

from __future__ import annotations

import logging
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .answer import AnswerDistribution, ClassifierParams, classify
from .attention import AttentionParams, AttentionResult, forward_attention
from .checkpoint import Checkpoint
from .config import TrainConfig
from .constants import UNK_ID
from .errors import (
    CheckpointError,
    EmptyQuestionError,
    FeatureFormatError,
    ShapeError,
)
from .features import FeatureMap, augment_positions, normalize_depth
from .optim import AdamState
from .question import (
    EncoderOutput,
    LstmParams,
    QuestionRecord,
    QuestionVocab,
    TokenSequence,
    build_question_vocab,
    encode_batch,
    pad_sequences,
)
from .tensor import ParamStore, Rng, Tensor, as_rng
from .vocabulary import AnswerVocabulary

logger = logging.getLogger(__name__)


def parameter_seed(seed: int, name: str) -> np.random.Generator:
    """A generator for one parameter, independent of creation order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclass
class Example:
    """A record ready for the model.

    Attributes:
        record: The source record.
        tokens: The encoded question.
        answer_ids: Class ids of the in-vocabulary answers, duplicates kept.
        features: The image features after normalization and positions.
    """

    record: QuestionRecord
    tokens: TokenSequence
    answer_ids: list[int]
    features: FeatureMap


@dataclass
class PreparedData:
    examples: list[Example] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)
    """Failure message by question id for records that could not be used."""

    @property
    def skipped(self) -> int:
        return len(self.errors)


@dataclass
class ForwardResult:
    dist: AnswerDistribution
    encoder: EncoderOutput
    attention: AttentionResult | None


@dataclass
class VqaModel:
    config: TrainConfig
    question_vocab: QuestionVocab
    answer_vocab: AnswerVocabulary
    feature_depth: int
    lstm: LstmParams
    attention: AttentionParams | None
    classifier: ClassifierParams
    store: ParamStore

    @classmethod
    def create(
        cls,
        config: TrainConfig,
        question_vocab: QuestionVocab,
        answer_vocab: AnswerVocabulary,
        feature_depth: int,
    ) -> VqaModel:
        """Initializes all parameters except the embedding.

        The embedding table is the one `question_vocab` already holds.

        Raises:
            ShapeError: If the answer vocabulary is empty or larger than
                `answer_vocab_size`.
        """
        if not 0 < len(answer_vocab) <= config.answer_vocab_size:
            raise ShapeError(
                f"Answer vocabulary of {len(answer_vocab)} entries does not fit "
                f"answer_vocab_size {config.answer_vocab_size}"
            )
        dtype = config.dtype
        depth = feature_depth + (2 if config.positional_features else 0)
        directions = ("forward", "backward") if config.bidirectional else ("forward",)
        lstm = LstmParams.create(
            question_vocab.dim,
            config.lstm_state_size,
            config.lstm_layers,
            config.bidirectional,
            [
                parameter_seed(config.seed, f"lstm/{direction}/layer{i}")
                for direction in directions
                for i in range(config.lstm_layers)
            ],
            dtype,
        )
        attention = None
        image_size = depth
        if config.attention:
            attention = AttentionParams.create(
                depth,
                lstm.output_size,
                config.attention_hidden,
                config.glimpse_count,
                [
                    parameter_seed(config.seed, "attention/conv1"),
                    parameter_seed(config.seed, "attention/conv2"),
                ],
                dtype,
            )
            image_size = config.glimpse_count * depth
        classifier = ClassifierParams.create(
            image_size + lstm.output_size,
            config.classifier_sizes,
            len(answer_vocab),
            [
                parameter_seed(config.seed, f"classifier/layer{i}")
                for i in range(len(config.classifier_sizes) + 1)
            ],
            dtype,
        )
        store = ParamStore()
        store.add("embedding", question_vocab.embedding)
        lstm.register(store, "lstm")
        if attention is not None:
            attention.register(store, "attention")
        classifier.register(store, "classifier")
        logger.debug("Model has %d parameters", store.num_parameters())
        return cls(
            config,
            question_vocab,
            answer_vocab,
            feature_depth,
            lstm,
            attention,
            classifier,
            store,
        )

    @classmethod
    def build(
        cls,
        config: TrainConfig,
        records: Sequence[QuestionRecord],
        answer_vocab: AnswerVocabulary,
        feature_depth: int,
    ) -> VqaModel:
        """Creates a fresh model whose question vocabulary covers `records`."""
        question_vocab = build_question_vocab(
            records,
            config.embedding_dim,
            parameter_seed(config.seed, "embedding"),
            config.dtype,
        )
        return cls.create(config, question_vocab, answer_vocab, feature_depth)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> VqaModel:
        """Rebuilds a model and copies the checkpoint's parameters into it.

        Raises:
            CheckpointError: If the parameters do not fit the config.
        """
        config = ckpt.config
        tokens = ckpt.question_tokens
        embedding = Tensor(np.zeros((len(tokens), config.embedding_dim), config.dtype))
        model = cls.create(
            config,
            QuestionVocab(tokens, embedding),
            AnswerVocabulary(ckpt.answers, ckpt.answer_coverage),
            ckpt.feature_depth,
        )
        expected = set(model.store.names())
        if expected != set(ckpt.params):
            missing = sorted(expected - set(ckpt.params))
            extra = sorted(set(ckpt.params) - expected)
            raise CheckpointError(
                f"Checkpoint parameters do not match the config: "
                f"missing {missing}, unexpected {extra}"
            )
        for name, param in model.store.items():
            value = ckpt.params[name]
            if value.shape != param.shape:
                raise CheckpointError(
                    f"Parameter {name} has shape {value.shape}, expected {param.shape}"
                )
            param.data = value.astype(config.dtype, copy=True)
        return model

    def to_checkpoint(self, step: int, adam: AdamState | None = None) -> Checkpoint:
        """Snapshots the parameters; arrays are copied."""
        adam = adam or AdamState.create(self.store)
        return Checkpoint(
            config=self.config,
            step=step,
            params={name: t.data.copy() for name, t in self.store.items()},
            adam=AdamState(
                m={name: value.copy() for name, value in adam.m.items()},
                v={name: value.copy() for name, value in adam.v.items()},
                step=adam.step,
            ),
            question_tokens=list(self.question_vocab.tokens),
            answers=list(self.answer_vocab.answers),
            feature_depth=self.feature_depth,
            answer_coverage=self.answer_vocab.coverage,
        )

    def prepare_features(self, fm: FeatureMap) -> FeatureMap:
        """Casts to the model precision, then normalizes and adds positions.

        Raises:
            ShapeError: If the depth does not match the model.
        """
        if fm.depth != self.feature_depth:
            raise ShapeError(
                f"Image {fm.image_id} has depth {fm.depth}, "
                f"the model expects {self.feature_depth}"
            )
        values = Tensor(fm.values.data.astype(self.config.dtype))
        fm = FeatureMap(fm.image_id, values)
        if self.config.l2_norm:
            fm = normalize_depth(fm)
        if self.config.positional_features:
            fm = augment_positions(fm)
        return fm

    def prepare(
        self,
        records: Sequence[QuestionRecord],
        features: Mapping[int, FeatureMap],
        require_answers: bool = True,
    ) -> PreparedData:
        """Encodes records and looks up their features.

        Records are dropped, with a reason, when their question has no
        tokens, their image has no usable features, or (with
        `require_answers`) none of their answers is in the vocabulary.
        """
        prepared = PreparedData()
        cache: dict[int, FeatureMap] = {}
        for record in records:
            qid = record.question_id
            try:
                tokens = self.question_vocab.encode(
                    record.tokens, self.config.max_question_length
                )
                if record.image_id not in cache:
                    cache[record.image_id] = self.prepare_features(
                        features[record.image_id]
                    )
            except EmptyQuestionError as error:
                prepared.errors[qid] = str(error)
                continue
            except KeyError:
                prepared.errors[qid] = f"no features for image {record.image_id}"
                continue
            except (FeatureFormatError, ShapeError) as error:
                prepared.errors[qid] = f"image {record.image_id}: {error}"
                continue
            answer_ids = self.answer_vocab.ids_for(record.answers)
            if require_answers and not answer_ids:
                prepared.errors[qid] = "no in-vocabulary answers"
                continue
            prepared.examples.append(
                Example(record, tokens, answer_ids, cache[record.image_id])
            )
        return prepared

    def forward(
        self,
        tokens: Sequence[TokenSequence],
        features: Sequence[FeatureMap],
        training: bool = False,
        seed: Rng = 0,
    ) -> ForwardResult:
        """Runs a batch of questions through the model.

        All feature maps in a batch must have the same shape. Dropout is
        enabled per component by the config flags when `training`.
        """
        if len(tokens) != len(features) or not tokens:
            raise ShapeError(
                f"Batch of {len(tokens)} questions and {len(features)} images"
            )
        shapes = {fm.values.shape for fm in features}
        if len(shapes) != 1:
            raise ShapeError(f"Feature shapes differ within a batch: {sorted(shapes)}")
        config = self.config
        rng = as_rng(seed)
        ids, lengths = pad_sequences(tokens)
        if training and config.unk_rate > 0.0:
            ids = np.where(rng.random(ids.shape) < config.unk_rate, UNK_ID, ids)
        encoder = encode_batch(
            ids,
            lengths,
            self.question_vocab.embedding,
            self.lstm,
            training and config.dropout_lstm,
            config.dropout_rate,
            rng,
        )
        phi = Tensor(np.stack([fm.flat().data for fm in features]))
        fc_training = training and config.dropout_fc_conv
        attention = None
        if self.attention is not None:
            attention = forward_attention(
                encoder.s, phi, self.attention, fc_training, rng, config.dropout_rate
            )
            x = attention.x
        else:
            x = ops.mean(phi, axis=1)
        dist = classify(
            x, encoder.s, self.classifier, fc_training, rng, config.dropout_rate
        )
        return ForwardResult(dist, encoder, attention)

    def forward_examples(
        self, examples: Sequence[Example], training: bool = False, seed: Rng = 0
    ) -> ForwardResult:
        return self.forward(
            [example.tokens for example in examples],
            [example.features for example in examples],
            training,
            seed,
        )

