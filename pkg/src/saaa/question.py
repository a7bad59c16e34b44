"""Question records, tokenization, word embeddings and the LSTM encoder."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from . import ops
from .constants import (
    ANSWERS_PER_QUESTION,
    MAX_QUESTION_LENGTH,
    UNK_ID,
    UNK_TOKEN,
    AnswerType,
)
from .errors import EmptyQuestionError, InvalidRecordError, ShapeError
from .tensor import Indices, ParamStore, Rng, Tensor, as_rng, glorot_init

logger = logging.getLogger(__name__)

TOKEN_REGEX = re.compile(r"[^a-z0-9'\s]")


def tokenize(text: str) -> list[str]:
    """Lowercases, drops characters outside [a-z0-9'] and splits on whitespace.

    Raises:
        EmptyQuestionError: If no tokens remain.
    """
    tokens = TOKEN_REGEX.sub("", text.lower()).split()
    if not tokens:
        raise EmptyQuestionError(f"Question has no tokens: {text!r}")
    return tokens


@dataclass(frozen=True)
class QuestionRecord:
    question_id: int
    image_id: int
    text: str
    answers: tuple[str, ...] = ()
    answer_type: AnswerType | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise InvalidRecordError(f"Question {self.question_id} has no text")
        if len(self.answers) not in (0, ANSWERS_PER_QUESTION):
            raise InvalidRecordError(
                f"Question {self.question_id} has {len(self.answers)} answers, "
                f"expected 0 or {ANSWERS_PER_QUESTION}"
            )

    @classmethod
    def from_dict(cls, value: dict[str, Any]) -> QuestionRecord:
        """Parses one JSON-lines object.

        Answers may be plain strings or objects with an `answer` field, as in
        the raw annotation files.
        """
        try:
            answers = tuple(
                answer["answer"] if isinstance(answer, dict) else str(answer)
                for answer in value.get("answers") or ()
            )
            answer_type = value.get("answer_type")
            return cls(
                question_id=int(value["question_id"]),
                image_id=int(value["image_id"]),
                text=str(value["question"]),
                answers=answers,
                answer_type=AnswerType(answer_type) if answer_type else None,
            )
        except InvalidRecordError:
            raise
        except (KeyError, TypeError, ValueError) as error:
            raise InvalidRecordError(f"Invalid question record: {value}") from error

    def to_dict(self) -> dict[str, Any]:
        value: dict[str, Any] = {
            "question_id": self.question_id,
            "image_id": self.image_id,
            "question": self.text,
        }
        if self.answers:
            value["answers"] = list(self.answers)
        if self.answer_type is not None:
            value["answer_type"] = str(self.answer_type)
        return value

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


def read_records(path: Path | str) -> list[QuestionRecord]:
    """Reads question records from a JSON-lines file."""
    records = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                value = json.loads(line)
            except json.JSONDecodeError as error:
                raise InvalidRecordError(
                    f"{path}:{line_number}: invalid JSON: {error}"
                ) from error
            records.append(QuestionRecord.from_dict(value))
    logger.debug("Read %d records from %s", len(records), path)
    return records


def write_records(path: Path | str, records: Iterable[QuestionRecord]) -> None:
    """Writes question records as JSON lines with sorted keys."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise EmptyQuestionError("Token sequence is empty")
        if len(self.token_ids) > MAX_QUESTION_LENGTH:
            raise ShapeError(
                f"Token sequence of length {len(self.token_ids)} exceeds "
                f"{MAX_QUESTION_LENGTH}"
            )

    def __len__(self) -> int:
        return len(self.token_ids)


class QuestionVocab:
    """Bidirectional token/id mapping plus the trainable embedding table.

    Id 0 is reserved for unknown tokens.
    """

    def __init__(self, tokens: Sequence[str], embedding: Tensor) -> None:
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ValueError(f"Vocabulary must start with {UNK_TOKEN}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary tokens must be unique")
        if embedding.ndim != 2 or embedding.shape[0] != len(tokens):
            raise ShapeError(
                f"Embedding shape {embedding.shape} does not match "
                f"{len(tokens)} tokens"
            )
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}
        self.embedding = embedding

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def encode(
        self, tokens: Sequence[str], max_length: int = MAX_QUESTION_LENGTH
    ) -> TokenSequence:
        """Maps tokens to ids, keeping the first `max_length` tokens."""
        if not tokens:
            raise EmptyQuestionError("Question has no tokens")
        return TokenSequence(
            tuple(self.index.get(token, UNK_ID) for token in tokens[:max_length])
        )


def build_question_vocab(
    corpus: Sequence[QuestionRecord],
    dim: int,
    seed: Rng,
    dtype: npt.DTypeLike = np.float64,
) -> QuestionVocab:
    """Builds the vocabulary of all training tokens plus UNK.

    Tokens are ordered lexicographically after UNK so the mapping depends
    only on the token set.
    """
    if not corpus:
        raise ValueError("Cannot build a vocabulary from an empty corpus")
    seen: set[str] = set()
    for record in corpus:
        try:
            seen.update(record.tokens)
        except EmptyQuestionError:
            logger.warning("Question %d has no tokens", record.question_id)
    tokens = [UNK_TOKEN] + sorted(seen)
    embedding = glorot_init((len(tokens), dim), len(tokens), dim, seed, dtype)
    logger.info("Question vocabulary: %d tokens, dimension %d", len(tokens), dim)
    return QuestionVocab(tokens, embedding)


@dataclass
class LstmCell:
    """Weights of one LSTM layer in one direction.

    The weight maps [input ; h] to the four gates stacked as
    (input, forget, cell, output) along its columns.
    """

    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        rows, columns = self.weight.shape
        if columns % 4 or rows <= columns // 4 or self.bias.shape != (columns,):
            raise ShapeError(
                f"Inconsistent LSTM weights {self.weight.shape} / {self.bias.shape}"
            )

    @property
    def state_size(self) -> int:
        return self.weight.shape[1] // 4

    @property
    def input_size(self) -> int:
        return self.weight.shape[0] - self.state_size

    @classmethod
    def create(
        cls,
        input_size: int,
        state_size: int,
        seed: Rng,
        dtype: npt.DTypeLike = np.float64,
    ) -> LstmCell:
        """Glorot weights, zero biases except the forget gate at 1.0."""
        rows = input_size + state_size
        weight = glorot_init((rows, 4 * state_size), rows, 4 * state_size, seed, dtype)
        bias = np.zeros(4 * state_size, dtype=dtype)
        bias[state_size : 2 * state_size] = 1.0
        return cls(weight, Tensor(bias))


@dataclass
class LstmParams:
    forward: list[LstmCell]
    backward: list[LstmCell] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.forward:
            raise ShapeError("An LSTM needs at least one layer")
        if self.backward and len(self.backward) != len(self.forward):
            raise ShapeError("Both directions must have the same number of layers")
        for below, above in zip(self.forward, self.forward[1:]):
            if above.input_size != below.state_size:
                raise ShapeError("Stacked LSTM layer sizes do not conform")

    @property
    def state_size(self) -> int:
        return self.forward[-1].state_size

    @property
    def layers(self) -> int:
        return len(self.forward)

    @property
    def bidirectional(self) -> bool:
        return bool(self.backward)

    @property
    def output_size(self) -> int:
        """Size of the summary state s."""
        return self.state_size * (2 if self.bidirectional else 1)

    @classmethod
    def create(
        cls,
        input_size: int,
        state_size: int,
        layers: int,
        bidirectional: bool,
        seeds: Sequence[Rng],
        dtype: npt.DTypeLike = np.float64,
    ) -> LstmParams:
        """Creates the cells, drawing one seed per cell in `seeds`."""
        directions = 2 if bidirectional else 1
        if len(seeds) != directions * layers:
            raise ValueError(f"Expected {directions * layers} seeds, got {len(seeds)}")
        stacks: list[list[LstmCell]] = []
        seed_iter = iter(seeds)
        for _ in range(directions):
            stack = []
            size = input_size
            for _ in range(layers):
                stack.append(LstmCell.create(size, state_size, next(seed_iter), dtype))
                size = state_size
            stacks.append(stack)
        return cls(stacks[0], stacks[1] if bidirectional else [])

    def cells(self) -> list[tuple[str, LstmCell]]:
        """Returns every cell with its parameter path suffix."""
        named = [(f"forward/layer{i}", cell) for i, cell in enumerate(self.forward)]
        named += [(f"backward/layer{i}", cell) for i, cell in enumerate(self.backward)]
        return named

    def register(self, store: ParamStore, prefix: str) -> None:
        for name, cell in self.cells():
            store.add(f"{prefix}/{name}/weight", cell.weight)
            store.add(f"{prefix}/{name}/bias", cell.bias)


@dataclass
class EncoderOutput:
    """Summary state plus diagnostics.

    Attributes:
        s: Final top-layer hidden state, forward and backward concatenated
            when bidirectional. Shape (S,) for one question or (B, S).
        hidden_states: Top-layer forward hidden states per unroll step, for
            the rows still active at that step.
        step_counts: Number of unroll steps each question went through.
    """

    s: Tensor
    hidden_states: list[Tensor]
    step_counts: npt.NDArray[np.int64]


def encode_tokens(seq: TokenSequence, vocab: QuestionVocab) -> Tensor:
    """Returns the P x D tanh-squashed embeddings of a sequence."""
    return ops.tanh(ops.take(vocab.embedding, list(seq.token_ids)))


def lstm_step(
    e_t: Tensor, h: Tensor, c: Tensor, cell: LstmCell
) -> tuple[Tensor, Tensor]:
    """Advances one LSTM step.

    Returns:
        The new hidden and cell states.

    Raises:
        ShapeError: If the inputs do not conform to the cell.
    """
    size = cell.state_size
    if (
        h.shape != c.shape
        or h.shape[-1] != size
        or e_t.shape[-1] != cell.input_size
        or e_t.shape[:-1] != h.shape[:-1]
    ):
        raise ShapeError(
            f"LSTM step inputs {e_t.shape}, {h.shape}, {c.shape} do not match "
            f"a cell of input {cell.input_size} and state {size}"
        )
    gates = ops.linear(ops.concat([e_t, h], axis=-1), cell.weight, cell.bias)
    i, f, g, o = ops.split(gates, [size] * 4, axis=-1)
    c_next = ops.sigmoid(f) * c + ops.sigmoid(i) * ops.tanh(g)
    h_next = ops.sigmoid(o) * ops.tanh(c_next)
    return h_next, c_next


def _unroll(
    ids: npt.NDArray[np.int64],
    lengths: npt.NDArray[np.int64],
    embedding: Tensor,
    cells: Sequence[LstmCell],
    training: bool,
    dropout_rate: float,
    rng: np.random.Generator,
) -> tuple[Tensor, list[Tensor], npt.NDArray[np.int64]]:
    batch = ids.shape[0]
    zeros = Tensor(np.zeros((batch, cells[0].state_size), dtype=embedding.dtype))
    hs = [zeros] * len(cells)
    cs = [zeros] * len(cells)
    counts = np.zeros(batch, dtype=np.int64)
    outputs = []
    for t in range(int(lengths.max())):
        active = np.flatnonzero(lengths > t)
        full = active.size == batch
        x = ops.tanh(ops.take(embedding, ids[active, t]))
        for k, cell in enumerate(cells):
            x = ops.dropout(x, dropout_rate, training, rng)
            h_prev = hs[k] if full else ops.take(hs[k], active)
            c_prev = cs[k] if full else ops.take(cs[k], active)
            h_next, c_next = lstm_step(x, h_prev, c_prev, cell)
            hs[k] = h_next if full else ops.scatter_rows(hs[k], active, h_next)
            cs[k] = c_next if full else ops.scatter_rows(cs[k], active, c_next)
            x = h_next
        outputs.append(x)
        counts[active] += 1
    return hs[-1], outputs, counts


def _reverse_within_length(
    ids: npt.NDArray[np.int64], lengths: npt.NDArray[np.int64]
) -> npt.NDArray[np.int64]:
    reversed_ids = np.zeros_like(ids)
    for row, length in enumerate(lengths):
        reversed_ids[row, :length] = ids[row, :length][::-1]
    return reversed_ids


def pad_sequences(
    sequences: Sequence[TokenSequence],
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Packs sequences into a zero-padded id matrix and a length vector."""
    lengths = np.array([len(seq) for seq in sequences], dtype=np.int64)
    ids = np.zeros((len(sequences), int(lengths.max())), dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq.token_ids
    return ids, lengths


def encode_batch(
    token_ids: npt.ArrayLike,
    lengths: Indices,
    embedding: Tensor,
    params: LstmParams,
    training: bool = False,
    dropout_rate: float = 0.0,
    seed: Rng = 0,
) -> EncoderOutput:
    """Encodes a padded batch of questions with per-example dynamic unrolling.

    At step t only the rows with length > t are gathered, stepped and
    scattered back, so padding never reaches the summary state.

    Args:
        token_ids: (B, T) ids, zero-padded past each length.
        lengths: Number of tokens per question, each in [1, T].
        embedding: The |vocab| x D embedding table.
        params: LSTM weights.
        training: Enables dropout on every LSTM layer input.
        dropout_rate: Dropout rate used when training.
        seed: A seed or generator for the dropout masks.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    lengths_array = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or lengths_array.shape != (ids.shape[0],):
        raise ShapeError(f"Invalid batch shapes {ids.shape} / {lengths_array.shape}")
    if lengths_array.size == 0 or lengths_array.min() < 1:
        raise EmptyQuestionError("Every question needs at least one token")
    if lengths_array.max() > ids.shape[1]:
        raise ShapeError("A length exceeds the padded width")
    rng = as_rng(seed)
    final, hidden_states, counts = _unroll(
        ids, lengths_array, embedding, params.forward, training, dropout_rate, rng
    )
    if params.bidirectional:
        reversed_ids = _reverse_within_length(ids, lengths_array)
        final_backward, _, _ = _unroll(
            reversed_ids,
            lengths_array,
            embedding,
            params.backward,
            training,
            dropout_rate,
            rng,
        )
        final = ops.concat([final, final_backward], axis=-1)
    return EncoderOutput(final, hidden_states, counts)


def encode_question(
    seq: TokenSequence,
    vocab: QuestionVocab,
    params: LstmParams,
    training: bool = False,
    seed: Rng = 0,
    dropout_rate: float = 0.5,
) -> EncoderOutput:
    """Encodes one question; `s` has shape (S,)."""
    ids, lengths = pad_sequences([seq])
    output = encode_batch(
        ids, lengths, vocab.embedding, params, training, dropout_rate, seed
    )
    return EncoderOutput(
        ops.reshape(output.s, (output.s.shape[-1],)),
        [ops.reshape(h, (h.shape[-1],)) for h in output.hidden_states],
        output.step_counts,
    )
