import json
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pytest

from saaa import ops
from saaa.constants import UNK_ID, AnswerType
from saaa.errors import EmptyQuestionError, InvalidRecordError, ShapeError
from saaa.question import (
    LstmCell,
    LstmParams,
    QuestionRecord,
    QuestionVocab,
    TokenSequence,
    build_question_vocab,
    encode_batch,
    encode_question,
    encode_tokens,
    lstm_step,
    read_records,
    tokenize,
    write_records,
)
from saaa.tensor import ParamStore, Tensor, backward

from .conftest import FiniteDifference


def _record(qid: int, text: str) -> QuestionRecord:
    return QuestionRecord(question_id=qid, image_id=qid, text=text)


def _sigmoid(x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    return 1.0 / (1.0 + np.exp(-x))


@pytest.mark.parametrize(
    "text,tokens",
    (
        ("What time is it?", ["what", "time", "is", "it"]),
        ("How  many DOGS?!", ["how", "many", "dogs"]),
        ("Is it the man's hat", ["is", "it", "the", "man's", "hat"]),
    ),
)
def test_tokenize(text: str, tokens: list[str]) -> None:
    assert tokenize(text) == tokens


def test_tokenize_empty() -> None:
    with pytest.raises(EmptyQuestionError):
        tokenize("???")


def test_record_from_raw_annotations() -> None:
    record = QuestionRecord.from_dict(
        {
            "question_id": 7,
            "image_id": 3,
            "question": "What color?",
            "answers": [{"answer": "red"}] * 10,
            "answer_type": "other",
        }
    )
    assert record.answers == ("red",) * 10
    assert record.answer_type == AnswerType.other


@pytest.mark.parametrize(
    "value",
    (
        {"image_id": 1, "question": "Why?"},
        {"question_id": 1, "image_id": 1, "question": "Why?", "answers": ["a"]},
        {"question_id": 1, "image_id": 1, "question": " "},
        {"question_id": 1, "image_id": 1, "question": "Why?", "answer_type": "x"},
    ),
)
def test_invalid_records(value: dict[str, object]) -> None:
    with pytest.raises(InvalidRecordError):
        QuestionRecord.from_dict(value)


def test_records_file(tmp_path: Path) -> None:
    records = [
        QuestionRecord(1, 10, "Is it red?", ("yes",) * 10, AnswerType.yes_no),
        _record(2, "What is it?"),
    ]
    path = tmp_path / "records.jsonl"
    write_records(path, records)
    assert read_records(path) == records
    first = json.loads(path.read_text().splitlines()[0])
    assert list(first) == sorted(first)


def test_records_file_reports_line(tmp_path: Path) -> None:
    path = tmp_path / "broken.jsonl"
    path.write_text('{"question_id": 1, "image_id": 1, "question": "a"}\n{oops\n')
    with pytest.raises(InvalidRecordError, match=":2:"):
        read_records(path)


def test_build_question_vocab() -> None:
    vocab = build_question_vocab([_record(1, "a b a")], dim=300, seed=0)
    assert vocab.tokens == ["<unk>", "a", "b"]
    assert vocab.embedding.shape == (3, 300)
    again = build_question_vocab([_record(1, "a b a")], dim=300, seed=0)
    assert np.array_equal(vocab.embedding.data, again.embedding.data)


def test_build_question_vocab_needs_corpus() -> None:
    with pytest.raises(ValueError):
        build_question_vocab([], dim=4, seed=0)


def test_encode_maps_unknown_and_truncates() -> None:
    vocab = build_question_vocab([_record(1, "what is this")], dim=4, seed=0)
    seq = vocab.encode(["what", "zebra"])
    assert seq.token_ids == (vocab.index["what"], UNK_ID)
    long = vocab.encode(["is"] * 20)
    assert len(long) == 15


def test_token_sequence_limits() -> None:
    with pytest.raises(EmptyQuestionError):
        TokenSequence(())
    with pytest.raises(ShapeError):
        TokenSequence((1,) * 16)


def test_encode_tokens() -> None:
    vocab = build_question_vocab([_record(1, "a b")], dim=6, seed=1)
    out = encode_tokens(TokenSequence((UNK_ID, UNK_ID, UNK_ID)), vocab)
    assert out.shape == (3, 6)
    expected = np.tanh(vocab.embedding.data[UNK_ID])
    assert np.array_equal(out.data, np.stack([expected] * 3))
    assert np.all(np.abs(out.data) < 1)
    assert encode_tokens(TokenSequence((1,)), vocab).shape == (1, 6)


def _zero_cell(input_size: int, state_size: int) -> LstmCell:
    rows, columns = input_size + state_size, 4 * state_size
    return LstmCell(Tensor(np.zeros((rows, columns))), Tensor(np.zeros(columns)))


def test_lstm_step_zero_params() -> None:
    cell = _zero_cell(3, 2)
    e = Tensor(np.ones((1, 3)))
    h, c = lstm_step(e, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), cell)
    assert np.array_equal(h.data, np.zeros((1, 2)))
    assert np.array_equal(c.data, np.zeros((1, 2)))
    c0 = np.array([[0.8, -2.0]])
    _, c = lstm_step(e, Tensor(np.zeros((1, 2))), Tensor(c0), cell)
    np.testing.assert_allclose(c.data, 0.5 * c0)


def test_lstm_step_matches_cell_equations() -> None:
    rng = np.random.default_rng(4)
    cell = LstmCell.create(3, 2, seed=5)
    cell.bias.data = rng.standard_normal(8)
    e, h, c = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
    gates = np.concatenate([e, h]) @ cell.weight.data + cell.bias.data
    i, f, g, o = np.split(gates, 4)
    c_expected = _sigmoid(f) * c + _sigmoid(i) * np.tanh(g)
    h_expected = _sigmoid(o) * np.tanh(c_expected)
    h_next, c_next = lstm_step(Tensor(e), Tensor(h), Tensor(c), cell)
    np.testing.assert_allclose(c_next.data, c_expected, atol=1e-10)
    np.testing.assert_allclose(h_next.data, h_expected, atol=1e-10)


def test_lstm_step_rejects_mismatch() -> None:
    cell = LstmCell.create(3, 2, seed=0)
    with pytest.raises(ShapeError):
        lstm_step(Tensor(np.ones(4)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), cell)


def test_forget_bias_starts_at_one() -> None:
    cell = LstmCell.create(3, 2, seed=0)
    assert cell.bias.data.tolist() == [0, 0, 1, 1, 0, 0, 0, 0]


def _encoder(
    state: int = 5, layers: int = 1, bidirectional: bool = False
) -> tuple[QuestionVocab, LstmParams]:
    vocab = build_question_vocab(
        [_record(1, "what color is the small dog on the left")], dim=4, seed=2
    )
    directions = 2 if bidirectional else 1
    params = LstmParams.create(
        4, state, layers, bidirectional, list(range(directions * layers))
    )
    return vocab, params


@pytest.mark.parametrize("length", (1, 4, 15))
def test_encode_question_unrolls_length_steps(length: int) -> None:
    vocab, params = _encoder()
    seq = TokenSequence(tuple(1 + i % 8 for i in range(length)))
    output = encode_question(seq, vocab, params)
    assert output.s.shape == (5,)
    assert output.step_counts.tolist() == [length]
    assert len(output.hidden_states) == length


def test_encode_question_truncation() -> None:
    vocab, params = _encoder()
    tokens = "what color is the dog on the left what color is the dog on the left"
    long = vocab.encode(tokens.split())
    short = vocab.encode(tokens.split()[:15])
    s_long = encode_question(long, vocab, params).s.data
    s_short = encode_question(short, vocab, params).s.data
    assert np.array_equal(s_long, s_short)


def test_bidirectional_and_stacked_sizes() -> None:
    vocab, params = _encoder(state=6, layers=2, bidirectional=True)
    assert params.output_size == 12
    output = encode_question(vocab.encode(["what", "dog"]), vocab, params)
    assert output.s.shape == (12,)


def test_padding_never_reaches_state() -> None:
    vocab, params = _encoder(bidirectional=True)
    short = TokenSequence((3, 1))
    alone = encode_question(short, vocab, params).s.data
    ids = np.array([[3, 1, 0, 0], [2, 5, 6, 7]])
    padded = encode_batch(ids, [2, 4], vocab.embedding, params).s.data
    np.testing.assert_allclose(padded[0], alone, atol=1e-10)
    ids[0, 2:] = [4, 4]
    again = encode_batch(ids, [2, 4], vocab.embedding, params).s.data
    assert np.array_equal(again[0], padded[0])


def test_encoding_without_dropout_is_deterministic() -> None:
    vocab, params = _encoder()
    seq = vocab.encode(["what", "color", "dog"])
    first = encode_question(seq, vocab, params, training=False, seed=1).s.data
    second = encode_question(seq, vocab, params, training=False, seed=2).s.data
    assert np.array_equal(first, second)
    dropped = encode_question(seq, vocab, params, training=True, seed=1).s.data
    assert not np.array_equal(first, dropped)


def test_encode_batch_rejects_empty() -> None:
    vocab, params = _encoder()
    with pytest.raises(EmptyQuestionError):
        encode_batch(np.zeros((1, 2)), [0], vocab.embedding, params)


def test_encoder_gradients(finite_difference: FiniteDifference) -> None:
    vocab, params = _encoder(state=3)
    store = ParamStore()
    store.add("embedding", vocab.embedding)
    params.register(store, "lstm")
    seq = vocab.encode(["what", "dog", "left"])
    projection = Tensor(np.random.default_rng(0).standard_normal(3))

    def loss() -> Tensor:
        return ops.sum(encode_question(seq, vocab, params).s * projection)

    grads = backward(loss(), store)
    assert set(grads) == set(store.names())
    used = list(seq.token_ids)
    assert np.all(np.abs(grads["embedding"].data[used]).sum(axis=1) > 0)
    unused = [i for i in range(len(vocab)) if i not in used]
    assert np.all(grads["embedding"].data[unused] == 0)
    for name, param in store.items():
        expected = finite_difference(lambda: loss().item(), param.data)
        np.testing.assert_allclose(
            grads[name].data, expected, rtol=1e-4, atol=1e-8, err_msg=name
        )
