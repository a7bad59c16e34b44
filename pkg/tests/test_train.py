from pathlib import Path

import numpy as np
import pytest

from saaa.answer import batch_loss
from saaa.checkpoint import checkpoint_bytes, load_checkpoint
from saaa.config import TrainConfig
from saaa.constants import UNK_ID, Precision
from saaa.errors import ConfigurationError, TrainingDivergedError
from saaa.evaluate import evaluate_model
from saaa.features import FeatureMap
from saaa.model import VqaModel
from saaa.question import QuestionRecord
from saaa.synth import SynthDataset, SynthSpec, make_synthetic
from saaa.tensor import Tensor, backward
from saaa.train import (
    FINAL_CHECKPOINT,
    METRICS_FILE,
    BatchSampler,
    MetricsRow,
    checkpoint_name,
    read_metrics,
    train,
    write_metrics,
)
from saaa.vocabulary import AnswerVocabulary, build_answer_vocab

from .conftest import FiniteDifference


def test_batch_sampler_covers_each_epoch() -> None:
    sampler = BatchSampler(count=10, batch_size=5, seed=1)
    first_epoch = sampler.batch(0) + sampler.batch(1)
    assert sorted(first_epoch) == list(range(10))
    assert all(len(sampler.batch(step)) == 5 for step in range(7))


def test_batch_sampler_wraps_epochs() -> None:
    sampler = BatchSampler(count=5, batch_size=4, seed=2)
    stream = [i for step in range(5) for i in sampler.batch(step)]
    for epoch in range(4):
        assert sorted(stream[5 * epoch : 5 * epoch + 5]) == list(range(5))


def test_batch_sampler_is_deterministic() -> None:
    first = BatchSampler(count=30, batch_size=8, seed=3)
    second = BatchSampler(count=30, batch_size=8, seed=3)
    assert [first.batch(s) for s in range(9)] == [second.batch(s) for s in range(9)]
    assert second.batch(20) == BatchSampler(30, 8, 3).batch(20)


def test_metrics_file(tmp_path: Path) -> None:
    rows = [MetricsRow(1, 0.001, 2.5), MetricsRow(2, 0.0009, 2.25, 0.5)]
    path = tmp_path / METRICS_FILE
    write_metrics(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,lr,train_loss,eval_accuracy"
    assert lines[1].endswith(",")
    assert read_metrics(path) == rows


def test_zero_steps_returns_initialization(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    config = toy_config.with_overrides(total_steps=0)
    result = train(config, synth.records, synth.features)
    vocab = build_answer_vocab(synth.records, config.answer_vocab_size)
    fresh = VqaModel.build(config, synth.records, vocab, synth.spec.depth)
    assert result.checkpoint.step == 0
    assert result.metrics == []
    for name, param in fresh.store.items():
        assert np.array_equal(result.checkpoint.params[name], param.data)


def test_training_is_deterministic(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    first = train(toy_config, synth.records, synth.features, synth.val_records)
    second = train(toy_config, synth.records, synth.features, synth.val_records)
    assert checkpoint_bytes(first.checkpoint) == checkpoint_bytes(second.checkpoint)
    assert first.metrics == second.metrics


def test_outputs(tmp_path: Path, toy_config: TrainConfig, synth: SynthDataset) -> None:
    result = train(
        toy_config, synth.records, synth.features, synth.val_records, out_dir=tmp_path
    )
    assert [row.step for row in result.metrics] == list(range(1, 21))
    evaluated = [row.step for row in result.metrics if row.eval_accuracy is not None]
    assert evaluated == [10, 20]
    assert set(result.milestone_accuracy) == {10, 20}
    assert all(value is not None for value in result.milestone_accuracy.values())
    for name in (checkpoint_name(10), checkpoint_name(20), FINAL_CHECKPOINT):
        assert (tmp_path / name).exists()
    assert read_metrics(tmp_path / METRICS_FILE) == result.metrics
    final = load_checkpoint(tmp_path / FINAL_CHECKPOINT)
    assert checkpoint_bytes(final) == checkpoint_bytes(result.checkpoint)
    assert final.step == 20
    assert final.adam.step == 20


def test_learning_rate_follows_schedule(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    result = train(toy_config, synth.records, synth.features)
    for row in result.metrics:
        expected = toy_config.l0 * 0.5 ** ((row.step - 1) / toy_config.decay_steps)
        assert row.lr == pytest.approx(expected, rel=1e-12)


def test_resume_matches_uninterrupted_run(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    full = train(toy_config, synth.records, synth.features)
    half = train(
        toy_config.with_overrides(total_steps=10), synth.records, synth.features
    )
    resumed = train(toy_config, synth.records, synth.features, resume=half.checkpoint)
    assert [row.step for row in resumed.metrics] == list(range(11, 21))
    assert resumed.metrics == full.metrics[10:]
    for name, value in full.checkpoint.params.items():
        assert np.array_equal(resumed.checkpoint.params[name], value)
    assert checkpoint_bytes(resumed.checkpoint) == checkpoint_bytes(full.checkpoint)


def test_resume_rejects_changed_config(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    half = train(
        toy_config.with_overrides(total_steps=2), synth.records, synth.features
    )
    with pytest.raises(ConfigurationError, match="l0"):
        train(
            toy_config.with_overrides(l0=0.5),
            synth.records,
            synth.features,
            resume=half.checkpoint,
        )


def test_all_out_of_vocabulary_answers(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    with pytest.raises(ConfigurationError, match="No usable training examples"):
        train(
            toy_config,
            synth.records,
            synth.features,
            answer_vocab=AnswerVocabulary(["no such answer"]),
        )


def test_missing_features_are_skipped(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    features = dict(synth.features)
    del features[synth.records[0].image_id]
    result = train(toy_config, synth.records, features)
    assert list(result.skipped) == [synth.records[0].question_id]


def test_non_finite_loss_aborts(toy_config: TrainConfig, synth: SynthDataset) -> None:
    config = toy_config.with_overrides(l2_norm=False)
    features = {
        image_id: FeatureMap(image_id, Tensor(np.full(fm.values.shape, np.inf)))
        for image_id, fm in synth.features.items()
    }
    with pytest.raises(TrainingDivergedError) as info:
        train(config, synth.records, features)
    assert info.value.step == 0
    assert len(info.value.dump["question_ids"]) == config.batch_size


def test_sampled_loss_runs(toy_config: TrainConfig, synth: SynthDataset) -> None:
    config = toy_config.with_overrides(sampled_loss=True, total_steps=5)
    result = train(config, synth.records, synth.features)
    assert all(np.isfinite(row.train_loss) for row in result.metrics)


def _overfit_config(**overrides: object) -> TrainConfig:
    values: dict[str, object] = {
        "embedding_dim": 16,
        "lstm_state_size": 32,
        "attention_hidden": 32,
        "glimpse_count": 2,
        "classifier_sizes": (64,),
        "answer_vocab_size": 6,
        "batch_size": 32,
        "total_steps": 2000,
        "milestone_steps": (2000,),
        "l0": 0.01,
        "decay_steps": 50_000,
        "dropout_rate": 0.0,
        "precision": Precision.float32,
        "eval_batch_size": 32,
        "workers": 1,
    }
    values.update(overrides)
    return TrainConfig.from_mapping(values)


@pytest.fixture(scope="module")
def overfit_data() -> SynthDataset:
    return make_synthetic(SynthSpec(count=32, seed=5))


def test_overfits_synthetic_task(overfit_data: SynthDataset) -> None:
    result = train(_overfit_config(), overfit_data.records, overfit_data.features)
    accuracy = result.milestone_accuracy[2000]
    assert accuracy is not None and accuracy >= 0.95
    losses = [row.train_loss for row in result.metrics]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_attention_beats_no_attention(overfit_data: SynthDataset) -> None:
    records, features = overfit_data.records, overfit_data.features
    with_attention = train(
        _overfit_config(total_steps=1000, milestone_steps=(1000,)), records, features
    )
    without = train(
        _overfit_config(total_steps=1000, milestone_steps=(1000,), attention=False),
        records,
        features,
    )
    assert without.model.attention is None
    accuracy = evaluate_model(with_attention.model, records, features).overall
    baseline = evaluate_model(without.model, records, features).overall
    assert accuracy >= baseline + 0.10


def test_frozen_batch_loss_decreases(
    toy_config: TrainConfig, synth: SynthDataset
) -> None:
    config = toy_config.with_overrides(total_steps=50, dropout_rate=0.0)
    result = train(config, synth.records, synth.features)
    initial = train(config.with_overrides(total_steps=0), synth.records, synth.features)
    batch = initial.model.prepare(synth.records[:8], synth.features).examples

    def loss(model: VqaModel) -> float:
        dist = model.forward_examples(batch).dist
        return batch_loss(dist, [e.answer_ids for e in batch]).item()

    assert loss(result.model) < loss(initial.model)


def test_full_pipeline_gradients(finite_difference: FiniteDifference) -> None:
    config = TrainConfig(
        embedding_dim=8,
        lstm_state_size=16,
        attention_hidden=4,
        glimpse_count=2,
        classifier_sizes=(8,),
        answer_vocab_size=6,
        precision=Precision.float64,
    )
    records = [
        QuestionRecord(1, 1, "what is left", ("a",) * 10),
        QuestionRecord(2, 2, "what is right", ("b",) * 10),
    ]
    vocab = AnswerVocabulary(["a", "b", "c", "d", "e", "f"])
    model = VqaModel.build(config, records, vocab, feature_depth=4)
    rng = np.random.default_rng(0)
    features = [
        FeatureMap(image_id, Tensor(rng.standard_normal((2, 2, 4))))
        for image_id in (1, 2)
    ]
    tokens = [model.question_vocab.encode(r.tokens) for r in records]

    def loss() -> Tensor:
        return batch_loss(model.forward(tokens, features).dist, [[0, 0, 2], [1]])

    grads = backward(loss(), model.store)
    assert set(grads) == set(model.store.names())
    for name, param in model.store.items():
        expected = finite_difference(lambda: loss().item(), param.data)
        np.testing.assert_allclose(
            grads[name].data, expected, rtol=1e-4, atol=1e-7, err_msg=name
        )


@pytest.mark.parametrize("unk_rate,trained", ((0.0, False), (0.5, True)))
def test_unknown_token_row_is_trained(
    toy_config: TrainConfig, synth: SynthDataset, unk_rate: float, trained: bool
) -> None:
    config = toy_config.with_overrides(unk_rate=unk_rate)
    vocab = build_answer_vocab(synth.records, config.answer_vocab_size)
    model = VqaModel.build(config, synth.records, vocab, synth.spec.depth)
    batch = model.prepare(synth.records[:8], synth.features).examples
    dist = model.forward_examples(batch, training=True, seed=4).dist
    grads = backward(batch_loss(dist, [e.answer_ids for e in batch]), model.store)
    assert np.any(grads["embedding"].data[UNK_ID] != 0.0) == trained
