from pathlib import Path

import numpy as np
import pytest

from saaa.constants import MAX_QUESTION_LENGTH
from saaa.dataset import FEATURES_DIR, TRAIN_FILE, VAL_FILE, Dataset
from saaa.errors import ConfigurationError, InvalidArgumentError
from saaa.features import normalize_depth, spatial_mean
from saaa.question import build_question_vocab
from saaa.synth import (
    KEY_SIZE,
    SynthDataset,
    SynthSpec,
    answer_names,
    cell_keys,
    generate_synthetic,
    location_token,
    make_synthetic,
    question_fillers,
)


def test_records(synth: SynthDataset) -> None:
    assert len(synth.records) == 24
    assert len(synth.val_records) == 12
    record = synth.records[0]
    assert len(record.answers) == 10
    assert len(set(record.answers)) == 1
    assert record.tokens[-1] == "r0c0"
    assert {fm.values.shape for fm in synth.features.values()} == {(4, 4, 8)}


def test_answer_is_stored_in_asked_cell(synth: SynthDataset) -> None:
    names = answer_names(synth.spec.answers)
    for record in synth.records + synth.val_records:
        fm = synth.features[record.image_id]
        cell = synth.cells[record.question_id]
        value = fm.values.data.reshape(-1, synth.spec.depth)[cell, KEY_SIZE:]
        similarity = synth.prototypes @ value
        assert names[int(np.argmax(similarity))] == record.answers[0]


def test_spatial_means_do_not_identify_answers(synth: SynthDataset) -> None:
    means = [
        spatial_mean(normalize_depth(fm)).data for fm in synth.features.values()
    ]
    for mean in means[1:]:
        np.testing.assert_allclose(mean, means[0], atol=1e-5)


def test_question_groups_share_a_cell(synth: SynthDataset) -> None:
    spec = synth.spec
    for group in range(spec.count // spec.answers):
        members = synth.records[group * spec.answers : (group + 1) * spec.answers]
        assert len({record.text for record in members}) == 1
        assert len({record.answers[0] for record in members}) == spec.answers


def test_cell_keys_are_distinct() -> None:
    keys = cell_keys(3, 5).reshape(15, KEY_SIZE)
    assert len({tuple(np.round(key, 6)) for key in keys}) == 15
    np.testing.assert_allclose(np.linalg.norm(keys, axis=1), np.sqrt(2))


def test_generation_is_deterministic(tmp_path: Path, synth_spec: SynthSpec) -> None:
    generate_synthetic(synth_spec, tmp_path / "a")
    generate_synthetic(synth_spec, tmp_path / "b")
    for name in (TRAIN_FILE, VAL_FILE, f"{FEATURES_DIR}/5.saaf"):
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_data() -> None:
    first = make_synthetic(SynthSpec(count=4, seed=1))
    second = make_synthetic(SynthSpec(count=4, seed=2))
    assert not np.array_equal(
        first.features[0].values.data, second.features[0].values.data
    )


@pytest.mark.parametrize(
    "overrides",
    (
        {"count": 0},
        {"depth": 4},
        {"answers": 17},
        {"question_vocab": 16},
        {"val_count": -1},
    ),
)
def test_invalid_specs(overrides: dict[str, int]) -> None:
    with pytest.raises(InvalidArgumentError):
        SynthSpec(**overrides)


def test_dataset_load(data_dir: Path, synth: SynthDataset) -> None:
    dataset = Dataset.load(data_dir, workers=2)
    assert dataset.train == synth.records
    assert dataset.val == synth.val_records
    assert dataset.eval_records() == synth.val_records
    assert len(dataset.features) == 36
    assert dataset.find(30) == synth.val_records[6]
    assert dataset.find(99) is None
    fm = dataset.features[3]
    assert np.array_equal(fm.values.data, synth.features[3].values.data)


def test_dataset_without_validation(tmp_path: Path) -> None:
    generate_synthetic(SynthSpec(count=6), tmp_path)
    dataset = Dataset.load(tmp_path, preload=False)
    assert dataset.val is None
    assert dataset.eval_records() == dataset.train


def test_dataset_missing_paths(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="Missing path"):
        Dataset.load(tmp_path / "nowhere")
    generate_synthetic(SynthSpec(count=2), tmp_path)
    (tmp_path / FEATURES_DIR / "0.saaf").unlink()
    (tmp_path / FEATURES_DIR / "1.saaf").unlink()
    (tmp_path / FEATURES_DIR).rmdir()
    with pytest.raises(ConfigurationError, match="features"):
        Dataset.load(tmp_path)


def test_large_filler_sets_keep_the_location_token() -> None:
    data = make_synthetic(SynthSpec(count=96, question_vocab=40))
    vocab = build_question_vocab(data.records, 4, seed=0)
    for record in data.records:
        row, column = divmod(data.cells[record.question_id], data.spec.width)
        assert len(record.tokens) <= MAX_QUESTION_LENGTH
        encoded = vocab.encode(record.tokens).token_ids
        assert vocab.index[location_token(row, column)] in encoded
    assert len(vocab) == 41


def test_question_fillers() -> None:
    words = [f"w{k}" for k in range(20)]
    assert question_fillers(words[:5], 3) == words[:5]
    assert question_fillers(words, 0) == words[:14]
    assert question_fillers(words, 1) == words[14:] + words[:8]
