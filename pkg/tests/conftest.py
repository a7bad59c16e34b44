from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from saaa.config import TrainConfig
from saaa.constants import Precision
from saaa.synth import SynthDataset, SynthSpec, generate_synthetic, make_synthetic
from saaa.tensor import Array

FiniteDifference = Callable[[Callable[[], float], Array], Array]


@pytest.fixture
def finite_difference() -> FiniteDifference:
    """Central differences of a scalar function with respect to an array.

    The array is perturbed in place and restored after every evaluation.
    """

    def gradient(f: Callable[[], float], array: Array, eps: float = 1e-6) -> Array:
        grad = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + eps
            plus = f()
            array[index] = original - eps
            minus = f()
            array[index] = original
            grad[index] = (plus - minus) / (2 * eps)
        return grad

    return gradient


@pytest.fixture
def toy_config() -> TrainConfig:
    return TrainConfig(
        embedding_dim=8,
        lstm_state_size=8,
        attention_hidden=8,
        glimpse_count=2,
        classifier_sizes=(16,),
        answer_vocab_size=10,
        batch_size=8,
        total_steps=20,
        milestone_steps=(10, 20),
        decay_steps=50,
        l0=0.01,
        precision=Precision.float64,
        eval_batch_size=16,
        workers=1,
    )


@pytest.fixture
def synth_spec() -> SynthSpec:
    return SynthSpec(count=24, val_count=12, seed=3)


@pytest.fixture
def synth(synth_spec: SynthSpec) -> SynthDataset:
    return make_synthetic(synth_spec)


@pytest.fixture
def data_dir(tmp_path: Path, synth_spec: SynthSpec) -> Path:
    directory = tmp_path / "data"
    generate_synthetic(synth_spec, directory)
    return directory
