import math
from collections.abc import Callable, Sequence

import numpy as np
import pytest

from saaa import ops
from saaa.constants import Activation
from saaa.errors import InvalidArgumentError, ShapeError
from saaa.tensor import Tensor, backward

from .conftest import FiniteDifference

Build = Callable[..., Tensor]


def _check_gradients(
    build: Build,
    shapes: Sequence[tuple[int, ...]],
    finite_difference: FiniteDifference,
    seed: int = 0,
) -> None:
    rng = np.random.default_rng(seed)
    inputs = [
        Tensor(rng.standard_normal(shape), requires_grad=True) for shape in shapes
    ]
    out_shape = build(*inputs).shape
    projection = Tensor(rng.standard_normal(out_shape))

    def loss() -> Tensor:
        return ops.sum(build(*inputs) * projection)

    backward(loss())
    for tensor in inputs:
        expected = finite_difference(lambda: loss().item(), tensor.data)
        assert tensor.grad is not None
        np.testing.assert_allclose(tensor.grad, expected, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize(
    "build,shapes",
    (
        (ops.add, ((2, 3), (3,))),
        (ops.sub, ((2, 3), (2, 1))),
        (ops.mul, ((2, 3), (1, 3))),
        (ops.matmul, ((2, 3, 4), (4, 2))),
        (ops.linear, ((2, 3, 4), (4, 5), (5,))),
        (ops.tanh, ((3, 4),)),
        (ops.relu, ((3, 4),)),
        (ops.sigmoid, ((3, 4),)),
        (lambda x: ops.softmax(x, axis=0), ((4, 3),)),
        (lambda x: ops.softmax(x, axis=-1), ((4, 3),)),
        (ops.log_softmax, ((2, 5),)),
        (ops.l2_normalize, ((3, 4),)),
        (lambda a, b: ops.concat([a, b], axis=1), ((2, 3), (2, 2))),
        (lambda x: ops.slice_axis(x, 1, 3, axis=0), ((4, 2),)),
        (lambda x: ops.split(x, [1, 3], axis=-1)[1], ((2, 4),)),
        (lambda x: ops.sum(x, axis=1), ((3, 4),)),
        (lambda x: ops.mean(x, axis=(0, 2)), ((2, 3, 4),)),
        (lambda x: ops.reshape(x, (6, 2)), ((3, 4),)),
        (lambda x: ops.transpose(x, (2, 0, 1)), ((2, 3, 4),)),
        (lambda x: ops.swapaxes(x, -1, -2), ((2, 3, 4),)),
        (lambda x: ops.broadcast_to(x, (3, 2, 4)), ((2, 1),)),
        (lambda x: ops.take(x, [2, 0, 2]), ((3, 4),)),
        (lambda x, v: ops.scatter_rows(x, [0, 2], v), ((4, 3), (2, 3))),
        (lambda x: ops.dropout(x, 0.5, True, 4), ((5, 6),)),
    ),
)
def test_gradients_match_finite_differences(
    build: Build,
    shapes: Sequence[tuple[int, ...]],
    finite_difference: FiniteDifference,
) -> None:
    _check_gradients(build, shapes, finite_difference)


def test_linear_examples() -> None:
    identity = ops.linear(
        Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2))
    )
    assert identity.data.tolist() == [[1.0, 2.0]]
    out = ops.linear(
        Tensor([[1.0, 1.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 0.0])
    )
    assert out.data.tolist() == [[5.0, 6.0]]


def test_linear_matches_triple_loop() -> None:
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.random(2)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            expected[i, j] = b[j] + math.fsum(x[i, k] * w[k, j] for k in range(4))
    out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_linear_rejects_mismatch() -> None:
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


@pytest.mark.parametrize(
    "kind,values,expected",
    (
        (Activation.relu, [-1.0, 0.0, 2.0], [0.0, 0.0, 2.0]),
        (Activation.tanh, [0.0], [0.0]),
        (Activation.sigmoid, [0.0], [0.5]),
        ("relu", [3.0], [3.0]),
    ),
)
def test_activation(
    kind: Activation | str, values: list[float], expected: list[float]
) -> None:
    assert ops.activation(Tensor(values), kind).data.tolist() == expected


def test_unknown_activation() -> None:
    with pytest.raises(ValueError):
        ops.activation(Tensor([1.0]), "gelu")


@pytest.mark.parametrize(
    "values,expected",
    (
        ([0.0, 0.0], [0.5, 0.5]),
        ([0.0, math.log(3.0)], [0.25, 0.75]),
        ([1000.0, 1000.0], [0.5, 0.5]),
    ),
)
def test_softmax_examples(values: list[float], expected: list[float]) -> None:
    np.testing.assert_allclose(ops.softmax(Tensor(values)).data, expected)


def test_softmax_sums_to_one_and_ignores_shifts() -> None:
    x = np.random.default_rng(2).standard_normal((4, 6)) * 10
    probs = ops.softmax(Tensor(x), axis=0).data
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)
    shifted = ops.softmax(Tensor(x + 7.5), axis=0).data
    np.testing.assert_allclose(shifted, probs, atol=1e-9)


def test_log_softmax_is_stable() -> None:
    out = ops.log_softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0)


@pytest.mark.parametrize(
    "values,expected",
    (([3.0, 4.0], [0.6, 0.8]), ([0.0, 0.0], [0.0, 0.0]), ([5.0, 0.0], [1.0, 0.0])),
)
def test_l2_normalize_examples(values: list[float], expected: list[float]) -> None:
    np.testing.assert_allclose(ops.l2_normalize(Tensor(values)).data, expected)


def test_l2_normalize_norms() -> None:
    x = np.random.default_rng(3).standard_normal((5, 7))
    x[2] = 1e-14
    norms = np.linalg.norm(ops.l2_normalize(Tensor(x)).data, axis=-1)
    np.testing.assert_allclose(np.delete(norms, 2), 1.0, atol=1e-6)
    assert norms[2] <= 1.0


def test_l2_normalize_rejects_bad_epsilon() -> None:
    with pytest.raises(InvalidArgumentError):
        ops.l2_normalize(Tensor([1.0]), epsilon=0.0)


def test_dropout_identity_cases() -> None:
    x = Tensor(np.random.default_rng(0).standard_normal(10))
    assert ops.dropout(x, 0.0, True, 1) is x
    assert ops.dropout(x, 0.5, False, 1) is x


def test_dropout_expectation() -> None:
    out = ops.dropout(Tensor(np.ones(100_000)), 0.5, True, 9).data
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out).tolist()) <= {0.0, 2.0}


def test_dropout_is_deterministic() -> None:
    x = Tensor(np.ones(50))
    first = ops.dropout(x, 0.3, True, 21).data
    second = ops.dropout(x, 0.3, True, 21).data
    assert np.array_equal(first, second)


@pytest.mark.parametrize("rate", (1.0, -0.1))
def test_dropout_rejects_rate(rate: float) -> None:
    with pytest.raises(InvalidArgumentError):
        ops.dropout(Tensor(np.ones(3)), rate, True, 0)


def test_concat_examples() -> None:
    joined = ops.concat([Tensor([1.0]), Tensor([2.0])], axis=0)
    assert joined.data.tolist() == [1.0, 2.0]
    single = Tensor([3.0])
    assert ops.concat([single]) is single


def test_split_recovers_concat() -> None:
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(4.0).reshape(2, 2))
    left, right = ops.split(ops.concat([a, b], axis=1), [3, 2], axis=1)
    assert np.array_equal(left.data, a.data)
    assert np.array_equal(right.data, b.data)


@pytest.mark.parametrize(
    "shapes",
    ([], [(2, 3), (3, 3)]),
)
def test_concat_rejects(shapes: list[tuple[int, int]]) -> None:
    with pytest.raises(ShapeError):
        ops.concat([Tensor(np.ones(shape)) for shape in shapes], axis=1)


def test_take_and_scatter_validate() -> None:
    x = Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        ops.take(x, [3])
    with pytest.raises(ShapeError):
        ops.scatter_rows(x, [0, 1], Tensor(np.ones((1, 2))))
