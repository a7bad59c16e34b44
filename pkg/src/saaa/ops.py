"""Differentiable primitives over `Tensor`.

Every function returns a new tensor whose backward closure routes the
incoming gradient to its inputs. Shapes follow numpy conventions.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .constants import L2_EPSILON, Activation
from .errors import InvalidArgumentError, ShapeError
from .tensor import Array, Indices, Rng, Tensor, as_rng


def _lift(value: Tensor | float, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"Axis {axis} is out of range for {ndim} dimensions")
    return axis % ndim


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise sum with broadcasting."""
    if not isinstance(a, Tensor):
        assert isinstance(b, Tensor)
        a = _lift(a, b)
    b = _lift(b, a)
    left, right = a, b
    try:
        data = left.data + right.data
    except ValueError as error:
        raise ShapeError(f"Cannot add {left.shape} and {right.shape}") from error

    def backward(grad: Array) -> None:
        left.accumulate(_unbroadcast(grad, left.shape))
        right.accumulate(_unbroadcast(grad, right.shape))

    return Tensor.from_op(data, (left, right), backward)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise difference with broadcasting."""
    if not isinstance(b, Tensor):
        assert isinstance(a, Tensor)
        return add(a, -b)
    return add(a, mul(b, -1.0))


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise product with broadcasting."""
    if not isinstance(a, Tensor):
        assert isinstance(b, Tensor)
        a = _lift(a, b)
    b = _lift(b, a)
    left, right = a, b
    try:
        data = left.data * right.data
    except ValueError as error:
        raise ShapeError(f"Cannot multiply {left.shape} and {right.shape}") from error

    def backward(grad: Array) -> None:
        left.accumulate(_unbroadcast(grad * right.data, left.shape))
        right.accumulate(_unbroadcast(grad * left.data, right.shape))

    return Tensor.from_op(data, (left, right), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"Cannot matmul {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(grad: Array) -> None:
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        a.accumulate(_unbroadcast(grad_a, a.shape))
        b.accumulate(_unbroadcast(grad_b, b.shape))

    return Tensor.from_op(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Computes `x @ weight + bias` over the last axis of `x`.

    Leading axes of `x` are treated as a batch, so the same map is applied
    independently at every position (a 1x1 convolution over a grid).

    Raises:
        ShapeError: If the inner dimensions or the bias do not conform.
    """
    if (
        weight.ndim != 2
        or x.ndim < 1
        or x.shape[-1] != weight.shape[0]
        or bias.shape != (weight.shape[1],)
    ):
        raise ShapeError(
            f"Cannot apply linear map {weight.shape} + {bias.shape} to {x.shape}"
        )
    n_in, n_out = weight.shape
    flat = x.data.reshape(-1, n_in)
    data = (flat @ weight.data + bias.data).reshape(x.shape[:-1] + (n_out,))

    def backward(grad: Array) -> None:
        flat_grad = grad.reshape(-1, n_out)
        x.accumulate((flat_grad @ weight.data.T).reshape(x.shape))
        weight.accumulate(flat.T @ flat_grad)
        bias.accumulate(flat_grad.sum(axis=0))

    return Tensor.from_op(data, (x, weight, bias), backward)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward(grad: Array) -> None:
        x.accumulate(grad * (1.0 - data * data))

    return Tensor.from_op(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def backward(grad: Array) -> None:
        x.accumulate(grad * (x.data > 0.0))

    return Tensor.from_op(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(grad: Array) -> None:
        x.accumulate(grad * data * (1.0 - data))

    return Tensor.from_op(data, (x,), backward)


def activation(x: Tensor, kind: Activation | str) -> Tensor:
    """Applies tanh, relu or sigmoid elementwise."""
    match Activation(kind):
        case Activation.tanh:
            return tanh(x)
        case Activation.relu:
            return relu(x)
        case Activation.sigmoid:
            return sigmoid(x)
        case _:
            raise InvalidArgumentError(f"Unknown activation: {kind}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max-subtraction."""
    axis = _axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    data = exp / exp.sum(axis=axis, keepdims=True)

    def backward(grad: Array) -> None:
        inner = (grad * data).sum(axis=axis, keepdims=True)
        x.accumulate(data * (grad - inner))

    return Tensor.from_op(data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log of the softmax along `axis`, computed by log-sum-exp."""
    axis = _axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(grad: Array) -> None:
        probs = np.exp(data)
        x.accumulate(grad - probs * grad.sum(axis=axis, keepdims=True))

    return Tensor.from_op(data, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, epsilon: float = L2_EPSILON) -> Tensor:
    """Divides each slice along `axis` by max(||slice||, epsilon).

    Raises:
        InvalidArgumentError: If epsilon is not positive.
    """
    if epsilon <= 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    axis = _axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clipped = norm > epsilon
    divisor = np.where(clipped, norm, epsilon).astype(x.dtype)
    data = x.data / divisor

    def backward(grad: Array) -> None:
        projection = (grad * data).sum(axis=axis, keepdims=True)
        x.accumulate(np.where(clipped, (grad - data * projection), grad) / divisor)

    return Tensor.from_op(data, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, seed: Rng) -> Tensor:
    """Inverted dropout.

    When training, each element is kept with probability 1 - rate and scaled
    by 1 / (1 - rate); otherwise `x` itself is returned.

    Raises:
        InvalidArgumentError: If rate is outside [0, 1).
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = as_rng(seed).random(x.shape) >= rate
    mask = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return mul(x, Tensor(mask))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenates tensors along `axis`.

    Raises:
        ShapeError: If the list is empty or shapes differ off `axis`.
    """
    if not tensors:
        raise ShapeError("Cannot concatenate an empty list")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0]
    axis = _axis(axis, first.ndim)
    for tensor in tensors[1:]:
        if tensor.ndim != first.ndim or any(
            tensor.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise ShapeError(
                f"Cannot concatenate {first.shape} and {tensor.shape} on axis {axis}"
            )
    parts = tuple(tensors)
    data = np.concatenate([tensor.data for tensor in parts], axis=axis)
    offsets = np.cumsum([tensor.shape[axis] for tensor in parts])[:-1]

    def backward(grad: Array) -> None:
        for tensor, piece in zip(parts, np.split(grad, offsets, axis=axis)):
            tensor.accumulate(piece)

    return Tensor.from_op(data, parts, backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Returns `x[..., start:stop, ...]` along `axis`."""
    axis = _axis(axis, x.ndim)
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"Invalid slice {start}:{stop} of extent {x.shape[axis]}")
    index = tuple(
        slice(start, stop) if i == axis else slice(None) for i in range(x.ndim)
    )
    data = x.data[index]

    def backward(grad: Array) -> None:
        full = np.zeros_like(x.data)
        full[index] = grad
        x.accumulate(full)

    return Tensor.from_op(data, (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Splits `x` into consecutive pieces of the given sizes along `axis`."""
    axis = _axis(axis, x.ndim)
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"Sizes {list(sizes)} do not add up to {x.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        pieces.append(slice_axis(x, start, start + size, axis))
        start += size
    return pieces


def sum(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Sums over the given axes (all axes by default)."""
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(grad: Array) -> None:
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        x.accumulate(np.broadcast_to(grad, x.shape))

    return Tensor.from_op(data, (x,), backward)


def mean(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Arithmetic mean over the given axes (all axes by default)."""
    total = sum(x, axis=axis, keepdims=keepdims)
    count = x.size // total.size
    return mul(total, 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as error:
        raise ShapeError(f"Cannot reshape {x.shape} to {tuple(shape)}") from error

    def backward(grad: Array) -> None:
        x.accumulate(grad.reshape(x.shape))

    return Tensor.from_op(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(_axis(axis, x.ndim) for axis in axes)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"Invalid permutation {tuple(axes)} for {x.ndim} axes")
    inverse = tuple(int(i) for i in np.argsort(order))
    data = x.data.transpose(order)

    def backward(grad: Array) -> None:
        x.accumulate(grad.transpose(inverse))

    return Tensor.from_op(data, (x,), backward)


def swapaxes(x: Tensor, first: int, second: int) -> Tensor:
    order = list(range(x.ndim))
    a, b = _axis(first, x.ndim), _axis(second, x.ndim)
    order[a], order[b] = order[b], order[a]
    return transpose(x, order)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeats `x` along broadcastable axes (tiling)."""
    try:
        data = np.broadcast_to(x.data, tuple(shape))
    except ValueError as error:
        raise ShapeError(f"Cannot broadcast {x.shape} to {tuple(shape)}") from error

    def backward(grad: Array) -> None:
        x.accumulate(_unbroadcast(grad, x.shape))

    return Tensor.from_op(data, (x,), backward)


def take(x: Tensor, indices: Indices) -> Tensor:
    """Gathers rows of `x` (axis 0); indices may repeat."""
    rows = np.asarray(indices, dtype=np.intp)
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise ShapeError(f"Row index out of range for {x.shape[0]} rows")
    data = x.data[rows]

    def backward(grad: Array) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, rows, grad)
        x.accumulate(full)

    return Tensor.from_op(data, (x,), backward)


def scatter_rows(base: Tensor, indices: Indices, values: Tensor) -> Tensor:
    """Returns a copy of `base` whose rows at `indices` are replaced by `values`.

    Indices must be unique.
    """
    rows = np.asarray(indices, dtype=np.intp)
    if values.shape != (rows.size,) + base.shape[1:]:
        raise ShapeError(
            f"Cannot scatter {values.shape} into {base.shape} at {rows.size} rows"
        )
    data = base.data.copy()
    data[rows] = values.data

    def backward(grad: Array) -> None:
        kept = grad.copy()
        kept[rows] = 0.0
        base.accumulate(kept)
        values.accumulate(grad[rows])

    return Tensor.from_op(data, (base, values), backward)
