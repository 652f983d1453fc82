"""Dense tensors, the differentiable operations the networks need and
reverse-mode gradients over a recorded tape.

Operations only record onto a :py:class:`Tape` while it is active (entered as
a context manager) and at least one of their inputs is a node of that tape.
Outside a tape, every operation is a plain numpy computation.
"""

import contextvars
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import VxError

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

TRAIN = "train"
INFERENCE = "inference"
MODES = (TRAIN, INFERENCE)

DEFAULT_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5
SIGMOID_EPSILON = 1e-7

_current_tape = contextvars.ContextVar("vxadapt_tape", default=None)


def current_tape():
    return _current_tape.get()


def check_mode(mode):
    if mode not in MODES:
        raise VxError.data(
            "invalid_value.mode", f"mode must be one of {MODES}, got {mode!r}"
        )


# -----------------------------------------------------------------------------


class Tensor:
    """A dense float64 array, optionally tied to a node of a tape."""

    __slots__ = ("data", "node", "tape")

    # Make `ndarray <op> Tensor` defer to the Tensor's reflected operator.
    __array_priority__ = 1000

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise VxError.data(
                "invalid_shape.not_scalar",
                f"tensor of shape {self.shape} is not a scalar",
            )
        return float(self.data.reshape(()))

    __float__ = item

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, negative(other))

    def __rsub__(self, other):
        return add(other, negative(self))

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by plain scalars")
        return multiply(self, 1.0 / other)

    def __neg__(self):
        return negative(self)

    def __abs__(self):
        return absolute(self)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def stop_gradient(value):
    """Return the value as a constant, cut off from any tape."""
    return Tensor(as_tensor(value).data)


# -----------------------------------------------------------------------------


@dataclass
class Record:
    # Non-smooth operations save their argument as saved["kink"]; the
    # derivative jumps where it crosses zero.
    kind: str
    inputs: tuple
    output: int
    backward: Callable
    saved: dict = field(default_factory=dict)


class Tape:
    """An ordered record of the operations of one forward pass.

    Use as a context manager; parameter sets passed to :py:meth:`watch`
    become gradient leaves when the networks read them inside the context::

        with Tape() as tape:
            tape.watch(params)
            loss = l1_loss(decode2d(encode2d(x, params), params), x)
        grads = backward(tape, loss, params)
    """

    def __init__(self):
        self.records = []
        self._node_count = 0
        self._watched = {}
        self._leaves = {}
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_current_tape.set(self))
        return self

    def __exit__(self, *exc_info):
        _current_tape.reset(self._tokens.pop())

    def watch(self, *param_sets):
        for params in param_sets:
            self._watched[id(params)] = params

    def is_watching(self, params):
        return id(params) in self._watched

    def leaf(self, params, name):
        key = (id(params), name)
        if key not in self._leaves:
            self._leaves[key] = Tensor(params[name], self._new_node(), self)
        return self._leaves[key]

    def leaf_node(self, params, name):
        leaf = self._leaves.get((id(params), name))
        return None if leaf is None else leaf.node

    def record(self, kind, nodes, output_data, backward, saved):
        node = self._new_node()
        self.records.append(Record(kind, nodes, node, backward, saved))
        return Tensor(output_data, node, self)

    def _new_node(self):
        self._node_count += 1
        return self._node_count

    def __len__(self):
        return len(self.records)


def _apply(kind, inputs, output_data, backward, **saved):
    if not np.isfinite(output_data).all():
        raise VxError.data(
            "non_finite", f"{kind} produced non-finite values", operation=kind
        )

    tape = _current_tape.get()
    if tape is None:
        return Tensor(output_data)

    nodes = tuple(
        tensor.node if tensor.tape is tape else None for tensor in inputs
    )
    if all(node is None for node in nodes):
        return Tensor(output_data)

    return tape.record(kind, nodes, output_data, backward, saved)


def backward(tape, loss, wrt):
    """Compute gradients of a scalar loss by replaying the tape in reverse.

    :param Tape tape: The tape the loss was recorded on.
    :param Tensor loss: A scalar-valued tensor.
    :param wrt: A :py:class:`~vxadapt.params.ParameterSet`, or a sequence of
        them.
    :return: A gradient map (name to array) per parameter set, matching the
        structure of `wrt`. Parameters not on any path from the loss get
        explicit zeros.
    :raises VxError: If the loss is not a scalar.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise VxError.data(
            "invalid_shape.non_scalar_loss",
            f"loss must be a scalar, got shape {loss.shape}",
        )

    grads = {}
    if loss.tape is tape and loss.node is not None:
        grads[loss.node] = np.ones_like(loss.data)
        for record in reversed(tape.records):
            grad_out = grads.pop(record.output, None)
            if grad_out is None:
                continue

            needs = tuple(node is not None for node in record.inputs)
            input_grads = record.backward(grad_out, needs)
            for node, grad in zip(record.inputs, input_grads):
                if node is None or grad is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + grad
                else:
                    grads[node] = grad

    def collect(params):
        gradient_map = {}
        for name in params.trainable_names:
            node = tape.leaf_node(params, name)
            grad = grads.get(node) if node is not None else None
            if grad is None:
                grad = np.zeros_like(params[name])
            gradient_map[name] = grad
        return gradient_map

    if isinstance(wrt, (list, tuple)):
        return tuple(collect(params) for params in wrt)
    return collect(wrt)


# -----------------------------------------------------------------------------


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b)

    def grad_fn(grad, needs):
        return (
            _unbroadcast(grad, a.shape) if needs[0] else None,
            _unbroadcast(grad, b.shape) if needs[1] else None,
        )

    return _apply("add", (a, b), a.data + b.data, grad_fn)


def multiply(a, b):
    a = as_tensor(a)
    b = as_tensor(b)

    def grad_fn(grad, needs):
        return (
            _unbroadcast(grad * b.data, a.shape) if needs[0] else None,
            _unbroadcast(grad * a.data, b.shape) if needs[1] else None,
        )

    return _apply("multiply", (a, b), a.data * b.data, grad_fn)


def negative(a):
    a = as_tensor(a)
    return _apply("negative", (a,), -a.data, lambda grad, _: (-grad,))


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _apply(
        "absolute",
        (a,),
        np.abs(a.data),
        lambda grad, _: (grad * sign,),
        kink=a.data,
    )


def reduce_sum(a):
    a = as_tensor(a)

    def grad_fn(grad, _):
        return (np.broadcast_to(grad, a.shape).copy(),)

    return _apply("sum", (a,), np.asarray(a.data.sum()), grad_fn)


def reduce_mean(a):
    a = as_tensor(a)
    count = a.size

    def grad_fn(grad, _):
        return (np.full(a.shape, float(grad) / count),)

    return _apply("mean", (a,), np.asarray(a.data.mean()), grad_fn)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise VxError.data(
            "invalid_shape.reshape", f"cannot reshape {a.shape} to {shape}"
        ) from e

    return _apply(
        "reshape", (a,), data, lambda grad, _: (grad.reshape(a.shape),)
    )


# -----------------------------------------------------------------------------


def leaky_relu(x, slope=DEFAULT_SLOPE):
    """Elementwise ``x if x >= 0 else slope * x``."""
    if not 0 < slope < 1:
        raise VxError.data(
            "invalid_value.slope", f"slope must be in (0, 1), got {slope}"
        )

    x = as_tensor(x)
    factor = np.where(x.data >= 0, 1.0, slope)
    return _apply(
        "leaky_relu",
        (x,),
        x.data * factor,
        lambda grad, _: (grad * factor,),
        slope=slope,
        kink=x.data,
    )


def sigmoid(x):
    """Logistic function with outputs clipped to ``[eps, 1 - eps]``.

    `eps` is :py:data:`SIGMOID_EPSILON`. Clipped entries get zero gradient.
    """
    x = as_tensor(x)
    out = np.empty_like(x.data)
    positive = x.data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x.data[positive]))
    exp_x = np.exp(x.data[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)

    clipped = (out < SIGMOID_EPSILON) | (out > 1.0 - SIGMOID_EPSILON)
    out = np.clip(out, SIGMOID_EPSILON, 1.0 - SIGMOID_EPSILON)
    slope = np.where(clipped, 0.0, out * (1.0 - out))

    return _apply("sigmoid", (x,), out, lambda grad, _: (grad * slope,))


def l1_loss(a, b):
    """Mean absolute elementwise difference between two same-shaped tensors."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise VxError.data(
            "invalid_shape.l1_loss",
            f"cannot compare shapes {a.shape} and {b.shape}",
        )

    diff = a.data - b.data
    count = diff.size

    def grad_fn(grad, needs):
        grad_a = np.sign(diff) * (float(grad) / count)
        return (
            grad_a if needs[0] else None,
            -grad_a if needs[1] else None,
        )

    return _apply(
        "l1_loss",
        (a, b),
        np.asarray(np.abs(diff).mean()),
        grad_fn,
        kink=diff,
    )


def dense(x, weights, bias):
    """Affine map of the flattened input: ``x @ weights + bias``.

    :param x: Input of shape ``(batch, ...)``.
    :param weights: Matrix of shape ``(in_features, out_features)``.
    :param bias: Vector of length ``out_features``.
    """
    x = as_tensor(x)
    weights = as_tensor(weights)
    bias = as_tensor(bias)

    flat = x.data.reshape(x.shape[0], -1)
    if weights.ndim != 2 or flat.shape[1] != weights.shape[0]:
        raise VxError.data(
            "invalid_shape.dense",
            f"input of {flat.shape[1]} features does not match weights "
            f"of shape {weights.shape}",
        )
    if bias.shape != (weights.shape[1],):
        raise VxError.data(
            "invalid_shape.dense_bias",
            f"bias of shape {bias.shape} does not match {weights.shape[1]} "
            "output features",
        )

    def grad_fn(grad, needs):
        return (
            (grad @ weights.data.T).reshape(x.shape) if needs[0] else None,
            flat.T @ grad if needs[1] else None,
            grad.sum(axis=0) if needs[2] else None,
        )

    return _apply(
        "dense", (x, weights, bias), flat @ weights.data + bias.data, grad_fn
    )


# -----------------------------------------------------------------------------


def same_padding(in_size, out_size, kernel_size, stride):
    """Zero padding (before, after) so a window of `kernel_size` moving by
    `stride` over `in_size` positions yields exactly `out_size` outputs.
    """
    total = max((out_size - 1) * stride + kernel_size - in_size, 0)
    return total // 2, total - total // 2


def _conv_windows(x, kernel_shape, stride, pads, out_spatial):
    rank = len(kernel_shape)
    padded = np.pad(x, [(0, 0), (0, 0)] + list(pads))
    windows = sliding_window_view(
        padded, kernel_shape, axis=tuple(range(2, 2 + rank))
    )
    index = (slice(None), slice(None)) + tuple(
        slice(0, stride * (size - 1) + 1, stride) for size in out_spatial
    )
    return windows[index]


def _conv_forward(x, kernels, stride, pads, out_spatial):
    # x: (N, C, *in); kernels: (K, C, *k) -> (N, K, *out)
    rank = kernels.ndim - 2
    windows = _conv_windows(x, kernels.shape[2:], stride, pads, out_spatial)
    out = np.tensordot(
        windows,
        kernels,
        axes=(
            [1] + list(range(2 + rank, 2 + 2 * rank)),
            list(range(1, 2 + rank)),
        ),
    )
    return np.moveaxis(out, -1, 1)


def _conv_adjoint(grad, kernels, stride, pads, in_spatial):
    # grad: (N, K, *out); kernels: (K, C, *k) -> (N, C, *in)
    rank = kernels.ndim - 2
    out_spatial = grad.shape[2:]
    padded_shape = tuple(
        size + before + after
        for size, (before, after) in zip(in_spatial, pads)
    )
    result = np.zeros((grad.shape[0], kernels.shape[1]) + padded_shape)

    for offset in np.ndindex(*kernels.shape[2:]):
        tap = kernels[(slice(None), slice(None)) + offset]
        contribution = np.moveaxis(
            np.tensordot(grad, tap, axes=([1], [0])), -1, 1
        )
        index = (slice(None), slice(None)) + tuple(
            slice(start, start + stride * (size - 1) + 1, stride)
            for start, size in zip(offset, out_spatial)
        )
        result[index] += contribution

    crop = (slice(None), slice(None)) + tuple(
        slice(before, before + size)
        for size, (before, _) in zip(in_spatial, pads)
    )
    return result[crop]


def _conv_kernel_grad(x, grad, kernel_shape, stride, pads):
    # x: (N, C, *in); grad: (N, K, *out) -> (K, C, *k)
    rank = len(kernel_shape)
    windows = _conv_windows(x, kernel_shape, stride, pads, grad.shape[2:])
    spatial = list(range(2, 2 + rank))
    return np.tensordot(grad, windows, axes=([0] + spatial, [0] + spatial))


def convolution(x, kernels, bias, stride, rank, transposed=False):
    """Strided "same" convolution, or its transpose, in rank 2 or 3.

    Forward kernels have shape ``(out_channels, in_channels, s, ..., s)``;
    transposed kernels have shape ``(in_channels, out_channels, s, ..., s)``
    so that a transposed convolution is exactly the adjoint of the forward
    convolution sharing its kernels. A forward convolution maps spatial size
    ``n`` to ``ceil(n / stride)``; a transposed one maps ``n`` to
    ``n * stride``.

    :raises VxError: On a rank other than 2 or 3, a stride below 1, or
        mismatched channels.
    """
    if rank not in (2, 3):
        raise VxError.data(
            "invalid_value.rank", f"rank must be 2 or 3, got {rank}"
        )
    if stride < 1:
        raise VxError.data(
            "invalid_value.stride", f"stride must be >= 1, got {stride}"
        )

    x = as_tensor(x)
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)

    kernel_shape = kernels.shape[2:]
    if x.ndim != rank + 2 or kernels.ndim != rank + 2:
        raise VxError.data(
            "invalid_shape.convolution_rank",
            f"rank-{rank} convolution got input {x.shape} and kernels "
            f"{kernels.shape}",
        )
    if len(set(kernel_shape)) != 1:
        raise VxError.data(
            "invalid_shape.kernel",
            f"kernels must be cubic or square, got {kernel_shape}",
        )

    in_channels, out_channels = (
        (kernels.shape[0], kernels.shape[1])
        if transposed
        else (kernels.shape[1], kernels.shape[0])
    )
    if x.shape[1] != in_channels:
        raise VxError.data(
            "invalid_shape.channels",
            f"input has {x.shape[1]} channels but kernels expect "
            f"{in_channels}",
        )
    if bias.shape != (out_channels,):
        raise VxError.data(
            "invalid_shape.bias",
            f"bias of shape {bias.shape} does not match {out_channels} "
            "output channels",
        )

    bias_view = bias.data.reshape((1, out_channels) + (1,) * rank)
    size = kernel_shape[0]

    if not transposed:
        in_spatial = x.shape[2:]
        out_spatial = tuple(math.ceil(n / stride) for n in in_spatial)
        pads = [
            same_padding(n_in, n_out, size, stride)
            for n_in, n_out in zip(in_spatial, out_spatial)
        ]
        out = (
            _conv_forward(x.data, kernels.data, stride, pads, out_spatial)
            + bias_view
        )

        def grad_fn(grad, needs):
            return (
                _conv_adjoint(grad, kernels.data, stride, pads, in_spatial)
                if needs[0]
                else None,
                _conv_kernel_grad(x.data, grad, kernel_shape, stride, pads)
                if needs[1]
                else None,
                grad.sum(axis=(0,) + tuple(range(2, 2 + rank)))
                if needs[2]
                else None,
            )

    else:
        small_spatial = x.shape[2:]
        big_spatial = tuple(n * stride for n in small_spatial)
        pads = [
            same_padding(n_big, n_small, size, stride)
            for n_big, n_small in zip(big_spatial, small_spatial)
        ]
        out = (
            _conv_adjoint(x.data, kernels.data, stride, pads, big_spatial)
            + bias_view
        )

        def grad_fn(grad, needs):
            return (
                _conv_forward(grad, kernels.data, stride, pads, small_spatial)
                if needs[0]
                else None,
                _conv_kernel_grad(grad, x.data, kernel_shape, stride, pads)
                if needs[1]
                else None,
                grad.sum(axis=(0,) + tuple(range(2, 2 + rank)))
                if needs[2]
                else None,
            )

    return _apply(
        "convolution",
        (x, kernels, bias),
        out,
        grad_fn,
        stride=stride,
        transposed=transposed,
    )


# -----------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean and variance of a batch-norm layer.

    Train-mode batch norm rebinds `mean` and `var` to fresh arrays instead of
    writing into the existing ones.
    """

    mean: Any
    var: Any
    updated: bool = False


def batch_norm(
    x,
    scale,
    shift,
    mode=TRAIN,
    running_stats=None,
    momentum=BN_MOMENTUM,
    epsilon=BN_EPSILON,
):
    """Per-channel standardization followed by an affine scale and shift.

    Channels are axis 1; statistics are taken over the batch axis and every
    spatial axis. In train mode the batch statistics are used and, if given,
    `running_stats` is advanced by an exponential moving average. In
    inference mode the running statistics are used and nothing is mutated.
    """
    check_mode(mode)
    x = as_tensor(x)
    scale = as_tensor(scale)
    shift = as_tensor(shift)

    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise VxError.data(
            "invalid_shape.batch_norm",
            f"scale {scale.shape} and shift {shift.shape} must match "
            f"{channels} channels",
        )

    axes = (0,) + tuple(range(2, x.ndim))
    param_shape = (1, channels) + (1,) * (x.ndim - 2)

    if mode == TRAIN:
        if x.shape[0] < 2:
            raise VxError.data(
                "invalid_shape.batch_norm_batch",
                "train-mode batch norm needs a batch of at least 2",
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            running_stats.mean = (
                momentum * running_stats.mean + (1.0 - momentum) * mean
            )
            running_stats.var = (
                momentum * running_stats.var + (1.0 - momentum) * var
            )
            running_stats.updated = True
    else:
        if running_stats is None:
            raise VxError.data(
                "invalid_value.running_stats",
                "inference-mode batch norm needs running statistics",
            )
        mean = running_stats.mean
        var = running_stats.var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    normalized = (x.data - mean.reshape(param_shape)) * inv_std.reshape(
        param_shape
    )
    out = normalized * scale.data.reshape(param_shape) + shift.data.reshape(
        param_shape
    )
    count = x.size // channels

    def grad_fn(grad, needs):
        grad_x = None
        if needs[0]:
            grad_norm = grad * scale.data.reshape(param_shape)
            if mode == TRAIN:
                grad_x = (inv_std.reshape(param_shape) / count) * (
                    count * grad_norm
                    - grad_norm.sum(axis=axes, keepdims=True)
                    - normalized
                    * (grad_norm * normalized).sum(axis=axes, keepdims=True)
                )
            else:
                grad_x = grad_norm * inv_std.reshape(param_shape)
        return (
            grad_x,
            (grad * normalized).sum(axis=axes) if needs[1] else None,
            grad.sum(axis=axes) if needs[2] else None,
        )

    return _apply(
        "batch_norm", (x, scale, shift), out, grad_fn, mode=mode, axes=axes
    )
