"""Assertion helpers, registered as a pytest plugin."""

import re
from collections.abc import Mapping, Sequence

import numpy as np

from .exceptions import VxError
from .tensor import Tape, Tensor, as_tensor, backward
from .utils import UNDEFINED

# -----------------------------------------------------------------------------

#: Step of the central differences.
DEFAULT_STEP = 1e-4
DEFAULT_RTOL = 1e-3
DEFAULT_ATOL = 1e-6
#: Distance from zero within which a kink argument may not change side.
DEFAULT_KINK = 1e-3

# -----------------------------------------------------------------------------


class Predicate:
    """A helper object to do predicate assertion"""

    def __init__(self, predicate):
        self.predicate = predicate

    def __eq__(self, other):
        return self.predicate(other)

    def __ne__(self, other):
        return not self.predicate(other)


def InstanceOf(type):
    return Predicate(lambda value: isinstance(value, type))


def Matching(expected_regex):
    return Predicate(re.compile(expected_regex).match)


def Close(expected, tolerance=1e-6):
    return Predicate(lambda value: abs(value - expected) <= tolerance)


def assert_shape(actual, expected, key=None):
    """Assert that ``actual`` and ``expected`` have the same data shape.

    Arrays are compared by their shape when `expected` is a tuple of ints
    prefixed with ``"shape"``, e.g. ``("shape", 4, 1, 16, 16)``; otherwise
    mappings, sequences and floats are compared as structured data.
    """

    suffix = ""

    if key is not None:
        suffix = (
            " for parent "
            + ("index" if isinstance(key, int) else "key")
            + f" {key!r}"
        )

    if isinstance(actual, Tensor):
        actual = actual.data
    if isinstance(actual, np.ndarray):
        array = actual
        if isinstance(expected, tuple) and expected[:1] == ("shape",):
            assert array.shape == expected[1:], (
                f"expected shape {expected[1:]}, got {array.shape}" + suffix
            )
            return
        actual = array.tolist()

    if isinstance(expected, Predicate):
        assert actual == expected, f"{actual!r} fails the predicate" + suffix
    elif isinstance(expected, Mapping):
        assert isinstance(actual, Mapping)
        # Unlike all the others, this checks that the actual items are a
        # superset of the expected items, rather than that they match.
        for key, value in expected.items():
            if value is not UNDEFINED:
                assert key in actual, (
                    f"expected key {key!r} not found in: {actual!r}" + suffix
                )

                assert_shape(actual[key], value, key=key)
            else:
                assert key not in actual, (
                    f"unexpected key {key!r} found in: {actual!r}" + suffix
                )
    elif isinstance(expected, (str, bytes)):
        assert expected == actual
    elif isinstance(expected, Sequence):
        assert isinstance(actual, Sequence), (
            f"{actual!r} is not a Sequence" + suffix
        )

        actual_len = len(actual)
        expected_len = len(expected)

        assert actual_len == expected_len, (
            "expected sequences to be the same length but "
            + (
                f"the actual value has {actual_len - expected_len} more items"
                if actual_len > expected_len
                else f"the actual value has {expected_len - actual_len} "
                "fewer items"
            )
            + suffix
        )
        for idx, (actual_item, expected_item) in enumerate(
            zip(actual, expected)
        ):
            assert_shape(actual_item, expected_item, key=idx)
    elif isinstance(expected, float):
        assert (
            abs(actual - expected) < 1e-6
        ), "float not within the allowed tolerance of 1e-6" + suffix
    else:
        assert expected == actual, (
            f"{actual!r} is not equal to {expected!r}" + suffix
        )


def Shape(expected):
    def predicate(actual):
        assert_shape(actual, expected)
        return True

    return Predicate(predicate)


def assert_error(excinfo, expected_exit_code, expected_errors=UNDEFINED):
    """Assert on a :py:class:`VxError` caught by ``pytest.raises``.

    Like :py:func:`assert_shape`, the check ignores extra keys in each error
    dict.
    """
    error = getattr(excinfo, "value", excinfo)
    assert isinstance(error, VxError), f"{error!r} is not a VxError"
    assert error.exit_code == expected_exit_code, (
        f"expected exit code {expected_exit_code!r}, "
        f"got {error.exit_code!r}"
    )

    if expected_errors is not UNDEFINED:
        assert_shape(error.errors, expected_errors)

    return error.errors


# -----------------------------------------------------------------------------


def _scalar(fn, params):
    return as_tensor(fn(params)).item()


def _evaluate(fn, params, kink):
    """The scalar ``fn(params)``, plus its kink arguments if `kink` is set."""
    if kink is None:
        return _scalar(fn, params), None

    with Tape() as tape:
        tape.watch(params)
        value = _scalar(fn, params)
    return value, [r.saved["kink"] for r in tape.records if "kink" in r.saved]


def _crosses_kink(lower, upper, kink):
    """Whether a near-zero kink argument changed side between two passes."""
    return any(
        (
            (np.minimum(np.abs(a), np.abs(b)) < kink) & ((a >= 0) != (b >= 0))
        ).any()
        for a, b in zip(lower, upper)
    )


def _entries(shape, max_entries, rng):
    count = int(np.prod(shape))
    if max_entries is None or count <= max_entries:
        return list(np.ndindex(*shape))
    flat = rng.choice(count, size=max_entries, replace=False)
    return [np.unravel_index(i, shape) for i in np.sort(flat)]


def numeric_gradient(
    fn,
    params,
    name,
    step=DEFAULT_STEP,
    max_entries=None,
    seed=0,
    kink=None,
):
    """Estimate the gradient of ``fn(params)`` with central differences.

    :param fn: Maps a :py:class:`~vxadapt.params.ParameterSet` to a scalar.
    :param str name: The parameter to perturb.
    :param int max_entries: Perturb at most this many entries, chosen at
        random; the others are left as ``nan``.
    :param float kink: If set, entries are left as ``nan`` when the two
        perturbed passes put a leaky relu input, absolute value argument
        or L1 difference lying within this distance of zero on opposite
        sides of zero.
    :return: An array shaped like the parameter.
    """
    base = params[name]
    grad = np.full(base.shape, np.nan)
    rng = np.random.default_rng(seed)

    for index in _entries(base.shape, max_entries, rng):
        shifted = base.copy()
        shifted[index] += step
        upper, upper_kinks = _evaluate(
            fn, params.replace({name: shifted}), kink
        )
        shifted[index] -= 2 * step
        lower, lower_kinks = _evaluate(
            fn, params.replace({name: shifted}), kink
        )
        if kink is not None and _crosses_kink(lower_kinks, upper_kinks, kink):
            continue
        grad[index] = (upper - lower) / (2 * step)
    return grad


def analytic_gradient(fn, params):
    """Reverse-mode gradients of ``fn(params)`` for every trainable name."""
    with Tape() as tape:
        tape.watch(params)
        loss = fn(params)
    return backward(tape, loss, params)


def assert_gradients_match(
    fn,
    params,
    names=None,
    step=DEFAULT_STEP,
    rtol=DEFAULT_RTOL,
    atol=DEFAULT_ATOL,
    max_entries=None,
    seed=0,
    kink=DEFAULT_KINK,
):
    """Assert reverse-mode gradients agree with central differences.

    An entry passes if its absolute difference is at most `atol`, or its
    difference relative to the larger magnitude is at most `rtol`. Entries
    whose differences straddle a kink are skipped; pass ``kink=None`` to
    check them all.
    """
    analytic = analytic_gradient(fn, params)
    for name in names or params.trainable_names:
        numeric = numeric_gradient(
            fn, params, name, step, max_entries, seed, kink
        )
        checked = ~np.isnan(numeric)
        a = analytic[name][checked]
        n = numeric[checked]

        error = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        bad = (error > atol) & (error > rtol * scale)
        assert not bad.any(), (
            f"gradient of {name} differs at {int(bad.sum())} of {a.size} "
            f"entries; worst relative error "
            f"{float(np.max(error[bad] / scale[bad])):.3g}"
        )
