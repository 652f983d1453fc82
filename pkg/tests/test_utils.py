import copy

import numpy as np

from vxadapt.utils import (
    UNDEFINED,
    array_digest,
    if_none,
    iter_validation_errors,
)

# -----------------------------------------------------------------------------


def test_undefined():
    assert bool(UNDEFINED) is False
    assert copy.copy(UNDEFINED) is UNDEFINED
    d = {"foo": UNDEFINED}
    d_deepcopy = copy.deepcopy(d)
    assert d["foo"] is d_deepcopy["foo"]


def test_if_none():
    assert if_none(None, 3) == 3
    assert if_none(0, 3) == 0


def test_iter_validation_errors():
    errors = {"a": ["bad"], "b": {"c": ["worse", "worst"]}}

    assert list(iter_validation_errors(errors)) == [
        ("bad", ("a",)),
        ("worse", ("b", "c")),
        ("worst", ("b", "c")),
    ]


def test_array_digest():
    a = np.arange(4.0)

    assert array_digest([a]) == array_digest([a.copy()])
    assert array_digest([a]) != array_digest([a.reshape(2, 2)])
    assert array_digest([a, a[:1]]) != array_digest([a[:1], a])
    assert array_digest([a]) != array_digest([a + 1e-12])
