import numpy as np
import pytest

from isda_lab.errors import DomainError, NumericError
from isda_lab.guardrails import (
    as_float_array,
    require_finite,
    require_labels,
    require_non_negative,
    require_probability_rows,
    require_shape,
    require_symmetric,
)


def test_as_float_array_checks_ndim():
    assert as_float_array([1, 2], "x", ndim=1).dtype == np.float64
    with pytest.raises(DomainError):
        as_float_array([[1.0]], "x", ndim=1)


def test_require_finite_reports_row():
    X = np.zeros((4, 2))
    X[2, 1] = np.nan
    with pytest.raises(NumericError) as info:
        require_finite(X, "features")
    assert info.value.index == 2


def test_require_shape_wildcards():
    require_shape(np.zeros((3, 5)), (None, 5), "x")
    with pytest.raises(DomainError):
        require_shape(np.zeros((3, 5)), (3, 4), "x")


def test_require_symmetric_is_relative():
    require_symmetric(np.array([[1e6, 1.0], [1.0 + 1e-4, 1e6]]), "S")
    with pytest.raises(DomainError):
        require_symmetric(np.array([[1.0, 0.0], [0.1, 1.0]]), "S")
    with pytest.raises(DomainError):
        require_symmetric(np.zeros((2, 3)), "S")


def test_require_labels():
    np.testing.assert_array_equal(require_labels([0.0, 2.0], 3), [0, 2])
    for bad in ([3], [-1], [0.5], [[0]]):
        with pytest.raises(DomainError):
            require_labels(bad, 3)


def test_require_probability_rows():
    require_probability_rows(np.array([[0.25, 0.75]]))
    for bad in ([[0.5, 0.6]], [[-0.1, 1.1]], [0.5, 0.5]):
        with pytest.raises(DomainError):
            require_probability_rows(np.array(bad))


def test_require_non_negative():
    assert require_non_negative(0, "lam") == 0.0
    for bad in (-1e-9, float("nan"), float("inf")):
        with pytest.raises(DomainError):
            require_non_negative(bad, "lam")
