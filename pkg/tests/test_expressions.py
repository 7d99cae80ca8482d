"""Tests for the expression grammar."""

import numpy as np
import pytest

from src.expressions import (
    parse_expression,
    space_function,
    tabulated_function,
    time_function,
)


class TestExpressions:
    """Test parsing and compilation of data expressions."""

    def test_time_function(self):
        """Time expressions evaluate to floats."""
        f = time_function("1 - cos(t)")
        assert f(0.0) == pytest.approx(0.0)
        assert f(np.pi) == pytest.approx(2.0)

    def test_space_function_vectorized(self):
        """Space expressions broadcast over arrays."""
        f = space_function("x*(1 - x)")
        x = np.array([0.0, 0.5, 1.0])
        np.testing.assert_allclose(f(x), [0.0, 0.25, 0.0])

    def test_constant_broadcasts(self):
        """Constant expressions keep the input shape."""
        f = space_function("2")
        assert f(np.zeros((3, 4))).shape == (3, 4)
        np.testing.assert_array_equal(f(np.zeros(3)), [2.0, 2.0, 2.0])

    def test_pi_and_exp(self):
        """pi and exp are part of the grammar."""
        f = time_function("exp(-t)*sin(pi*t)")
        assert f(0.5) == pytest.approx(np.exp(-0.5))

    def test_unknown_symbol_rejected(self):
        """Only the declared variable may appear."""
        with pytest.raises(ValueError, match="unknown names"):
            parse_expression("x + t", ("t",))

    def test_unknown_function_rejected(self):
        """Functions outside the grammar are rejected."""
        with pytest.raises(ValueError):
            parse_expression("tan(t)", ("t",))

    def test_syntax_error(self):
        """Malformed text raises ValueError."""
        with pytest.raises(ValueError, match="Cannot parse"):
            parse_expression("1 +* t", ("t",))


class TestTabulatedFunction:
    """Test piecewise-linear time series."""

    def test_interpolation(self):
        """Values between samples are interpolated linearly."""
        f = tabulated_function([0.0, 1.0, 2.0], [0.0, 2.0, 0.0])
        assert f(0.5) == pytest.approx(1.0)
        assert f(1.5) == pytest.approx(1.0)

    def test_holds_end_values(self):
        """Outside the table the end values are held."""
        f = tabulated_function([0.0, 1.0], [1.0, 3.0])
        assert f(5.0) == pytest.approx(3.0)

    def test_rejects_unsorted_times(self):
        """Times must increase strictly."""
        with pytest.raises(ValueError, match="strictly increasing"):
            tabulated_function([0.0, 0.0], [1.0, 2.0])

    def test_rejects_mismatched_lengths(self):
        """Times and values must pair up."""
        with pytest.raises(ValueError):
            tabulated_function([0.0, 1.0, 2.0], [1.0, 2.0])
