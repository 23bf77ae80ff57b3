"""Tests for the stats module."""

import numpy as np
import pytest

from chaoscope.stats import bootstrap_ci, iqm


class TestIQM:
    """Tests for the interquartile mean."""

    def test_even_count(self) -> None:
        """Test that the IQM of 1..8 is the mean of 3..6."""
        assert iqm(range(1, 9)) == pytest.approx(4.5)

    def test_fractional_trimming(self) -> None:
        """Test that ranks straddling a quartile count fractionally."""
        assert iqm([1.0, 2.0, 3.0, 4.0, 100.0]) == pytest.approx((0.75 * 2 + 3 + 0.75 * 4) / 2.5)

    def test_order_invariant(self, rng: np.random.Generator) -> None:
        """Test that shuffling does not change the IQM."""
        x = rng.standard_normal(37)
        assert iqm(x) == pytest.approx(iqm(rng.permutation(x)))

    def test_translation_equivariant(self, rng: np.random.Generator) -> None:
        """Test that shifting every value by c shifts the IQM by c."""
        x = rng.standard_normal(41)
        for c in (-3.5, 0.25, 1e3):
            assert iqm(x + c) == pytest.approx(iqm(x) + c, abs=1e-9)

    def test_scale_equivariant(self, rng: np.random.Generator) -> None:
        """Test that scaling by a positive factor scales the IQM."""
        x = rng.standard_normal(30)
        assert iqm(2.5 * x) == pytest.approx(2.5 * iqm(x))

    def test_single_value(self) -> None:
        """Test that one value is its own IQM."""
        assert iqm([2.5]) == pytest.approx(2.5)

    def test_empty_rejected(self) -> None:
        """Test that an empty sequence raises ValueError."""
        with pytest.raises(ValueError, match="empty"):
            iqm([])


class TestBootstrapCI:
    """Tests for the percentile bootstrap."""

    def test_constant_values_give_zero_width(self) -> None:
        """Test that identical values give a degenerate interval."""
        assert bootstrap_ci([3.0] * 10) == pytest.approx((3.0, 3.0))

    def test_deterministic_for_seed(self, rng: np.random.Generator) -> None:
        """Test that equal seeds give equal intervals."""
        x = rng.standard_normal(20)
        assert bootstrap_ci(x, seed=4) == bootstrap_ci(x, seed=4)

    def test_interval_contains_iqm(self, rng: np.random.Generator) -> None:
        """Test that a typical interval brackets the point estimate."""
        x = rng.standard_normal(200)
        low, high = bootstrap_ci(x)
        assert low <= iqm(x) <= high

    def test_wider_level_is_wider(self, rng: np.random.Generator) -> None:
        """Test that a higher coverage level gives a wider interval."""
        x = rng.standard_normal(50)
        narrow = bootstrap_ci(x, level=0.5)
        wide = bootstrap_ci(x, level=0.99)
        assert wide[0] <= narrow[0]
        assert wide[1] >= narrow[1]

    def test_width_shrinks_with_sample_size(self, rng: np.random.Generator) -> None:
        """Test that quadrupling the sample size roughly halves the interval width."""

        def mean_width(n: int) -> float:
            widths = []
            for k in range(8):
                low, high = bootstrap_ci(rng.standard_normal(n), resamples=1000, seed=k)
                widths.append(high - low)
            return float(np.mean(widths))

        assert mean_width(100) / mean_width(400) == pytest.approx(2.0, rel=0.25)

    def test_needs_two_values(self) -> None:
        """Test that fewer than two values raise ValueError."""
        with pytest.raises(ValueError, match="at least 2"):
            bootstrap_ci([1.0])

    @pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
    def test_level_range(self, level: float) -> None:
        """Test that the level must lie strictly between 0 and 1."""
        with pytest.raises(ValueError, match="level"):
            bootstrap_ci([1.0, 2.0], level=level)
