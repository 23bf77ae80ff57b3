"""Tests for the lyapunov module."""

import math
import time

import numpy as np
import pytest

from chaoscope.config import SpectrumConfig
from chaoscope.dynsys import HenonMap, LinearContraction, LogisticMap, Lorenz, Pointmass
from chaoscope.errors import DegenerateBasisError, NumericalError
from chaoscope.lyapunov import (
    StabilityClass,
    benettin_spectrum,
    classify,
    derive_seeds,
    divergence_curve,
    gram_schmidt,
    reward_mle,
    reward_mle_samples,
    running_exponents,
    spectrum_over_samples,
    tangent_spectrum,
)
from chaoscope.policy import constant_policy, mlp_policy, no_action_policy
from chaoscope.runconfig import load_config, resolve_policy


class TestClassify:
    """Tests for stability classification."""

    def test_threshold_counts_as_stable(self) -> None:
        """Test that an MLE exactly at tau0 is Stable."""
        assert classify(0.005, 1.0, 0.005) is StabilityClass.STABLE

    def test_chaotic(self) -> None:
        """Test positive MLE with negative SLE."""
        assert classify(0.4, -1.2, 0.005) is StabilityClass.CHAOTIC

    def test_unstable(self) -> None:
        """Test positive MLE with non-negative SLE."""
        assert classify(0.4, 0.0, 0.005) is StabilityClass.UNSTABLE

    def test_values(self) -> None:
        """Test the string values used in reports."""
        assert [c.value for c in StabilityClass] == ["Stable", "Chaotic", "Unstable"]


class TestGramSchmidt:
    """Tests for the orthonormalization step."""

    def test_orthonormal_rows(self, rng: np.random.Generator) -> None:
        """Test that the output rows are orthonormal and norms are positive."""
        q, norms = gram_schmidt(rng.standard_normal((4, 4)))
        np.testing.assert_allclose(q @ q.T, np.eye(4), atol=1e-12)
        assert np.all(norms > 0)

    def test_norms_follow_triangular_factor(self) -> None:
        """Test the norms on a hand-checkable basis."""
        _, norms = gram_schmidt([[3.0, 0.0], [1.0, 2.0]])
        np.testing.assert_allclose(norms, [3.0, 2.0])

    def test_dependent_rows(self) -> None:
        """Test that linearly dependent rows raise DegenerateBasisError."""
        with pytest.raises(DegenerateBasisError, match="degenerate perturbation set"):
            gram_schmidt([[1.0, 0.0], [2.0, 0.0]])


class TestBenettin:
    """Tests for the companion-trajectory estimator."""

    def test_henon(self, henon: HenonMap) -> None:
        """Test the classic Hénon exponents."""
        cfg = SpectrumConfig.from_windows(10000, 1, samples=5, epsilon=1e-8)
        result = spectrum_over_samples(henon, no_action_policy(2, 1), cfg, seed=0)
        assert result.mle == pytest.approx(0.419, abs=0.02)
        assert result.sle == pytest.approx(math.log(0.3), abs=0.02)
        assert result.stability(cfg.tau0) is StabilityClass.CHAOTIC

    def test_logistic_full_growth(self, logistic: LogisticMap) -> None:
        """Test that the logistic map at rate 4 has MLE ln 2."""
        cfg = SpectrumConfig.from_windows(2000, 10, samples=5, epsilon=1e-8)
        result = spectrum_over_samples(logistic, constant_policy(1, [4.0]), cfg, seed=0)
        assert result.mle == pytest.approx(math.log(2.0), abs=0.03)

    def test_contraction(self, contraction: LinearContraction) -> None:
        """Test that a linear contraction has exponent ln(rate) and is Stable."""
        cfg = SpectrumConfig.from_windows(30, 10, samples=1, epsilon=1e-8)
        spectrum = benettin_spectrum(contraction, no_action_policy(1, 1), [0.5], cfg)
        assert spectrum.mle == pytest.approx(math.log(0.9), abs=1e-6)
        assert spectrum.stability(cfg.tau0) is StabilityClass.STABLE

    def test_frictionless_pointmass_is_neutral(self, frictionless: Pointmass) -> None:
        """Test that an undamped point mass has a zero spectrum."""
        cfg = SpectrumConfig.from_windows(100, 10, samples=1)
        spectrum = benettin_spectrum(frictionless, no_action_policy(4, 2), [0.1, 0.0, 0.0, 0.0], cfg)
        np.testing.assert_allclose(spectrum.exponents, np.zeros(4), atol=1e-6)
        assert spectrum.stability(cfg.tau0) is StabilityClass.STABLE

    def test_exponents_sorted_and_flow_units(self, frictionless: Pointmass) -> None:
        """Test descending order and that flow exponents are divided by dt."""
        damped = frictionless.model_copy(update={"damping": 1.0})
        cfg = SpectrumConfig.from_windows(50, 10, samples=1)
        spectrum = benettin_spectrum(damped, no_action_policy(4, 2), np.zeros(4), cfg)
        assert list(spectrum.exponents) == sorted(spectrum.exponents, reverse=True)
        assert spectrum.dt == 0.02
        assert spectrum.exponents[-1] == pytest.approx(-1.0, abs=0.05)

    def test_period_robustness(self, henon: HenonMap) -> None:
        """Test that periods 1 and 5 agree on the Hénon SLE."""
        s0 = [0.05, 0.0]
        one = benettin_spectrum(henon, no_action_policy(2, 1), s0, SpectrumConfig.from_windows(3000, 1, epsilon=1e-8))
        five = benettin_spectrum(henon, no_action_policy(2, 1), s0, SpectrumConfig.from_windows(600, 5, epsilon=1e-8))
        assert one.sle == pytest.approx(five.sle, abs=0.01)
        assert one.mle == pytest.approx(five.mle, abs=0.05)

    def test_epsilon_robustness(self, henon: HenonMap) -> None:
        """Test that perturbation sizes 1e-6 and 1e-9 agree at period 1."""
        s0 = [0.05, 0.0]
        runs = [
            benettin_spectrum(henon, no_action_policy(2, 1), s0, SpectrumConfig.from_windows(3000, 1, epsilon=eps))
            for eps in (1e-6, 1e-9)
        ]
        np.testing.assert_allclose(runs[0].exponents, runs[1].exponents, atol=0.01)

    def test_running_exponents_end_at_estimate(self, henon: HenonMap) -> None:
        """Test that the last running estimate equals the final spectrum."""
        cfg = SpectrumConfig.from_windows(200, 1, epsilon=1e-8)
        spectrum = benettin_spectrum(henon, no_action_policy(2, 1), [0.05, 0.0], cfg)
        running = running_exponents(spectrum)
        assert running.shape == (200, 2)
        np.testing.assert_allclose(running[-1], spectrum.exponents)

    def test_recurrent_policy_extends_spectrum(self, henon: HenonMap) -> None:
        """Test that a recurrent policy adds one exponent per hidden unit."""
        policy = mlp_policy(2, 1, (4,), action_low=[-1], action_high=[1], hidden_dim=2, seed=1)
        spectrum = benettin_spectrum(henon, policy, [0.05, 0.0], SpectrumConfig.from_windows(20, 5))
        assert spectrum.exponents.shape == (4,)

    @pytest.mark.slow
    def test_logistic_preset_runtime(self) -> None:
        """Test that the logistic preset estimates ln 2 over 10^5 steps within five seconds."""
        run = load_config(preset="logistic")
        policy = resolve_policy(run.policy, run.system)
        start = time.perf_counter()
        result = spectrum_over_samples(run.system, policy, run.spectrum, run.seed)
        elapsed = time.perf_counter() - start
        assert run.spectrum.timesteps == 100_000
        assert result.mle == pytest.approx(math.log(2.0), abs=0.01)
        assert elapsed < 5.0

    @pytest.mark.slow
    def test_lorenz(self, lorenz: Lorenz) -> None:
        """Test the Lorenz exponents in units of inverse time."""
        cfg = SpectrumConfig.from_windows(10000, 10, samples=3, transient=1000)
        result = spectrum_over_samples(lorenz, no_action_policy(3, 1), cfg, seed=0)
        assert result.mle == pytest.approx(0.906, abs=0.1)
        assert result.sle == pytest.approx(-(10.0 + 1.0 + 8.0 / 3.0), abs=0.1)


class TestTangentOracle:
    """Tests comparing the companion estimator with the Jacobian-product estimator."""

    def test_agree_on_henon(self, henon: HenonMap) -> None:
        """Test that both estimators agree along the same trajectory."""
        cfg = SpectrumConfig.from_windows(500, 1, epsilon=1e-9)
        s0 = [0.05, 0.0]
        companion = benettin_spectrum(henon, no_action_policy(2, 1), s0, cfg)
        tangent = tangent_spectrum(henon, no_action_policy(2, 1), s0, cfg)
        np.testing.assert_allclose(companion.exponents, tangent.exponents, atol=1e-4)

    def test_agree_on_controlled_pointmass(self, frictionless: Pointmass) -> None:
        """Test agreement for a smooth feedback policy on a flow."""
        policy = mlp_policy(4, 2, (8,), action_low=[-1, -1], action_high=[1, 1], output_scale=1.0, seed=2)
        cfg = SpectrumConfig.from_windows(50, 10, epsilon=1e-7)
        s0 = [0.1, -0.1, 0.0, 0.0]
        companion = benettin_spectrum(frictionless, policy, s0, cfg)
        tangent = tangent_spectrum(frictionless, policy, s0, cfg)
        np.testing.assert_allclose(companion.exponents, tangent.exponents, atol=1e-3)


class TestSpectrumOverSamples:
    """Tests for multi-sample aggregation."""

    def test_workers_do_not_change_results(self, henon: HenonMap) -> None:
        """Test that thread count leaves every number unchanged."""
        cfg = SpectrumConfig.from_windows(100, 1, samples=4, epsilon=1e-8)
        serial = spectrum_over_samples(henon, no_action_policy(2, 1), cfg, seed=3)
        threaded = spectrum_over_samples(henon, no_action_policy(2, 1), cfg, seed=3, workers=3)
        np.testing.assert_array_equal(serial.exponents, threaded.exponents)
        assert serial.mle_ci == threaded.mle_ci
        assert serial.seeds == threaded.seeds

    def test_single_sample_has_no_interval(self, contraction: LinearContraction) -> None:
        """Test that the interval is None with one sample."""
        cfg = SpectrumConfig.from_windows(10, 10, samples=1)
        result = spectrum_over_samples(contraction, no_action_policy(1, 1), cfg)
        assert result.mle_ci is None
        assert result.to_dict()["mle_ci"] is None

    def test_diverging_sample_excluded(self, contraction: LinearContraction, caplog: pytest.LogCaptureFixture) -> None:
        """Test that a diverging sample is dropped with a warning."""
        cfg = SpectrumConfig.from_windows(10, 10, samples=3)
        with caplog.at_level("WARNING"):
            result = spectrum_over_samples(
                contraction,
                no_action_policy(1, 1),
                cfg,
                seeds=[1, 2, 3],
                initial_states=[[0.5], [math.inf], [0.3]],
            )
        assert result.seeds == [1, 3]
        assert result.excluded[0][0] == 2
        assert "Excluding sample with seed 2" in caplog.text

    def test_all_samples_failing(self, contraction: LinearContraction) -> None:
        """Test that NumericalError is raised when nothing survives."""
        cfg = SpectrumConfig.from_windows(10, 10, samples=1)
        with pytest.raises(NumericalError, match="all 1 samples failed"):
            spectrum_over_samples(contraction, no_action_policy(1, 1), cfg, seeds=[0], initial_states=[[math.inf]])

    def test_derived_seeds(self) -> None:
        """Test that derived seeds are stable and distinct."""
        seeds = derive_seeds(7, 5)
        assert seeds == derive_seeds(7, 5)
        assert derive_seeds(7, 3) == seeds[:3]
        assert len(set(seeds)) == 5


class TestRewardMLE:
    """Tests for the reward-space exponent."""

    def test_contraction_is_negative(self, contraction: LinearContraction) -> None:
        """Test that a contraction shrinks reward gaps at rate ln(rate)."""
        cfg = SpectrumConfig.from_windows(20, 10)
        value = reward_mle(contraction, no_action_policy(1, 1), [0.5], cfg)
        assert value == pytest.approx(math.log(0.9), abs=1e-3)

    def test_chaotic_logistic_is_positive(self, logistic: LogisticMap) -> None:
        """Test that a chaotic logistic map spreads rewards apart."""
        cfg = SpectrumConfig.from_windows(10, 10, samples=10, epsilon=1e-8)
        samples = reward_mle_samples(logistic, constant_policy(1, [4.0]), cfg, seed=1)
        assert samples.mean > 0.2
        assert reward_mle(logistic, constant_policy(1, [4.0]), None, cfg, seed=1) == samples.mean

    def test_fixed_start_averages_twins(self, henon: HenonMap) -> None:
        """Test that a given start state is shared by every sample while twin directions vary."""
        cfg = SpectrumConfig.from_windows(10, 10, samples=3, epsilon=1e-8)
        s0 = [0.05, 0.0]
        samples = reward_mle_samples(henon, no_action_policy(2, 1), cfg, seed=2, s0=s0)
        assert samples.seeds == derive_seeds(2, 3)
        assert len(set(samples.values)) > 1
        assert reward_mle(henon, no_action_policy(2, 1), s0, cfg, seed=2) == pytest.approx(samples.mean)

    def test_constant_reward_not_measurable(self, caplog: pytest.LogCaptureFixture) -> None:
        """Test that a constant reward gives -inf with a warning."""
        cfg = SpectrumConfig.from_windows(10, 10)
        with caplog.at_level("WARNING"):
            value = reward_mle(HenonMap(reward="constant"), no_action_policy(2, 1), [0.05, 0.0], cfg)
        assert value == -math.inf
        assert "no measurable divergence" in caplog.text


class TestDivergenceCurve:
    """Tests for twin-trajectory gaps."""

    def test_zero_epsilon_is_flat(self, henon: HenonMap) -> None:
        """Test that identical twins never separate."""
        curve = divergence_curve(henon, no_action_policy(2, 1), [0.05, 0.0], 0.0, 50)
        assert np.all(curve.state_gap == 0.0)
        assert np.all(curve.reward_gap == 0.0)
        assert math.isnan(curve.log_slope(1e-3))

    def test_contraction_slope(self, contraction: LinearContraction) -> None:
        """Test that the fitted slope of a contraction is ln(rate)."""
        curve = divergence_curve(contraction, no_action_policy(1, 1), [0.5], 1e-4, 100)
        assert curve.steps == 100
        assert len(curve.state_gap) == 101
        assert curve.log_slope(1.0) == pytest.approx(math.log(0.9), abs=1e-6)

    def test_negative_epsilon_rejected(self, henon: HenonMap) -> None:
        """Test that a negative epsilon raises ValueError."""
        with pytest.raises(ValueError, match="epsilon"):
            divergence_curve(henon, no_action_policy(2, 1), [0.0, 0.0], -1.0, 5)
