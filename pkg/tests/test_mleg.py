"""Tests for the mleg module."""

import math
import statistics

import numpy as np
import pytest

from chaoscope import autodiff as ad
from chaoscope import mleg
from chaoscope.config import SpectrumConfig, TrainerConfig
from chaoscope.dynsys import LogisticControl, Pointmass
from chaoscope.errors import NonFiniteLossError, NumericalError, PolicyError
from chaoscope.lyapunov import benettin_spectrum
from chaoscope.mleg import (
    ReturnScale,
    TrajectoryBundle,
    imagine_bundle,
    initial_value,
    lambda_returns,
    mle_reg_loss,
    policy_loss,
    total_loss,
    train,
    value_estimates,
    value_loss,
)
from chaoscope.policy import PolicyParams, act_mean, linear_policy, mlp_policy
from chaoscope.policy import entropy as policy_entropy


def _actor(init_log_std: float = -1.0, output_scale: float = 1.0, init_action: float = 3.5) -> PolicyParams:
    return mlp_policy(
        1,
        1,
        (4,),
        action_low=[0.0],
        action_high=[4.0],
        init_log_std=init_log_std,
        init_action=[init_action],
        output_scale=output_scale,
        seed=0,
    )


def _small_config(**overrides: object) -> TrainerConfig:
    values: dict[str, object] = {
        "updates": 3,
        "batch": 2,
        "horizon": 3,
        "members": 2,
        "hidden_sizes": [4],
        "mle_every": 2,
        "init_action": [3.5],
        "spectrum": SpectrumConfig.from_windows(5, 2, samples=1),
    }
    values.update(overrides)
    return TrainerConfig.model_validate(values)


def _hand_bundle(rows: list[list[float]], members: int) -> TrajectoryBundle:
    start = np.zeros((len(rows[0]), 1))
    states = [start, *(np.array(r, dtype=float)[:, None] for r in rows)]
    count = len(rows)
    return TrajectoryBundle(
        states=states,
        hidden=[np.zeros((len(start), 0))] * (count + 1),
        actions=[np.zeros((len(start), 1))] * count,
        raw_actions=[np.zeros((len(start), 1))] * count,
        rewards=np.zeros((count, len(start))),
        log_probs=[np.zeros(len(start))] * count,
        entropies=[0.0] * count,
        members=members,
        batch=len(start) // members,
    )


class TestImagineBundle:
    """Tests for imagined rollout bundles."""

    def test_shapes_and_row_order(self, logistic_control: LogisticControl) -> None:
        """Test that rows are ordered b * L + l and share their start state."""
        s0 = np.array([[0.3], [0.6]])
        bundle = imagine_bundle(logistic_control, _actor(), s0, None, 4, 3, seed=1)
        assert bundle.horizon == 4
        assert len(bundle.states) == 5
        assert bundle.states[0].shape == (6, 1)
        assert bundle.rewards.shape == (4, 6)
        np.testing.assert_array_equal(bundle.states[0][:3], 0.3)
        np.testing.assert_array_equal(bundle.states[0][3:], 0.6)
        assert len(set(bundle.member_seeds)) == 3

    def test_deterministic_policy_rejected(self, logistic_control: LogisticControl) -> None:
        """Test that a deterministic policy cannot form a bundle."""
        with pytest.raises(PolicyError, match="stochastic policy"):
            imagine_bundle(logistic_control, linear_policy([[1.0]], [3.0]), [0.3], None, 3, 2)

    def test_single_member_rejected(self, logistic_control: LogisticControl) -> None:
        """Test that a bundle needs two members."""
        with pytest.raises(ValueError, match="at least 2 members"):
            imagine_bundle(logistic_control, _actor(), [0.3], None, 3, 1)

    def test_horizon_checked(self, logistic_control: LogisticControl) -> None:
        """Test that the horizon must be positive."""
        with pytest.raises(ValueError, match="horizon"):
            imagine_bundle(logistic_control, _actor(), [0.3], None, 0, 2)

    def test_near_deterministic_members_agree(self, frictionless: Pointmass) -> None:
        """Test that members stay close when the log-std is at its floor."""
        policy = mlp_policy(4, 2, (4,), action_low=[-1, -1], action_high=[1, 1], init_log_std=-5.0, seed=0)
        bundle = imagine_bundle(frictionless, policy, [0.1, 0.0, 0.0, 0.0], None, 10, 3)
        for s in bundle.states:
            assert np.all(np.ptp(s, axis=0) < 1e-2)

    def test_forced_equal_seeds_coincide(self, logistic_control: LogisticControl) -> None:
        """Test that identical member seeds give identical members and zero spread."""
        bundle = imagine_bundle(logistic_control, _actor(), [0.4], None, 5, 2, member_seeds=[7, 7])
        for s in bundle.states:
            assert s[0, 0] == s[1, 0]
        assert float(mle_reg_loss(bundle)) == 0.0

    def test_replay_from_recorded_seeds(self, logistic_control: LogisticControl) -> None:
        """Test that recorded member seeds reproduce the rewards exactly."""
        first = imagine_bundle(logistic_control, _actor(), [0.4], None, 6, 3, seed=11)
        again = imagine_bundle(logistic_control, _actor(), [0.4], None, 6, 3, member_seeds=first.member_seeds)
        np.testing.assert_array_equal(first.rewards, again.rewards)

    def test_recurrent_policy_records_hidden(self, logistic_control: LogisticControl) -> None:
        """Test that recurrent bundles carry hidden states that enter the regularizer."""
        policy = mlp_policy(1, 1, (4,), action_low=[0.0], action_high=[4.0], hidden_dim=2, output_scale=1.0, seed=1)
        bundle = imagine_bundle(logistic_control, policy, [0.4], None, 3, 2, seed=2)
        assert bundle.hidden[1].shape == (2, 2)
        states_only = sum(float(np.mean(np.var(s, axis=0))) for s in bundle.states[1:])
        assert float(mle_reg_loss(bundle)) > states_only


class TestMleRegLoss:
    """Tests for the bundle-variance regularizer."""

    def test_two_member_hand_example(self) -> None:
        """Test that states {0, 2} have population variance 1."""
        assert float(mle_reg_loss(_hand_bundle([[0.0, 2.0]], members=2))) == pytest.approx(1.0)

    def test_sums_over_steps(self) -> None:
        """Test that per-step variances are summed over the horizon."""
        bundle = _hand_bundle([[0.0, 2.0], [1.0, 1.0], [-1.0, 3.0]], members=2)
        assert float(mle_reg_loss(bundle)) == pytest.approx(1.0 + 0.0 + 4.0)

    def test_single_member_rejected(self) -> None:
        """Test that one member has no variance to compute."""
        with pytest.raises(ValueError, match="at least 2 members"):
            mle_reg_loss(_hand_bundle([[1.0]], members=1))

    def test_non_negative(self, logistic_control: LogisticControl) -> None:
        """Test that the regularizer is non-negative on sampled bundles."""
        for seed in range(5):
            bundle = imagine_bundle(logistic_control, _actor(), [[0.2], [0.7]], None, 5, 3, seed=seed)
            assert float(mle_reg_loss(bundle)) >= 0.0

    @pytest.mark.parametrize("horizon", [1, 3, 5])
    def test_gradient_matches_finite_differences(self, logistic_control: LogisticControl, horizon: int) -> None:
        """Test the pathwise gradient against central differences."""
        policy = _actor()
        s0 = np.array([[0.3], [0.6]])

        def loss(theta: ad.Var) -> ad.Var:
            return mle_reg_loss(imagine_bundle(logistic_control, policy, s0, None, horizon, 3, seed=2, theta=theta))

        result = ad.grad_check(loss, policy.theta, floor=1e-6)
        assert result.max_rel_error <= 1e-4

    def test_shrinking_std_shrinks_spread(self, logistic_control: LogisticControl) -> None:
        """Test that a smaller policy std gives a smaller regularizer near a stable fixed point."""
        s0 = np.linspace(0.3, 0.7, 4)[:, None]
        losses = [
            float(mle_reg_loss(imagine_bundle(logistic_control, _actor(math.log(std), 0.0, 2.5), s0, None, 10, 4, seed=5)))
            for std in (0.3, 0.1, 0.03)
        ]
        assert losses[0] > losses[1] > losses[2]

    def test_detached_matches_taped(self, logistic_control: LogisticControl) -> None:
        """Test that the detached value equals the taped one without recording nodes."""
        policy = _actor()
        tape = ad.Tape()
        theta = tape.variable(policy.theta)
        bundle = imagine_bundle(logistic_control, policy, [0.4], None, 4, 3, theta=theta)
        before = len(tape)
        detached = mle_reg_loss(bundle, detach=True)
        assert len(tape) == before
        assert float(detached) == pytest.approx(float(mle_reg_loss(bundle).value))


class TestLambdaReturns:
    """Tests for bootstrapped lambda-returns."""

    def test_hand_example(self) -> None:
        """Test the two-step example (5.5, 10, 10)."""
        out = lambda_returns([1.0, 1.0], [0.0, 0.0, 10.0], 0.9, 0.5)
        np.testing.assert_allclose(out, [5.5, 10.0, 10.0])

    def test_matches_unrolled_sum(self, rng: np.random.Generator) -> None:
        """Test the recursion against the explicit mixture of n-step returns."""
        r = rng.standard_normal(4)
        v = rng.standard_normal(5)
        gamma, lam = 0.9, 0.7
        horizon = len(r)

        def n_step(t: int, n: int) -> float:
            return sum(gamma**k * r[t + k] for k in range(n)) + gamma**n * v[t + n]

        expected = []
        for t in range(horizon):
            remaining = horizon - t
            mixed = sum((1 - lam) * lam ** (n - 1) * n_step(t, n) for n in range(1, remaining))
            expected.append(mixed + lam ** (remaining - 1) * n_step(t, remaining))
        np.testing.assert_allclose(lambda_returns(r, v, gamma, lam)[:-1], expected)

    def test_lambda_zero_is_td(self) -> None:
        """Test that lambda 0 gives one-step targets."""
        r = np.array([1.0, 2.0, 3.0])
        v = np.array([0.5, 1.5, 2.5, 3.5])
        np.testing.assert_allclose(lambda_returns(r, v, 0.9, 0.0)[:-1], r + 0.9 * v[1:])

    def test_lambda_one_is_monte_carlo(self) -> None:
        """Test that lambda 1 with a zero tail gives discounted returns."""
        r = np.array([1.0, 2.0, 3.0])
        out = lambda_returns(r, [9.0, 9.0, 9.0, 0.0], 0.5, 1.0)
        np.testing.assert_allclose(out[:-1], [1 + 0.5 * 2 + 0.25 * 3, 2 + 0.5 * 3, 3.0])

    def test_batched(self) -> None:
        """Test that trailing axes are independent columns."""
        r = np.array([[1.0, 0.0], [1.0, 0.0]])
        v = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0]])
        out = lambda_returns(r, v, 0.9, 0.5)
        np.testing.assert_allclose(out[:, 0], [5.5, 10.0, 10.0])
        np.testing.assert_allclose(out[:, 1], 0.0)

    def test_length_mismatch(self) -> None:
        """Test that values must have one more entry than rewards."""
        with pytest.raises(ValueError, match="T \\+ 1"):
            lambda_returns([1.0, 1.0], [0.0, 0.0], 0.9, 0.5)


class TestReturnScale:
    """Tests for the advantage normalizer."""

    def test_starts_at_zero(self) -> None:
        """Test the initial value and the floor of 1."""
        scale = ReturnScale()
        assert scale.value == 0.0
        assert scale.normalizer == 1.0

    def test_percentile_range_ema(self) -> None:
        """Test the moving average of the 5th-95th percentile range."""
        returns = np.arange(101.0)
        scale = ReturnScale(decay=0.5).update(returns)
        assert scale.value == pytest.approx(45.0)
        assert scale.normalizer == pytest.approx(45.0)
        assert scale.update(returns).value == pytest.approx(67.5)


class TestPolicyLoss:
    """Tests for the REINFORCE loss."""

    def test_zero_advantage_leaves_entropy(self, logistic_control: LogisticControl) -> None:
        """Test that zero advantages reduce the loss to minus eta times the entropy sum."""
        policy = _actor()
        bundle = imagine_bundle(logistic_control, policy, [0.4], None, 4, 2)
        values = np.ones((5, 2))
        loss = policy_loss(bundle, values, values, ReturnScale(), eta=0.1)
        assert float(loss) == pytest.approx(-0.1 * 4 * policy_entropy(policy))

    def test_unit_advantage_is_negative_log_prob(self, logistic_control: LogisticControl) -> None:
        """Test a single transition with advantage 1 and no entropy."""
        bundle = imagine_bundle(logistic_control, _actor(), [0.4], None, 1, 2)
        loss = policy_loss(bundle, np.zeros((2, 2)), np.ones((2, 2)), ReturnScale(), eta=0.0)
        assert float(loss) == pytest.approx(-float(np.mean(bundle.log_probs[0])))

    def test_no_gradient_through_values(self, logistic_control: LogisticControl) -> None:
        """Test that the advantage blocks gradient flow into critic parameters."""
        policy = _actor()
        value = initial_value(logistic_control, _small_config())
        tape = ad.Tape()
        theta = tape.variable(policy.theta)
        phi = tape.variable(value.theta)
        bundle = imagine_bundle(logistic_control, policy, [0.4], None, 3, 2, theta=theta)
        values = [ad.reshape(act_mean(value, ad.stop_gradient(s), theta=phi).mean, (2,)) for s in bundle.states]
        returns = np.full((4, 2), 3.0)
        loss = policy_loss(bundle, values, returns, ReturnScale(), eta=0.0)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads.wrt(phi), np.zeros_like(value.theta))
        assert np.any(grads.wrt(theta) != 0.0)
        shifted = policy_loss(bundle, [ad.value_of(v) + 1.0 for v in values], returns, ReturnScale(), eta=0.0)
        assert float(ad.value_of(shifted)) != pytest.approx(float(loss.value))


class TestTotalLoss:
    """Tests for combining the policy loss with the regularizer."""

    def test_beta_zero_is_policy_loss(self) -> None:
        """Test that beta 0 returns the policy loss node itself."""
        tape = ad.Tape()
        pl = tape.variable(1.0)
        reg = tape.variable(2.0)
        assert total_loss(pl, reg, 0.0) is pl
        assert total_loss(pl, None, 1.0) is pl

    def test_gradient_linear_in_beta(self, logistic_control: LogisticControl) -> None:
        """Test that gradients at beta 0, 1 and 2 are equally spaced."""
        policy = _actor()
        grads = []
        for beta in (0.0, 1.0, 2.0):
            tape = ad.Tape()
            theta = tape.variable(policy.theta)
            bundle = imagine_bundle(logistic_control, policy, [0.4], None, 3, 2, theta=theta)
            values = np.zeros((4, 2))
            returns = lambda_returns(bundle.rewards, values, 0.99, 0.95)
            pl = policy_loss(bundle, values, returns, ReturnScale(), eta=3e-4)
            grads.append(tape.backward(total_loss(pl, mle_reg_loss(bundle), beta)).wrt(theta))
        np.testing.assert_allclose(grads[2] - grads[1], grads[1] - grads[0], atol=1e-10)


class TestValueLoss:
    """Tests for the critic regression loss."""

    def test_gradient_matches_finite_differences(self, logistic_control: LogisticControl) -> None:
        """Test the critic gradient against central differences."""
        bundle = imagine_bundle(logistic_control, _actor(), [[0.2], [0.7]], None, 3, 2)
        value = initial_value(logistic_control, _small_config())
        returns = lambda_returns(bundle.rewards, value_estimates(value, bundle), 0.99, 0.95)

        def loss(phi: ad.Var) -> ad.Var:
            return value_loss(value, bundle, returns, theta=phi)

        assert ad.grad_check(loss, value.theta, floor=1e-6).max_rel_error <= 1e-4

    def test_estimates_shape(self, logistic_control: LogisticControl) -> None:
        """Test that value estimates cover every state of every row."""
        bundle = imagine_bundle(logistic_control, _actor(), [[0.2], [0.7]], None, 3, 2)
        assert value_estimates(initial_value(logistic_control, _small_config()), bundle).shape == (4, 4)


class TestTrain:
    """Tests for the training loop."""

    def test_history(self, logistic_control: LogisticControl) -> None:
        """Test history length, logged MLEs and the update callback."""
        seen: list[int] = []
        result = train(logistic_control, _small_config(), on_update=lambda rec: seen.append(rec.update))
        assert [rec.update for rec in result.history] == [1, 2, 3]
        assert seen == [1, 2, 3]
        assert result.history[0].mle is None
        assert result.history[1].mle is not None
        assert result.history[2].mle is not None
        assert all(rec.reg_loss >= 0.0 for rec in result.history)

    def test_reproducible(self, logistic_control: LogisticControl) -> None:
        """Test that equal configs give identical parameters and history."""
        a = train(logistic_control, _small_config())
        b = train(logistic_control, _small_config())
        np.testing.assert_array_equal(a.policy.theta, b.policy.theta)
        assert a.history == b.history

    def test_seed_changes_result(self, logistic_control: LogisticControl) -> None:
        """Test that a different seed gives a different policy."""
        a = train(logistic_control, _small_config())
        b = train(logistic_control, _small_config(seed=1))
        assert not np.array_equal(a.policy.theta, b.policy.theta)

    def test_beta_zero_equals_unregularized(self, logistic_control: LogisticControl) -> None:
        """Test that beta 0 and an unregularized run agree bit for bit."""
        a = train(logistic_control, _small_config(beta=0.0))
        b = train(logistic_control, _small_config(beta=1.0), regularized=False)
        np.testing.assert_array_equal(a.policy.theta, b.policy.theta)
        np.testing.assert_array_equal(a.value.theta, b.value.theta)
        assert a.history == b.history

    def test_regularizer_changes_updates(self, logistic_control: LogisticControl) -> None:
        """Test that the regularizer term actually moves the parameters."""
        a = train(logistic_control, _small_config(beta=0.0))
        b = train(logistic_control, _small_config(beta=1.0))
        assert not np.array_equal(a.policy.theta, b.policy.theta)

    def test_clipping_is_reported(self, logistic_control: LogisticControl, caplog: pytest.LogCaptureFixture) -> None:
        """Test that clipped updates are counted and summarized once."""
        with caplog.at_level("WARNING"):
            result = train(logistic_control, _small_config(grad_clip=1e-12))
        assert result.clipped_updates == 3
        assert caplog.text.count("Gradient norm clipped") == 1

    def test_non_finite_loss_aborts(self, logistic_control: LogisticControl, monkeypatch: pytest.MonkeyPatch) -> None:
        """Test that a NaN loss aborts with a diagnostics dump."""
        monkeypatch.setattr(mleg, "value_estimates", lambda value, bundle: np.full((bundle.horizon + 1, 4), np.nan))
        with pytest.raises(NonFiniteLossError, match="update 0") as exc_info:
            train(logistic_control, _small_config())
        assert exc_info.value.diagnostics["update"] == 0
        assert "grad_norm" in exc_info.value.diagnostics

    def test_failed_spectrum_logs_nan(
        self,
        logistic_control: LogisticControl,
        monkeypatch: pytest.MonkeyPatch,
        caplog: pytest.LogCaptureFixture,
    ) -> None:
        """Test that a failing spectrum evaluation records NaN and keeps training."""

        def failing(*_args: object, **_kwargs: object) -> None:
            raise NumericalError("spectrum diverged")

        monkeypatch.setattr(mleg, "benettin_spectrum", failing)
        with caplog.at_level("WARNING"):
            result = train(logistic_control, _small_config(updates=2))
        assert math.isnan(result.history[-1].mle)  # type: ignore[arg-type]
        assert "spectrum diverged" in caplog.text

    def test_pointmass_two_dimensional_actions(self) -> None:
        """Test training on a system with a two-dimensional action."""
        cfg = _small_config(init_action=None, updates=1, mle_every=1)
        result = train(Pointmass(), cfg)
        assert result.policy.action_dim == 2
        assert len(result.history) == 1

    @pytest.mark.slow
    def test_regularizer_reduces_chaos(self, logistic_control: LogisticControl) -> None:
        """Test that regularized training ends with a lower MLE than unregularized training."""
        measure = SpectrumConfig.from_windows(100, 10, samples=1, epsilon=1e-8)
        gaps = []
        for seed in range(3):
            cfg = TrainerConfig(
                seed=seed,
                updates=200,
                hidden_sizes=[16, 16],
                init_action=[3.9],
                mle_every=200,
                spectrum=measure,
            )
            mles = [
                benettin_spectrum(logistic_control, train(logistic_control, cfg, regularized=reg).policy, [0.4], measure).mle
                for reg in (False, True)
            ]
            gaps.append(mles[0] - mles[1])
        assert statistics.median(gaps) > 0.0
