import copy

import mpmath
import numpy as np
import pytest

from gramnas.genotype import LearningDescriptor
from gramnas.optim import (
    ADAM,
    EPS,
    GRADIENT_DESCENT,
    RMSPROP,
    LearningStrategy,
    StrategyError,
    init_state,
    step,
    strategy_from_descriptor,
)

mpmath.mp.dps = 50


def single_step(strategy, theta0, grad, steps=1):
    params = [np.array([theta0], dtype=np.float64)]
    state = init_state(strategy, params)
    for _ in range(steps):
        step(strategy, state, params, [np.array([grad], dtype=np.float64)])
    return params[0][0]


def gd(lr=0.1, momentum=0.0, nesterov=False, decay=0.0):
    return LearningStrategy(
        algorithm=GRADIENT_DESCENT, lr=lr, decay=decay, batch_size=100,
        momentum=momentum, nesterov=nesterov,
    )


class TestScalarSteps:
    def test_plain_sgd_exact(self):
        # theta = 1 - 0.1 * 0.5, no approximation involved
        assert single_step(gd(), 1.0, 0.5) == 0.95

    def test_adam_first_step_against_high_precision(self):
        strategy = LearningStrategy(
            algorithm=ADAM, lr=0.1, decay=0.0, batch_size=100, beta1=0.9, beta2=0.999
        )
        got = single_step(strategy, 1.0, 0.5)
        lr, b1, b2, g = map(mpmath.mpf, ("0.1", "0.9", "0.999", "0.5"))
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        mhat = m / (1 - b1)
        vhat = v / (1 - b2)
        expected = 1 - lr * mhat / (mpmath.sqrt(vhat) + mpmath.mpf("1e-8"))
        assert abs(got - float(expected)) < 1e-9
        assert abs(got - 0.9) < 1e-7  # mhat = 0.5, vhat = 0.25

    def test_rmsprop_first_step_against_high_precision(self):
        strategy = LearningStrategy(
            algorithm=RMSPROP, lr=0.1, decay=0.0, batch_size=100, rho=0.9
        )
        got = single_step(strategy, 1.0, 0.5)
        lr, rho, g = map(mpmath.mpf, ("0.1", "0.9", "0.5"))
        a = (1 - rho) * g * g
        expected = 1 - lr * g / (mpmath.sqrt(a) + mpmath.mpf("1e-8"))
        assert abs(got - float(expected)) < 1e-9
        assert abs(got - 0.683772) < 1e-6

    def test_momentum_velocity_formulation(self):
        strategy = gd(momentum=0.9)
        params = [np.array([1.0])]
        state = init_state(strategy, params)
        step(strategy, state, params, [np.array([0.5])])
        step(strategy, state, params, [np.array([0.5])])
        # v1 = -0.05, v2 = 0.9*v1 - 0.05 = -0.095
        assert params[0][0] == pytest.approx(1.0 - 0.05 - 0.095, abs=1e-15)

    def test_nesterov_formulation(self):
        strategy = gd(momentum=0.9, nesterov=True)
        params = [np.array([1.0])]
        state = init_state(strategy, params)
        step(strategy, state, params, [np.array([0.5])])
        # v = -0.05; theta += 0.9*v - lr*g = -0.045 - 0.05
        assert params[0][0] == pytest.approx(1.0 - 0.095, abs=1e-15)


class TestDecaySchedule:
    def _applied_rate(self, strategy, t):
        # fresh zero parameter: one step moves it by exactly -lr_t
        params = [np.array([0.0])]
        state = init_state(strategy, params)
        state.step_count = t
        step(strategy, state, params, [np.array([1.0])])
        return -params[0][0]

    def test_exact_at_selected_steps(self):
        lr, decay = 0.1, 0.01
        strategy = gd(lr=lr, decay=decay)
        for t in (0, 1, 10):
            assert self._applied_rate(strategy, t) == lr / (1.0 + decay * t)

    def test_zero_decay_is_constant(self):
        strategy = gd(lr=0.05, decay=0.0)
        rates = [self._applied_rate(strategy, t) for t in range(5)]
        assert all(r == rates[0] for r in rates)

    def test_positive_decay_strictly_decreases(self):
        strategy = gd(lr=0.05, decay=0.001)
        rates = [self._applied_rate(strategy, t) for t in range(5)]
        assert all(a > b for a, b in zip(rates, rates[1:]))


class TestOnQuadratic:
    @pytest.mark.parametrize("algorithm", [GRADIENT_DESCENT, RMSPROP, ADAM])
    def test_one_step_reduces_quadratic_loss(self, algorithm):
        kwargs = dict(algorithm=algorithm, lr=1e-3, decay=0.0, batch_size=100)
        if algorithm == GRADIENT_DESCENT:
            kwargs.update(momentum=0.9, nesterov=False)
        elif algorithm == RMSPROP:
            kwargs.update(rho=0.9)
        else:
            kwargs.update(beta1=0.9, beta2=0.999)
        strategy = LearningStrategy(**kwargs)
        theta = np.array([2.0])
        params = [theta]
        state = init_state(strategy, params)
        loss_before = float(theta[0] ** 2)
        step(strategy, state, params, [2.0 * theta.copy()])
        assert float(theta[0] ** 2) < loss_before

    def test_momentum_zero_equals_plain_sgd(self, rng):
        grads = [rng.normal(size=(4, 3)) for _ in range(6)]
        a = [np.ones((4, 3))]
        b = [np.ones((4, 3))]
        plain = gd(lr=0.01)
        state = init_state(plain, a)
        for g in grads:
            step(plain, state, a, [g])
        for g in grads:
            b[0] -= 0.01 * g
        np.testing.assert_array_equal(a[0], b[0])


class TestStateRoundTrip:
    @pytest.mark.parametrize("algorithm", [GRADIENT_DESCENT, RMSPROP, ADAM])
    def test_clone_continues_bit_identically(self, algorithm, rng):
        kwargs = dict(algorithm=algorithm, lr=0.01, decay=1e-4, batch_size=100)
        if algorithm == GRADIENT_DESCENT:
            kwargs.update(momentum=0.9, nesterov=True)
        elif algorithm == RMSPROP:
            kwargs.update(rho=0.8)
        else:
            kwargs.update(beta1=0.9, beta2=0.99)
        strategy = LearningStrategy(**kwargs)
        grads = [rng.normal(size=5) for _ in range(8)]
        params = [rng.normal(size=5)]
        state = init_state(strategy, params)
        for g in grads[:4]:
            step(strategy, state, params, [g])
        saved_params = [p.copy() for p in params]
        saved_state = state.clone()
        for g in grads[4:]:
            step(strategy, state, params, [g])
        for g in grads[4:]:
            step(strategy, saved_state, saved_params, [g])
        np.testing.assert_array_equal(params[0], saved_params[0])
        assert state.step_count == saved_state.step_count


class TestStrategyFromDescriptor:
    def test_gradient_descent_parse(self):
        descriptor = LearningDescriptor(
            {
                "learning": "gradient-descent",
                "lr": "0.01",
                "momentum": "0.9",
                "decay": "0.0001",
                "nesterov": "True",
                "batch_size": "125",
                "early_stop": "8",
            }
        )
        strategy = strategy_from_descriptor(descriptor)
        assert strategy.algorithm == GRADIENT_DESCENT
        assert strategy.lr == 0.01
        assert strategy.momentum == 0.9
        assert strategy.nesterov is True
        assert strategy.batch_size == 125
        assert strategy.early_stop_patience == 8

    def test_lr_out_of_bounds_rejected(self):
        descriptor = LearningDescriptor(
            {
                "learning": "adam",
                "lr": "0.2",
                "beta1": "0.9",
                "beta2": "0.99",
                "decay": "0.0001",
                "batch_size": "125",
            }
        )
        with pytest.raises(StrategyError, match="lr"):
            strategy_from_descriptor(descriptor)

    def test_rho_within_bounds_accepted(self):
        descriptor = LearningDescriptor(
            {
                "learning": "rmsprop",
                "lr": "0.01",
                "rho": "0.75",
                "decay": "0.0001",
                "batch_size": "125",
            }
        )
        assert strategy_from_descriptor(descriptor).rho == 0.75

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(StrategyError, match="unknown learning algorithm"):
            strategy_from_descriptor(LearningDescriptor({"learning": "sgd"}))

    def test_unknown_attribute_rejected(self):
        descriptor = LearningDescriptor(
            {
                "learning": "rmsprop",
                "lr": "0.01",
                "rho": "0.75",
                "decay": "0.0001",
                "batch_size": "125",
                "temperature": "2",
            }
        )
        with pytest.raises(StrategyError, match="temperature"):
            strategy_from_descriptor(descriptor)

    def test_missing_early_stop_means_no_patience(self):
        descriptor = LearningDescriptor(
            {
                "learning": "rmsprop",
                "lr": "0.01",
                "rho": "0.75",
                "decay": "0.0001",
                "batch_size": "125",
            }
        )
        assert strategy_from_descriptor(descriptor).early_stop_patience is None
