"""The three evolvable learning algorithms and their hyperparameter parsing.

Update rules (t is the step count before the update, eps = 1e-8, effective
rate lr_t = lr / (1 + decay * t)):

  gradient descent   v <- momentum*v - lr_t*g
                     theta <- theta + v                       (plain)
                     theta <- theta + momentum*v - lr_t*g     (nesterov)
  rmsprop            a <- rho*a + (1-rho)*g^2
                     theta <- theta - lr_t * g / (sqrt(a) + eps)
  adam               m <- beta1*m + (1-beta1)*g
                     v <- beta2*v + (1-beta2)*g^2
                     theta <- theta - lr_t * mhat / (sqrt(vhat) + eps)
                     with mhat = m/(1-beta1^(t+1)), vhat = v/(1-beta2^(t+1))
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-8

GRADIENT_DESCENT = "gradient_descent"
RMSPROP = "rmsprop"
ADAM = "adam"

_ALGORITHM_BY_ATTR = {
    "gradient-descent": GRADIENT_DESCENT,
    "rmsprop": RMSPROP,
    "adam": ADAM,
}

# Closed bounds the search grammars expose; descriptors outside them are
# rejected rather than clamped.
BOUNDS = {
    "lr": (0.0001, 0.1),
    "momentum": (0.68, 0.99),
    "decay": (0.000001, 0.001),
    "rho": (0.5, 1.0),
    "beta1": (0.5, 1.0),
    "beta2": (0.5, 1.0),
    "batch_size": (50, 500),
    "early_stop": (5, 20),
}


class StrategyError(ValueError):
    """Raised for unknown algorithms or out-of-bounds hyperparameters."""


@dataclass(frozen=True)
class LearningStrategy:
    algorithm: str
    lr: float
    decay: float
    batch_size: int
    momentum: float = 0.0
    nesterov: bool = False
    rho: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    early_stop_patience: Optional[int] = None


class OptimizerState:
    """Per-parameter slots plus the update counter."""

    def __init__(self, step_count: int, slots: list):
        self.step_count = step_count
        self.slots = slots

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            self.step_count,
            [{k: v.copy() for k, v in slot.items()} for slot in self.slots],
        )


def init_state(strategy: LearningStrategy, params: list) -> OptimizerState:
    def zeros_like_all(*names):
        return [{name: np.zeros_like(p) for name in names} for p in params]

    if strategy.algorithm == GRADIENT_DESCENT:
        slots = zeros_like_all("velocity")
    elif strategy.algorithm == RMSPROP:
        slots = zeros_like_all("sq_avg")
    elif strategy.algorithm == ADAM:
        slots = zeros_like_all("m", "v")
    else:
        raise StrategyError(f"unknown algorithm {strategy.algorithm!r}")
    return OptimizerState(0, slots)


def step(strategy: LearningStrategy, state: OptimizerState, params: list, grads: list):
    """Apply one update in place; returns (params, state) for convenience."""
    if len(params) != len(grads) or len(params) != len(state.slots):
        raise ValueError("params, grads and state slots must align")
    t = state.step_count
    lr_t = strategy.lr / (1.0 + strategy.decay * t)

    if strategy.algorithm == GRADIENT_DESCENT:
        for theta, g, slot in zip(params, grads, state.slots):
            if theta.shape != g.shape:
                raise ValueError(f"shape mismatch {theta.shape} vs {g.shape}")
            v = slot["velocity"]
            v *= strategy.momentum
            v -= lr_t * g
            if strategy.nesterov:
                theta += strategy.momentum * v - lr_t * g
            else:
                theta += v
    elif strategy.algorithm == RMSPROP:
        for theta, g, slot in zip(params, grads, state.slots):
            if theta.shape != g.shape:
                raise ValueError(f"shape mismatch {theta.shape} vs {g.shape}")
            a = slot["sq_avg"]
            a *= strategy.rho
            a += (1.0 - strategy.rho) * g * g
            theta -= lr_t * g / (np.sqrt(a) + EPS)
    elif strategy.algorithm == ADAM:
        correction1 = 1.0 - strategy.beta1 ** (t + 1)
        correction2 = 1.0 - strategy.beta2 ** (t + 1)
        for theta, g, slot in zip(params, grads, state.slots):
            if theta.shape != g.shape:
                raise ValueError(f"shape mismatch {theta.shape} vs {g.shape}")
            m, v = slot["m"], slot["v"]
            m *= strategy.beta1
            m += (1.0 - strategy.beta1) * g
            v *= strategy.beta2
            v += (1.0 - strategy.beta2) * g * g
            theta -= lr_t * (m / correction1) / (np.sqrt(v / correction2) + EPS)
    else:
        raise StrategyError(f"unknown algorithm {strategy.algorithm!r}")

    state.step_count += 1
    return params, state


def _bounded_float(attributes: dict, key: str) -> float:
    try:
        value = float(attributes[key])
    except KeyError:
        raise StrategyError(f"learning descriptor missing {key!r}") from None
    except ValueError:
        raise StrategyError(f"{key}={attributes[key]!r} is not a number") from None
    lo, hi = BOUNDS[key]
    if not lo <= value <= hi:
        raise StrategyError(f"{key}={value} outside [{lo}, {hi}]")
    return value


def _bounded_int(attributes: dict, key: str) -> int:
    value = _bounded_float(attributes, key)
    if value != int(value):
        raise StrategyError(f"{key}={value} is not an integer")
    return int(value)


def _boolean(attributes: dict, key: str) -> bool:
    try:
        value = attributes[key]
    except KeyError:
        raise StrategyError(f"learning descriptor missing {key!r}") from None
    if value not in ("True", "False"):
        raise StrategyError(f"{key}={value!r} is not True/False")
    return value == "True"


def strategy_from_descriptor(descriptor) -> LearningStrategy:
    """Parse a decoded learning descriptor into a typed strategy, rejecting
    unknown algorithms and values outside the grammar bounds."""
    attributes = descriptor.attributes
    try:
        algorithm_attr = attributes["learning"]
    except KeyError:
        raise StrategyError("learning descriptor has no 'learning' attribute") from None
    algorithm = _ALGORITHM_BY_ATTR.get(algorithm_attr)
    if algorithm is None:
        raise StrategyError(f"unknown learning algorithm {algorithm_attr!r}")

    expected = {"learning", "lr", "decay", "batch_size"}
    if algorithm == GRADIENT_DESCENT:
        expected |= {"momentum", "nesterov"}
    elif algorithm == RMSPROP:
        expected |= {"rho"}
    else:
        expected |= {"beta1", "beta2"}
    optional = {"early_stop"}
    unknown = set(attributes) - expected - optional
    if unknown:
        raise StrategyError(f"unexpected learning attribute(s) {sorted(unknown)}")

    patience = _bounded_int(attributes, "early_stop") if "early_stop" in attributes else None
    common = dict(
        lr=_bounded_float(attributes, "lr"),
        decay=_bounded_float(attributes, "decay"),
        batch_size=_bounded_int(attributes, "batch_size"),
        early_stop_patience=patience,
    )
    if algorithm == GRADIENT_DESCENT:
        return LearningStrategy(
            algorithm=algorithm,
            momentum=_bounded_float(attributes, "momentum"),
            nesterov=_boolean(attributes, "nesterov"),
            **common,
        )
    if algorithm == RMSPROP:
        return LearningStrategy(algorithm=algorithm, rho=_bounded_float(attributes, "rho"), **common)
    return LearningStrategy(
        algorithm=algorithm,
        beta1=_bounded_float(attributes, "beta1"),
        beta2=_bounded_float(attributes, "beta2"),
        **common,
    )
