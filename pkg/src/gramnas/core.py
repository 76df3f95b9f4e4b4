"""Shared value types: training budgets, fitness records, RNG derivation."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

WALL_CLOCK = "wall_clock_seconds"
EPOCHS = "epochs"
BUDGET_MODES = (WALL_CLOCK, EPOCHS)

STOP_BUDGET = "budget"
STOP_EARLY = "early_stop"
STOP_NAN = "nan"
STOP_INVALID = "invalid"

INVALID_FITNESS = -1.0


def derive_rng(seed: int, key: tuple = ()) -> np.random.Generator:
    """Independent generator for (run seed, structured key). The same pair
    always yields the same stream, regardless of scheduling order."""
    entropy = (int(seed),) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class Budget:
    """Per-individual training allowance, either wall-clock seconds or epochs."""

    mode: str
    amount: float

    def __post_init__(self):
        if self.mode not in BUDGET_MODES:
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if not self.amount > 0:
            raise ValueError(f"budget amount must be positive, got {self.amount}")

    def extended_by(self, other: "Budget") -> "Budget":
        """Return a budget grown by `other` (modes must agree)."""
        if other.mode != self.mode:
            raise ValueError(f"cannot mix budget modes {self.mode!r} and {other.mode!r}")
        return Budget(self.mode, self.amount + other.amount)

    def exceeds(self, other: "Budget") -> bool:
        if other.mode != self.mode:
            raise ValueError(f"cannot compare budget modes {self.mode!r} and {other.mode!r}")
        return self.amount > other.amount

    def to_doc(self) -> dict:
        return asdict(self)

    @classmethod
    def from_doc(cls, doc: dict) -> "Budget":
        return cls(mode=doc["mode"], amount=doc["amount"])


@dataclass
class FitnessRecord:
    """Outcome of training one individual.

    `fitness` equals `validation_accuracy` except for failed evaluations
    (stopped_by nan/invalid), which carry the -1 sentinel.
    """

    fitness: float
    validation_accuracy: float
    test_accuracy: float
    epochs_run: int
    elapsed_seconds: float
    stopped_by: str

    @classmethod
    def failure(cls, stopped_by: str, epochs_run: int = 0, elapsed_seconds: float = 0.0) -> "FitnessRecord":
        return cls(
            fitness=INVALID_FITNESS,
            validation_accuracy=0.0,
            test_accuracy=0.0,
            epochs_run=epochs_run,
            elapsed_seconds=elapsed_seconds,
            stopped_by=stopped_by,
        )

    def to_doc(self) -> dict:
        return asdict(self)

    @classmethod
    def from_doc(cls, doc: dict) -> "FitnessRecord":
        return cls(**doc)
