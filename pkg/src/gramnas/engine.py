"""(1+lambda) evolutionary strategy with budget-aware parent selection.

Each generation mutates the parent into lambda offspring, trains every
offspring from scratch under its own budget, and selects the next parent:
the fittest individual wins outright unless it was trained for longer than
the default budget, in which case the runner-up is retrained with the same
allowance and seeds the next generation only if it ends up strictly
fitter. Every evaluation derives its random stream from
(run seed, generation, offspring index), so runs are reproducible and
resumable in epoch-budget mode.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .core import Budget, FitnessRecord, EPOCHS, derive_rng
from .genotype import Individual, OuterStructure, decode, phenotype_to_text, random_individual
from .grammar import Grammar, GrammarError, validate
from .variation import MutationRates, mutate

CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.json"
LOG_NAME = "generations.csv"
TIMINGS_NAME = "timings.csv"
BEST_PHENOTYPE_NAME = "best_phenotype.txt"

LOG_COLUMNS = (
    "generation",
    "best_fitness",
    "best_test_accuracy",
    "best_budget_seconds",
    "evaluations",
    "wall_seconds",
)

# eval_key kinds: which activity a derived random stream belongs to.
KEY_INIT = 0
KEY_MUTATE = 1
KEY_EVAL = 2
KEY_RETRAIN = 3
KEY_CLI_RETRAIN = 4

PER_EVALUATION = "per_evaluation"
FIXED = "fixed"


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt, or incompatible checkpoints."""


@dataclass
class EngineConfig:
    lambda_: int
    generations: int
    rates: MutationRates
    default_budget: Budget
    seed: int
    output_dir: Optional[Path] = None
    workers: int = 1
    eval_seed_policy: str = PER_EVALUATION

    def __post_init__(self):
        if self.lambda_ < 1:
            raise ValueError("lambda must be >= 1")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.eval_seed_policy not in (PER_EVALUATION, FIXED):
            raise ValueError(f"unknown eval seed policy {self.eval_seed_policy!r}")


@dataclass
class GenerationRecord:
    generation: int
    best_fitness: float
    best_test_accuracy: float
    best_budget_mode: str
    best_budget_amount: float
    evaluations: int
    wall_seconds: Optional[float]
    retrained: bool
    pre_selection_budget_amount: float

    def to_doc(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_doc(cls, doc: dict) -> "GenerationRecord":
        return cls(**doc)


@dataclass
class RunState:
    generation: int
    parent: Individual
    history: list = field(default_factory=list)
    next_id: int = 1
    seed: int = 0
    config_doc: Optional[dict] = None

    def to_doc(self) -> dict:
        return {
            "generation": self.generation,
            "parent": self.parent.to_doc(),
            "history": [r.to_doc() for r in self.history],
            "next_id": self.next_id,
            "seed": self.seed,
            "config": self.config_doc,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RunState":
        return cls(
            generation=doc["generation"],
            parent=Individual.from_doc(doc["parent"]),
            history=[GenerationRecord.from_doc(r) for r in doc["history"]],
            next_id=doc["next_id"],
            seed=doc["seed"],
            config_doc=doc.get("config"),
        )


def fittest(individuals) -> Individual:
    """Maximum fitness; ties go to the lower (older) id."""
    individuals = list(individuals)
    if not individuals:
        raise ValueError("empty population")
    return max(individuals, key=lambda ind: (ind.fitness, -ind.id))


def select_parent(
    population,
    default_budget: Budget,
    retrain: Callable[[Individual, Budget], FitnessRecord],
) -> Individual:
    """Pick the next parent. When the fittest was trained beyond the default
    budget, the fittest of the others is granted the same time (retrained
    from scratch, in place) and wins only if strictly fitter."""
    parent = fittest(population)
    if parent.train_budget.exceeds(default_budget):
        rest = [ind for ind in population if ind is not parent]
        if rest:
            tmp_parent = fittest(rest)
            record = retrain(tmp_parent, parent.train_budget)
            tmp_parent.fitness = record.fitness
            tmp_parent.metrics = record
            tmp_parent.train_budget = parent.train_budget
            if tmp_parent.fitness > parent.fitness:
                return tmp_parent
        return parent
    return parent


def _checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def checkpoint(state: RunState, path) -> None:
    path = Path(path)
    payload = state.to_doc()
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "checksum": _checksum(payload),
        "payload": payload,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def restore(path) -> RunState:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable or truncated: {exc}") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}")
    payload = doc.get("payload")
    if payload is None or doc.get("checksum") != _checksum(payload):
        raise CheckpointError(f"checkpoint {path} failed its checksum")
    return RunState.from_doc(payload)


def _format_float(value) -> str:
    return repr(float(value))


def _write_logs(state: RunState, config: EngineConfig) -> None:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # Timings stay out of the generation log in epoch mode so identical
    # seeded runs produce byte-identical logs; measured values always land
    # in the side file.
    deterministic_mode = config.default_budget.mode == EPOCHS
    rows = [",".join(LOG_COLUMNS)]
    timing_rows = ["generation,wall_seconds"]
    for record in state.history:
        wall = ""
        if record.wall_seconds is not None and not deterministic_mode:
            wall = f"{record.wall_seconds:.3f}"
        rows.append(
            ",".join(
                [
                    str(record.generation),
                    _format_float(record.best_fitness),
                    _format_float(record.best_test_accuracy),
                    _format_float(record.best_budget_amount),
                    str(record.evaluations),
                    wall,
                ]
            )
        )
        if record.wall_seconds is not None:
            timing_rows.append(f"{record.generation},{record.wall_seconds:.3f}")
    (out / LOG_NAME).write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out / TIMINGS_NAME).write_text("\n".join(timing_rows) + "\n", encoding="utf-8")


def _write_best_phenotype(state: RunState, config: EngineConfig, grammar: Grammar) -> None:
    out = Path(config.output_dir)
    text = phenotype_to_text(decode(state.parent, grammar))
    (out / BEST_PHENOTYPE_NAME).write_text(text, encoding="utf-8")


def _eval_key(config: EngineConfig, generation: int, index: int) -> tuple:
    if config.eval_seed_policy == FIXED:
        return (KEY_EVAL, 0, 0)
    return (KEY_EVAL, generation, index)


def _apply_record(individual: Individual, record: FitnessRecord) -> None:
    individual.fitness = record.fitness
    individual.metrics = record


def _safe_run(evaluator, individual, seed, key, budget):
    try:
        record, _ = evaluator.run(individual, seed, key, budget)
    except Exception:
        record = FitnessRecord.failure("invalid")
    return record


def evolve(
    config: EngineConfig,
    grammar: Grammar,
    structure: OuterStructure,
    dataset=None,
    evaluator=None,
    config_doc: Optional[dict] = None,
) -> RunState:
    """Run a fresh evolution: sample and evaluate the initial parent, then
    hand over to continue_run for the generation loop."""
    problems = validate(grammar, structure)
    if problems:
        raise GrammarError("; ".join(problems))
    evaluator, owns_evaluator = _resolve_evaluator(config, grammar, dataset, evaluator)
    try:
        parent = random_individual(
            grammar, structure, config.default_budget, derive_rng(config.seed, (KEY_INIT, 0, 0))
        )
        parent.id = 0
        key = _eval_key(config, 0, 0)
        parent.eval_key = key
        record = _safe_run(evaluator, parent, config.seed, key, parent.train_budget)
        _apply_record(parent, record)
        state = RunState(
            generation=0, parent=parent, next_id=1, seed=config.seed, config_doc=config_doc
        )
        return continue_run(state, config, grammar, structure, evaluator=evaluator)
    finally:
        if owns_evaluator:
            evaluator.close()


def continue_run(
    state: RunState,
    config: EngineConfig,
    grammar: Grammar,
    structure: OuterStructure,
    dataset=None,
    evaluator=None,
) -> RunState:
    """Advance a run to config.generations (no-op if already there)."""
    evaluator, owns_evaluator = _resolve_evaluator(config, grammar, dataset, evaluator)
    try:
        for generation in range(state.generation + 1, config.generations + 1):
            gen_start = time.monotonic()
            offspring = []
            for i in range(config.lambda_):
                child = mutate(
                    state.parent,
                    grammar,
                    structure,
                    config.rates,
                    config.default_budget,
                    derive_rng(config.seed, (KEY_MUTATE, generation, i)),
                )
                child.id = state.next_id
                state.next_id += 1
                offspring.append(child)

            items = []
            for i, child in enumerate(offspring):
                key = _eval_key(config, generation, i)
                child.eval_key = key
                items.append((child, config.seed, key, child.train_budget))
            records = _run_batch(evaluator, items)
            for child, record in zip(offspring, records):
                _apply_record(child, record)

            evaluations = config.lambda_
            retrained = False
            population = [state.parent] + offspring
            pre_selection_budget = fittest(population).train_budget

            def retrain(individual, budget, _generation=generation):
                nonlocal evaluations, retrained
                key = (KEY_RETRAIN, _generation, 0)
                if config.eval_seed_policy == FIXED:
                    key = (KEY_EVAL, 0, 0)
                individual.eval_key = key
                evaluations += 1
                retrained = True
                return _safe_run(evaluator, individual, config.seed, key, budget)

            state.parent = select_parent(population, config.default_budget, retrain)
            state.generation = generation

            wall = time.monotonic() - gen_start
            metrics = state.parent.metrics
            state.history.append(
                GenerationRecord(
                    generation=generation,
                    best_fitness=state.parent.fitness,
                    best_test_accuracy=(
                        metrics.test_accuracy if metrics is not None else float("nan")
                    ),
                    best_budget_mode=state.parent.train_budget.mode,
                    best_budget_amount=state.parent.train_budget.amount,
                    evaluations=evaluations,
                    wall_seconds=wall,
                    retrained=retrained,
                    pre_selection_budget_amount=pre_selection_budget.amount,
                )
            )

            if config.output_dir is not None:
                _write_logs(state, config)
                _write_best_phenotype(state, config, grammar)
                checkpoint(state, Path(config.output_dir) / CHECKPOINT_NAME)
        return state
    finally:
        if owns_evaluator:
            evaluator.close()


def _run_batch(evaluator, items) -> list:
    if hasattr(evaluator, "run_batch"):
        try:
            return evaluator.run_batch(items)
        except Exception:
            pass  # fall back to per-individual evaluation below
    return [_safe_run(evaluator, ind, seed, key, budget) for ind, seed, key, budget in items]


def _resolve_evaluator(config: EngineConfig, grammar: Grammar, dataset, evaluator):
    if evaluator is not None:
        return evaluator, False
    if dataset is None:
        raise ValueError("either a dataset or an evaluator is required")
    from .evaluator import Evaluator, ParallelEvaluator

    if config.workers > 1:
        return ParallelEvaluator(grammar, dataset, workers=config.workers), True
    return Evaluator(grammar, dataset), True
