"""Train compiled networks under per-individual budgets and score them.

An evaluation decodes the individual, parses its learning strategy,
compiles the network, and trains it from scratch: shuffled mini-batches
each epoch (final short batch kept), optional image augmentation on the
training split only, one optimizer step per batch. Validation loss drives
early stopping and best-weight restoration; validation accuracy at the
restored weights is the fitness. The test split is scored for reporting
and never influences training or selection. All failure modes (shape
errors, NaN losses) map onto the record's -1 sentinel rather than raising.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    Budget,
    FitnessRecord,
    EPOCHS,
    STOP_BUDGET,
    STOP_EARLY,
    STOP_INVALID,
    STOP_NAN,
    WALL_CLOCK,
    derive_rng,
)
from .data import Dataset
from .genotype import DecodeError, Individual, decode
from .grammar import Grammar, parse_grammar, render_grammar
from .network import InvalidArchitecture, NetworkModel, compile_network, cross_entropy
from .optim import StrategyError, init_state, step, strategy_from_descriptor

AUGMENT_PAD = 4
FLIP_PROBABILITY = 0.5
_EVAL_CHUNK = 1024


def should_stop_early(validation_loss_history, patience: int) -> bool:
    """True iff the last `patience` epochs all failed to strictly improve on
    the best loss seen before them."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = np.inf
    streak = 0
    for loss in validation_loss_history:
        if loss < best:
            best = loss
            streak = 0
        else:
            streak += 1
    return streak >= patience


def augment(image_batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad 4 on all sides, crop a random window back to the original
    size, then flip horizontally with probability 0.5, per image."""
    if image_batch.ndim != 4:
        raise ValueError(f"augment expects N x H x W x C images, got {image_batch.shape}")
    n = image_batch.shape[0]
    offsets = rng.integers(0, 2 * AUGMENT_PAD + 1, size=(n, 2))
    flips = rng.random(n) < FLIP_PROBABILITY
    return apply_augment(image_batch, offsets, flips)


def apply_augment(image_batch: np.ndarray, offsets, flips) -> np.ndarray:
    """Deterministic core of `augment`; offsets of (PAD, PAD) with no flip
    reproduce the input exactly."""
    n, h, w, _ = image_batch.shape
    padded = np.pad(
        image_batch, ((0, 0), (AUGMENT_PAD, AUGMENT_PAD), (AUGMENT_PAD, AUGMENT_PAD), (0, 0))
    )
    out = np.empty_like(image_batch)
    for i in range(n):
        oy, ox = int(offsets[i][0]), int(offsets[i][1])
        crop = padded[i, oy : oy + h, ox : ox + w, :]
        out[i] = crop[:, ::-1, :] if flips[i] else crop
    return out


@dataclass
class PreparedData:
    """Split arrays after normalization, ready for the training loop."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    input_shape: tuple
    num_classes: int
    image_shaped: bool
    normalization: dict


def prepare_data(dataset: Dataset, dtype=np.float32) -> PreparedData:
    """Materialise the split arrays. Images are expected in [0, 1] already;
    tabular features are standardized with training-split statistics."""
    if len(dataset.train_indices) == 0 or len(dataset.val_indices) == 0:
        raise ValueError("dataset has no train/validation split assigned")
    x_train, y_train = dataset.subset(dataset.train_indices)
    x_val, y_val = dataset.subset(dataset.val_indices)
    x_test, y_test = dataset.subset(dataset.test_indices)
    if dataset.image_shaped:
        normalization = {"kind": "unit_interval"}
    else:
        mean = x_train.mean(axis=0)
        std = x_train.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        x_train = (x_train - mean) / std
        x_val = (x_val - mean) / std
        x_test = (x_test - mean) / std if len(x_test) else x_test
        normalization = {"kind": "standardize", "mean": mean.tolist(), "std": std.tolist()}
    return PreparedData(
        x_train=x_train.astype(dtype),
        y_train=y_train,
        x_val=x_val.astype(dtype),
        y_val=y_val,
        x_test=x_test.astype(dtype),
        y_test=y_test,
        input_shape=tuple(x_train.shape[1:]),
        num_classes=dataset.num_classes,
        image_shaped=dataset.image_shaped,
        normalization=normalization,
    )


def _split_metrics(model: NetworkModel, x, y) -> tuple:
    """Mean cross-entropy loss and accuracy over a split, in inference mode."""
    total_loss = 0.0
    correct = 0
    units = model.layers[model.output_index].units
    for start in range(0, len(x), _EVAL_CHUNK):
        xb = x[start : start + _EVAL_CHUNK]
        yb = y[start : start + _EVAL_CHUNK]
        probs = model.forward(xb, training=False)
        onehot = np.zeros((len(xb), units), dtype=probs.dtype)
        onehot[np.arange(len(xb)), yb] = 1.0
        loss, _ = cross_entropy(probs, onehot)
        total_loss += loss * len(xb)
        correct += int((probs.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x)


def train_individual(
    individual: Individual,
    grammar: Grammar,
    prepared: PreparedData,
    rng: np.random.Generator,
    budget: Optional[Budget] = None,
    dtype=np.float32,
) -> tuple:
    """Full evaluation; returns (FitnessRecord, trained model or None)."""
    start_time = time.monotonic()
    budget = budget if budget is not None else individual.train_budget

    def elapsed():
        return time.monotonic() - start_time

    try:
        phenotype = decode(individual, grammar)
        strategy = strategy_from_descriptor(phenotype.learning)
        model = compile_network(
            phenotype, prepared.input_shape, prepared.num_classes, rng, dtype=dtype
        )
    except (DecodeError, StrategyError, InvalidArchitecture):
        return FitnessRecord.failure(STOP_INVALID, elapsed_seconds=elapsed()), None

    param_index = model.parameter_arrays()
    params = [arr for _, _, arr in param_index]
    opt_state = init_state(strategy, params)
    units = model.layers[model.output_index].units
    n_train = len(prepared.x_train)
    batch_size = strategy.batch_size

    history = []
    best_loss = np.inf
    best_accuracy = 0.0
    best_snapshot = None
    epochs_run = 0
    stopped_by = None

    while stopped_by is None:
        out_of_time = False
        perm = rng.permutation(n_train)
        for batch_start in range(0, n_train, batch_size):
            idx = perm[batch_start : batch_start + batch_size]
            xb = prepared.x_train[idx]
            if prepared.image_shaped:
                xb = augment(xb, rng)
            yb = prepared.y_train[idx]
            probs = model.forward(xb, training=True, rng=rng)
            onehot = np.zeros((len(idx), units), dtype=probs.dtype)
            onehot[np.arange(len(idx)), yb] = 1.0
            loss, _ = cross_entropy(probs, onehot)
            if not np.isfinite(loss):
                return (
                    FitnessRecord.failure(STOP_NAN, epochs_run, elapsed()),
                    None,
                )
            # Fused softmax/cross-entropy gradient at the logits; exact even
            # when a saturated probability underflows to zero.
            dlogits = (probs - onehot) / len(idx)
            grads_by_layer, _ = model.backward(dlogits, output_preactivation=True)
            grads = [grads_by_layer[i][name] for i, name, _ in param_index]
            step(strategy, opt_state, params, grads)
            if budget.mode == WALL_CLOCK and elapsed() >= budget.amount:
                out_of_time = True
                break
        if not out_of_time:
            epochs_run += 1

        val_loss, val_accuracy = _split_metrics(model, prepared.x_val, prepared.y_val)
        if not np.isfinite(val_loss):
            return FitnessRecord.failure(STOP_NAN, epochs_run, elapsed()), None
        history.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_accuracy = val_accuracy
            best_snapshot = model.snapshot()

        if out_of_time:
            stopped_by = STOP_BUDGET
        elif budget.mode == EPOCHS and epochs_run >= budget.amount:
            stopped_by = STOP_BUDGET
        elif strategy.early_stop_patience is not None and should_stop_early(
            history, strategy.early_stop_patience
        ):
            stopped_by = STOP_EARLY

    model.load_snapshot(best_snapshot)
    test_accuracy = float("nan")
    if len(prepared.x_test):
        _, test_accuracy = _split_metrics(model, prepared.x_test, prepared.y_test)
    record = FitnessRecord(
        fitness=best_accuracy,
        validation_accuracy=best_accuracy,
        test_accuracy=test_accuracy,
        epochs_run=epochs_run,
        elapsed_seconds=elapsed(),
        stopped_by=stopped_by,
    )
    return record, model


def evaluate(
    individual: Individual,
    grammar: Grammar,
    dataset: Dataset,
    rng: np.random.Generator,
    budget: Optional[Budget] = None,
    dtype=np.float32,
) -> FitnessRecord:
    """One-off evaluation against a split dataset."""
    prepared = prepare_data(dataset, dtype=dtype)
    record, _ = train_individual(individual, grammar, prepared, rng, budget, dtype=dtype)
    return record


class Evaluator:
    """Reusable evaluation context for an evolution run.

    Evaluations are isolated units of work identified by (seed, key); the
    key makes every evaluation's random stream reproducible independently
    of scheduling order.
    """

    def __init__(self, grammar: Grammar, dataset: Dataset, dtype=np.float32):
        self.grammar = grammar
        self.dtype = dtype
        self.prepared = prepare_data(dataset, dtype=dtype)

    @property
    def input_shape(self):
        return self.prepared.input_shape

    @property
    def num_classes(self):
        return self.prepared.num_classes

    @property
    def normalization(self):
        return self.prepared.normalization

    def run(self, individual: Individual, seed: int, key: tuple, budget: Budget) -> tuple:
        rng = derive_rng(seed, key)
        return train_individual(
            individual, self.grammar, self.prepared, rng, budget, dtype=self.dtype
        )

    def run_batch(self, items: list) -> list:
        """items: (individual, seed, key, budget); returns records in order."""
        return [self.run(ind, seed, key, budget)[0] for ind, seed, key, budget in items]

    def close(self):
        pass


_WORKER_CONTEXT = {}


def _pool_initializer(grammar_text: str, dataset: Dataset, dtype_name: str):
    try:
        from threadpoolctl import threadpool_limits

        # One BLAS thread per worker; the workers themselves provide the
        # parallelism.
        _WORKER_CONTEXT["threads"] = threadpool_limits(limits=1)
    except ImportError:
        pass
    _WORKER_CONTEXT["evaluator"] = Evaluator(
        parse_grammar(grammar_text), dataset, dtype=np.dtype(dtype_name).type
    )


def _pool_evaluate(doc: dict, seed: int, key: tuple, budget_doc: dict) -> dict:
    evaluator = _WORKER_CONTEXT["evaluator"]
    record, _ = evaluator.run(
        Individual.from_doc(doc), seed, key, Budget.from_doc(budget_doc)
    )
    return record.to_doc()


class ParallelEvaluator(Evaluator):
    """Evaluator that fans run_batch out over worker processes. Results are
    merged in submission order, so epoch-budget runs stay deterministic."""

    def __init__(self, grammar: Grammar, dataset: Dataset, workers: int, dtype=np.float32):
        super().__init__(grammar, dataset, dtype=dtype)
        self.workers = workers
        self._dataset = dataset
        self._pool = None

    def _ensure_pool(self):
        if self._pool is None:
            from concurrent.futures import ProcessPoolExecutor

            self._pool = ProcessPoolExecutor(
                max_workers=self.workers,
                initializer=_pool_initializer,
                initargs=(render_grammar(self.grammar), self._dataset, np.dtype(self.dtype).name),
            )
        return self._pool

    def run_batch(self, items: list) -> list:
        if len(items) <= 1 or self.workers <= 1:
            return super().run_batch(items)
        pool = self._ensure_pool()
        futures = [
            pool.submit(_pool_evaluate, ind.to_doc(), seed, key, budget.to_doc())
            for ind, seed, key, budget in items
        ]
        return [FitnessRecord.from_doc(f.result()) for f in futures]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
