"""Command-line front end: evolve, resume, retrain, predict, export-stats,
compare."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    RunConfiguration,
    build_dataset,
    load_config,
    validate_config,
)
from .core import Budget
from .data import DatasetError
from .engine import (
    CHECKPOINT_NAME,
    CheckpointError,
    KEY_CLI_RETRAIN,
    RunState,
    continue_run,
    evolve,
    restore,
)
from .evaluator import Evaluator, ParallelEvaluator
from .genotype import StructureError, decode, load_structure, phenotype_to_text
from .grammar import GrammarError, load_grammar, validate
from .modelio import ModelFormatError, load_model, save_model

MODEL_NAME = "best_model.gnm"


def _build_evaluator(config: RunConfiguration, grammar, dataset):
    if config.workers > 1:
        return ParallelEvaluator(grammar, dataset, workers=config.workers)
    return Evaluator(grammar, dataset)


def _load_inputs(config: RunConfiguration):
    grammar = load_grammar(config.grammar_path)
    structure = load_structure(config.structure_path)
    problems = validate(grammar, structure)
    if problems:
        raise ConfigError("grammar/structure mismatch: " + "; ".join(problems))
    dataset = build_dataset(config.dataset)
    return grammar, structure, dataset


def _export_final_model(state: RunState, config: RunConfiguration, grammar, evaluator):
    """Reproduce the selected parent's training run to obtain its weights
    (exact under epoch budgets) and write the model container."""
    parent = state.parent
    if parent.fitness is None or parent.fitness < 0 or parent.eval_key is None:
        print("final parent has no valid evaluation; skipping model export")
        return
    record, model = evaluator.run(parent, state.seed, parent.eval_key, parent.train_budget)
    if model is None:
        print("final parent failed to retrain; skipping model export")
        return
    path = Path(config.output_dir) / MODEL_NAME
    save_model(
        model,
        phenotype_to_text(decode(parent, grammar)),
        path,
        extra_meta={
            "normalization": evaluator.normalization,
            "budget": parent.train_budget.to_doc(),
            "validation_accuracy": record.validation_accuracy,
            "test_accuracy": record.test_accuracy,
        },
    )
    print(f"exported model to {path}")


def _print_summary(state: RunState):
    parent = state.parent
    metrics = parent.metrics
    print(
        f"finished at generation {state.generation}: "
        f"fitness {parent.fitness:.4f}, "
        f"test accuracy {metrics.test_accuracy if metrics else float('nan'):.4f}, "
        f"budget {parent.train_budget.amount:g} {parent.train_budget.mode}"
    )


def cmd_evolve(args) -> int:
    overrides = {
        "grammar": args.grammar,
        "structure": args.structure,
        "output_dir": args.output_dir,
        "seed": args.seed,
        "generations": args.generations,
        "lambda_": getattr(args, "lambda_", None),
        "workers": args.workers,
        "budget_mode": args.budget_mode,
        "budget_amount": args.budget_amount,
    }
    config = load_config(args.config, overrides)
    grammar, structure, dataset = _load_inputs(config)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "config.json").write_text(
        json.dumps(config.to_doc(), indent=2) + "\n", encoding="utf-8"
    )
    evaluator = _build_evaluator(config, grammar, dataset)
    try:
        state = evolve(
            config.engine_config(),
            grammar,
            structure,
            evaluator=evaluator,
            config_doc=config.to_doc(),
        )
        _print_summary(state)
        _export_final_model(state, config, grammar, evaluator)
    finally:
        evaluator.close()
    return 0


def cmd_resume(args) -> int:
    state = restore(args.checkpoint)
    if state.config_doc is None:
        raise CheckpointError(f"{args.checkpoint} carries no run configuration")
    config = RunConfiguration.from_doc(state.config_doc)
    if args.generations is not None:
        config.generations = args.generations
    validate_config(config)
    if state.generation >= config.generations:
        print(f"run already completed generation {state.generation}; nothing to do")
        return 0
    grammar, structure, dataset = _load_inputs(config)
    evaluator = _build_evaluator(config, grammar, dataset)
    try:
        state.config_doc = config.to_doc()
        state = continue_run(state, config.engine_config(), grammar, structure, evaluator=evaluator)
        _print_summary(state)
        _export_final_model(state, config, grammar, evaluator)
    finally:
        evaluator.close()
    return 0


def cmd_retrain(args) -> int:
    state = restore(args.checkpoint)
    if state.config_doc is None:
        raise CheckpointError(f"{args.checkpoint} carries no run configuration")
    config = RunConfiguration.from_doc(state.config_doc)
    validate_config(config)
    grammar, _, dataset = _load_inputs(config)
    mode = args.budget_mode or state.parent.train_budget.mode
    budget = Budget(mode, args.budget_amount)
    evaluator = Evaluator(grammar, dataset)
    individual = state.parent.clone()
    record, model = evaluator.run(individual, state.seed, (KEY_CLI_RETRAIN, 0, 0), budget)
    print(
        f"retrained under {budget.amount:g} {budget.mode}: "
        f"validation accuracy {record.validation_accuracy:.4f}, "
        f"test accuracy {record.test_accuracy:.4f} "
        f"({record.epochs_run} epochs, stopped by {record.stopped_by})"
    )
    output_dir = Path(args.output_dir or config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "retrain_record.json").write_text(
        json.dumps({"budget": budget.to_doc(), **record.to_doc()}, indent=2) + "\n",
        encoding="utf-8",
    )
    if model is not None:
        save_model(
            model,
            phenotype_to_text(decode(individual, grammar)),
            output_dir / "retrained_model.gnm",
            extra_meta={"normalization": evaluator.normalization, "budget": budget.to_doc()},
        )
    return 0


def _read_feature_csv(path, drop_column=None) -> np.ndarray:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path} is empty") from None
        keep = [i for i, name in enumerate(header) if name != drop_column]
        if drop_column is not None and len(keep) == len(header):
            raise DatasetError(f"column {drop_column!r} not found; available: {header}")
        rows = []
        for row_no, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[i]) for i in keep])
            except (ValueError, IndexError):
                raise DatasetError(f"{path} line {row_no}: bad numeric row") from None
    if not rows:
        raise DatasetError(f"{path} has a header but no data rows")
    return np.asarray(rows, dtype=np.float64)


def cmd_predict(args) -> int:
    model, _, meta = load_model(args.model)
    features = _read_feature_csv(args.data, drop_column=args.label_column)
    normalization = meta.get("normalization", {"kind": "none"})
    if normalization.get("kind") == "standardize":
        mean = np.asarray(normalization["mean"])
        std = np.asarray(normalization["std"])
        features = (features - mean) / std
    expected = tuple(meta["input_shape"])
    if len(expected) > 1:
        features = features.reshape((len(features),) + expected)
    if tuple(features.shape[1:]) != expected:
        raise DatasetError(
            f"feature shape {tuple(features.shape[1:])} does not match model input {expected}"
        )
    dtype = model.parameter_arrays()[0][2].dtype
    predictions = []
    for start in range(0, len(features), 1024):
        probs = model.forward(features[start : start + 1024].astype(dtype), training=False)
        predictions.extend(int(i) for i in probs.argmax(axis=1))
    out = Path(args.output)
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["prediction"])
        writer.writerows([[p] for p in predictions])
    print(f"wrote {len(predictions)} predictions to {out}")
    return 0


def cmd_export_stats(args) -> int:
    from . import report

    summary = report.export_stats(args.run_dirs, args.output_dir)
    print(f"wrote {summary} and fitness_curves.png")
    return 0


def _read_sample(path, column=None) -> list:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"sample file not found: {path}")
    if column is not None:
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or column not in reader.fieldnames:
                raise ConfigError(f"column {column!r} not found in {path}")
            return [float(row[column]) for row in reader]
    return [float(tok) for tok in path.read_text(encoding="utf-8").split()]


def cmd_compare(args) -> int:
    from . import report

    sample_a = _read_sample(args.sample_a, args.column)
    sample_b = _read_sample(args.sample_b, args.column)
    label_a = args.label_a or Path(args.sample_a).stem
    label_b = args.label_b or Path(args.sample_b).stem
    result = report.compare_samples(sample_a, sample_b, label_a, label_b, args.output_dir)
    print(
        f"U({label_a}) = {result.u_a:g}, U({label_b}) = {result.u_b:g}, "
        f"z = {result.z:.4f}, p = {result.p_value:.5f}, "
        f"r = {result.effect_size_r:.3f} ({result.effect_label})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gramnas",
        description="Grammar-based neuroevolution with growing training budgets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run an evolution described by a config file")
    p.add_argument("config")
    p.add_argument("--grammar")
    p.add_argument("--structure")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--lambda", dest="lambda_", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--budget-mode", choices=["epochs", "wall_clock_seconds", "seconds"])
    p.add_argument("--budget-amount", type=float)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("resume", help="continue a checkpointed run")
    p.add_argument("checkpoint")
    p.add_argument("--generations", type=int, help="extend the run to this many generations")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("retrain", help="retrain the checkpointed best individual from scratch")
    p.add_argument("checkpoint")
    p.add_argument("--budget-amount", type=float, required=True)
    p.add_argument("--budget-mode", choices=["epochs", "wall_clock_seconds", "seconds"])
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("predict", help="classify CSV rows with an exported model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--output", default="predictions.csv")
    p.add_argument("--label-column")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-stats", help="summarise runs into CSV and figures")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--output-dir", default="stats")
    p.set_defaults(func=cmd_export_stats)

    p = sub.add_parser("compare", help="rank comparison of two outcome samples")
    p.add_argument("sample_a")
    p.add_argument("sample_b")
    p.add_argument("--column", help="read this CSV column instead of bare numbers")
    p.add_argument("--label-a")
    p.add_argument("--label-b")
    p.add_argument("--output-dir", default="compare")
    p.set_defaults(func=cmd_compare)
    return parser


_USER_ERRORS = (
    ConfigError,
    DatasetError,
    GrammarError,
    StructureError,
    CheckpointError,
    ModelFormatError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # Budget modes named "seconds" on the command line mean wall-clock.
    if getattr(args, "budget_mode", None) == "seconds":
        args.budget_mode = "wall_clock_seconds"
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
