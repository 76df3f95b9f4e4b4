"""Run configuration: one INI-style file plus command-line overrides.

Sections and keys (defaults in parentheses):

  [paths]    grammar, structure, output_dir
  [dataset]  kind = rings | csv | cifar10
             rings:   n_per_class (1500), noise (0.1), data_seed (0)
             csv:     path, label_column
             cifar10: directory
             split:   train, val, test (test only for sources without a
                      canonical test set), split_seed (0)
  [engine]   lambda (4), generations (20), seed (0), workers (1),
             eval_seed_policy = per_evaluation | fixed
  [rates]    add_layer (0.25), remove_layer (0.25), dsge (0.15),
             add_input (0), remove_input (0), train_time (0.2),
             duplicate_fraction (0.5)
  [budget]   mode = epochs | wall_clock_seconds, amount

Command-line flags win over file values. When GRAMNAS_OUTPUT_ROOT is set,
relative output directories resolve under it.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .core import Budget, EPOCHS, WALL_CLOCK
from .data import Dataset, load_cifar10_binary, load_csv, make_rings, split
from .engine import EngineConfig, PER_EVALUATION
from .variation import MutationRates

OUTPUT_ROOT_ENV = "GRAMNAS_OUTPUT_ROOT"

_BUDGET_MODES = {
    "epochs": EPOCHS,
    "wall_clock_seconds": WALL_CLOCK,
    "seconds": WALL_CLOCK,
}


class ConfigError(ValueError):
    """Raised for missing files or out-of-range configuration values."""


@dataclass
class RunConfiguration:
    grammar_path: Path
    structure_path: Path
    output_dir: Path
    dataset: dict
    lambda_: int = 4
    generations: int = 20
    seed: int = 0
    workers: int = 1
    eval_seed_policy: str = PER_EVALUATION
    rates: MutationRates = field(default_factory=MutationRates)
    budget: Budget = field(default_factory=lambda: Budget(EPOCHS, 3))

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            lambda_=self.lambda_,
            generations=self.generations,
            rates=self.rates,
            default_budget=self.budget,
            seed=self.seed,
            output_dir=self.output_dir,
            workers=self.workers,
            eval_seed_policy=self.eval_seed_policy,
        )

    def to_doc(self) -> dict:
        return {
            "grammar": str(self.grammar_path),
            "structure": str(self.structure_path),
            "output_dir": str(self.output_dir),
            "dataset": dict(self.dataset),
            "lambda": self.lambda_,
            "generations": self.generations,
            "seed": self.seed,
            "workers": self.workers,
            "eval_seed_policy": self.eval_seed_policy,
            "rates": {
                "add_layer": self.rates.add_layer,
                "remove_layer": self.rates.remove_layer,
                "dsge": self.rates.dsge,
                "add_input": self.rates.add_input,
                "remove_input": self.rates.remove_input,
                "train_time": self.rates.train_time,
                "duplicate_fraction": self.rates.duplicate_fraction,
            },
            "budget": self.budget.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RunConfiguration":
        rates = doc.get("rates", {})
        return cls(
            grammar_path=Path(doc["grammar"]),
            structure_path=Path(doc["structure"]),
            output_dir=Path(doc["output_dir"]),
            dataset=dict(doc["dataset"]),
            lambda_=doc.get("lambda", 4),
            generations=doc.get("generations", 20),
            seed=doc.get("seed", 0),
            workers=doc.get("workers", 1),
            eval_seed_policy=doc.get("eval_seed_policy", PER_EVALUATION),
            rates=MutationRates(**rates),
            budget=Budget.from_doc(doc["budget"]),
        )


def _resolve_output_dir(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def load_config(path, overrides: dict = None) -> RunConfiguration:
    """Read a configuration file and apply flag overrides (flags win)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read(path, encoding="utf-8")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback)

    grammar = overrides.get("grammar", get("paths", "grammar"))
    structure = overrides.get("structure", get("paths", "structure"))
    output_dir = overrides.get("output_dir", get("paths", "output_dir"))
    for name, value in (("grammar", grammar), ("structure", structure), ("output_dir", output_dir)):
        if not value:
            raise ConfigError(f"configuration is missing [paths] {name}")

    dataset_spec = {"kind": get("dataset", "kind", "rings")}
    for key in (
        "n_per_class",
        "noise",
        "data_seed",
        "path",
        "label_column",
        "directory",
        "train",
        "val",
        "test",
        "split_seed",
    ):
        value = get("dataset", key)
        if value is not None:
            dataset_spec[key] = value

    mode_name = overrides.get("budget_mode", get("budget", "mode", "epochs"))
    mode = _BUDGET_MODES.get(mode_name)
    if mode is None:
        raise ConfigError(f"unknown budget mode {mode_name!r}")
    amount = float(overrides.get("budget_amount", get("budget", "amount", "3")))

    try:
        rates = MutationRates(
            add_layer=parser.getfloat("rates", "add_layer", fallback=0.25),
            remove_layer=parser.getfloat("rates", "remove_layer", fallback=0.25),
            dsge=parser.getfloat("rates", "dsge", fallback=0.15),
            add_input=parser.getfloat("rates", "add_input", fallback=0.0),
            remove_input=parser.getfloat("rates", "remove_input", fallback=0.0),
            train_time=parser.getfloat("rates", "train_time", fallback=0.20),
            duplicate_fraction=parser.getfloat("rates", "duplicate_fraction", fallback=0.5),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    config = RunConfiguration(
        grammar_path=Path(grammar),
        structure_path=Path(structure),
        output_dir=_resolve_output_dir(str(output_dir)),
        dataset=dataset_spec,
        lambda_=int(overrides.get("lambda_", get("engine", "lambda", "4"))),
        generations=int(overrides.get("generations", get("engine", "generations", "20"))),
        seed=int(overrides.get("seed", get("engine", "seed", "0"))),
        workers=int(overrides.get("workers", get("engine", "workers", "1"))),
        eval_seed_policy=get("engine", "eval_seed_policy", PER_EVALUATION),
        rates=rates,
        budget=Budget(mode, amount),
    )
    validate_config(config)
    return config


def validate_config(config: RunConfiguration) -> None:
    for label, p in (("grammar", config.grammar_path), ("structure", config.structure_path)):
        if not Path(p).exists():
            raise ConfigError(f"{label} file not found: {p}")
    if config.lambda_ < 1 or config.generations < 1:
        raise ConfigError("lambda and generations must be >= 1")
    kind = config.dataset.get("kind")
    if kind not in ("rings", "csv", "cifar10"):
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if kind == "csv" and "path" not in config.dataset:
        raise ConfigError("csv dataset needs a path")
    if kind == "cifar10" and "directory" not in config.dataset:
        raise ConfigError("cifar10 dataset needs a directory")


def build_dataset(spec: dict) -> Dataset:
    """Materialise and split the dataset a configuration describes."""
    kind = spec["kind"]
    split_seed = int(spec.get("split_seed", 0))
    if kind == "rings":
        dataset = make_rings(
            n_per_class=int(spec.get("n_per_class", 1500)),
            noise_sigma=float(spec.get("noise", 0.1)),
            seed=int(spec.get("data_seed", 0)),
        )
        train_n = int(spec.get("train", 2000))
        val_n = int(spec.get("val", 500))
        test_n = int(spec.get("test", 500))
        return split(dataset, train_n, val_n, test_n, seed=split_seed)
    if kind == "csv":
        dataset = load_csv(spec["path"], spec.get("label_column", "label"))
        total = len(dataset)
        test_n = int(spec.get("test", max(1, total // 5)))
        val_n = int(spec.get("val", max(1, total // 5)))
        train_n = int(spec.get("train", total - test_n - val_n))
        return split(dataset, train_n, val_n, test_n, seed=split_seed)
    if kind == "cifar10":
        dataset = load_cifar10_binary(spec["directory"])
        train_n = int(spec.get("train", 42500))
        val_n = int(spec.get("val", 7500))
        return split(dataset, train_n, val_n, seed=split_seed)
    raise ConfigError(f"unknown dataset kind {kind!r}")
