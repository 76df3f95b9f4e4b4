"""Grammar-based neuroevolution of network topologies and learning
strategies, with per-individual training budgets that grow by mutation."""

from importlib import resources

from .core import Budget, FitnessRecord
from .grammar import Grammar, GrammarError, parse_grammar, load_grammar, render_grammar, validate
from .genotype import (
    Individual,
    OuterStructure,
    Phenotype,
    decode,
    load_structure,
    parse_structure,
    phenotype_from_text,
    phenotype_to_text,
    random_individual,
    random_unit,
)
from .variation import MutationRates, mutate
from .network import InvalidArchitecture, NetworkModel, compile_network, cross_entropy
from .optim import LearningStrategy, init_state, step, strategy_from_descriptor
from .evaluator import Evaluator, augment, evaluate, should_stop_early
from .data import Dataset, load_cifar10_binary, load_csv, make_rings, split
from .engine import EngineConfig, RunState, checkpoint, evolve, fittest, restore, select_parent
from .stats import MannWhitneyResult, mann_whitney_u

__version__ = "0.1.0"


def builtin_grammar_path(name: str):
    """Path to a shipped grammar/structure asset, e.g. 'fc.grammar'."""
    return resources.files(__name__) / "grammars" / name
