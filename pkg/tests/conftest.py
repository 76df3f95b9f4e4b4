import numpy as np
import pytest

from gramnas import builtin_grammar_path, load_grammar, load_structure
from gramnas.core import Budget


@pytest.fixture(scope="session")
def fc_grammar():
    return load_grammar(builtin_grammar_path("fc.grammar"))


@pytest.fixture(scope="session")
def cnn_grammar():
    return load_grammar(builtin_grammar_path("cnn.grammar"))


@pytest.fixture(scope="session")
def fc_structure():
    return load_structure(builtin_grammar_path("fc.structure"))


@pytest.fixture(scope="session")
def cnn_structure():
    return load_structure(builtin_grammar_path("cnn.structure"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def epoch_budget():
    return Budget("epochs", 3)
