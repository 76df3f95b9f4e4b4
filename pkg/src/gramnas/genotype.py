"""Two-level genotype with a per-layer connectivity level, and its decoding.

The outer level is an ordered list of evolutionary units (layers plus one
learning block), each expanding a grammar start symbol. The inner level
keeps, per nonterminal, an ordered list of expansion genes that decoding
consumes left to right; missing genes are repaired by sampling and written
back so the evaluated phenotype always has a concrete genotype. The
connectivity level stores, per layer unit, negative offsets to the earlier
layers feeding it.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Budget, FitnessRecord
from .grammar import (
    Grammar,
    GrammarError,
    NonterminalRef,
    Parameter,
    ParameterSpec,
    TerminalAttribute,
    INTEGER,
)

MAX_DERIVATION_DEPTH = 50

LAYERS = "layers"
MACRO = "macro"


class StructureError(ValueError):
    """Raised for malformed outer-structure definitions."""


class DecodeError(ValueError):
    """Raised when a genotype cannot be mapped to a phenotype."""


@dataclass(frozen=True)
class ModuleSpec:
    """One outer-level slot: which start symbols its units may expand and
    how many units it may hold."""

    start_symbols: tuple
    min_units: int
    max_units: int
    kind: str

    def __post_init__(self):
        if not self.start_symbols:
            raise StructureError("module needs at least one start symbol")
        if self.min_units < 0 or self.max_units < 1 or self.min_units > self.max_units:
            raise StructureError(
                f"bad unit bounds [{self.min_units}, {self.max_units}]"
            )
        if self.kind not in (LAYERS, MACRO):
            raise StructureError(f"unknown module kind {self.kind!r}")
        if self.kind == MACRO and not (self.min_units == self.max_units == 1):
            raise StructureError("macro modules hold exactly one unit")


@dataclass(frozen=True)
class OuterStructure:
    modules: tuple

    def __post_init__(self):
        kinds = [m.kind for m in self.modules]
        if LAYERS not in kinds:
            raise StructureError("structure needs at least one layers module")
        if kinds.count(MACRO) != 1:
            raise StructureError("structure needs exactly one macro module")

    @property
    def macro_index(self) -> int:
        return next(i for i, m in enumerate(self.modules) if m.kind == MACRO)


def parse_structure(text: str) -> OuterStructure:
    """Parse an outer-structure file: one module per line, either
    ``layers <nt1,nt2,...> <min> <max>`` or ``macro <nt>``."""
    modules = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind = fields[0]
        if kind == LAYERS:
            if len(fields) != 4:
                raise StructureError(
                    f"line {line_no}: expected 'layers <symbols> <min> <max>'"
                )
            symbols = tuple(s for s in fields[1].split(",") if s)
            try:
                lo, hi = int(fields[2]), int(fields[3])
            except ValueError:
                raise StructureError(f"line {line_no}: unit bounds must be integers") from None
            modules.append(ModuleSpec(symbols, lo, hi, LAYERS))
        elif kind == MACRO:
            if len(fields) != 2:
                raise StructureError(f"line {line_no}: expected 'macro <symbol>'")
            modules.append(ModuleSpec((fields[1],), 1, 1, MACRO))
        else:
            raise StructureError(f"line {line_no}: unknown module kind {kind!r}")
    if not modules:
        raise StructureError("structure text defines no modules")
    return OuterStructure(tuple(modules))


def load_structure(path) -> OuterStructure:
    return parse_structure(Path(path).read_text(encoding="utf-8"))


@dataclass
class ExpansionGene:
    """One expansion decision: which alternative, plus the numeric values for
    every parameter that alternative carries (flattened, in symbol order)."""

    choice: int
    values: list = field(default_factory=list)

    def clone(self) -> "ExpansionGene":
        return ExpansionGene(self.choice, list(self.values))


@dataclass
class UnitGenotype:
    start_symbol: str
    genes: dict = field(default_factory=dict)  # nonterminal -> [ExpansionGene]
    inputs: list = field(default_factory=list)  # negative offsets to earlier layers

    def clone(self) -> "UnitGenotype":
        return UnitGenotype(
            start_symbol=self.start_symbol,
            genes={nt: [g.clone() for g in gs] for nt, gs in self.genes.items()},
            inputs=list(self.inputs),
        )

    def gene_count(self) -> int:
        return sum(len(gs) for gs in self.genes.values())


@dataclass
class Individual:
    modules: list  # aligned with OuterStructure.modules; each a [UnitGenotype]
    train_budget: Budget
    fitness: Optional[float] = None
    metrics: Optional[FitnessRecord] = None
    id: int = -1
    parent_id: Optional[int] = None
    eval_key: Optional[tuple] = None

    def clone(self) -> "Individual":
        return Individual(
            modules=[[u.clone() for u in units] for units in self.modules],
            train_budget=self.train_budget,
            fitness=self.fitness,
            metrics=copy.copy(self.metrics),
            id=self.id,
            parent_id=self.parent_id,
            eval_key=self.eval_key,
        )

    def layer_units(self, structure: OuterStructure) -> list:
        """All layer units in network order as (module_index, unit_index)."""
        out = []
        for m, spec in enumerate(structure.modules):
            if spec.kind == LAYERS:
                out.extend((m, u) for u in range(len(self.modules[m])))
        return out

    def to_doc(self) -> dict:
        return {
            "modules": [
                [
                    {
                        "start_symbol": u.start_symbol,
                        "genes": {
                            nt: [{"choice": g.choice, "values": g.values} for g in gs]
                            for nt, gs in u.genes.items()
                        },
                        "inputs": u.inputs,
                    }
                    for u in units
                ]
                for units in self.modules
            ],
            "train_budget": self.train_budget.to_doc(),
            "fitness": self.fitness,
            "metrics": self.metrics.to_doc() if self.metrics is not None else None,
            "id": self.id,
            "parent_id": self.parent_id,
            "eval_key": list(self.eval_key) if self.eval_key is not None else None,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Individual":
        modules = [
            [
                UnitGenotype(
                    start_symbol=u["start_symbol"],
                    genes={
                        nt: [ExpansionGene(g["choice"], list(g["values"])) for g in gs]
                        for nt, gs in u["genes"].items()
                    },
                    inputs=list(u["inputs"]),
                )
                for u in units
            ]
            for units in doc["modules"]
        ]
        metrics = doc.get("metrics")
        eval_key = doc.get("eval_key")
        return cls(
            modules=modules,
            train_budget=Budget.from_doc(doc["train_budget"]),
            fitness=doc.get("fitness"),
            metrics=FitnessRecord.from_doc(metrics) if metrics is not None else None,
            id=doc.get("id", -1),
            parent_id=doc.get("parent_id"),
            eval_key=tuple(eval_key) if eval_key is not None else None,
        )


@dataclass
class LayerDescriptor:
    attributes: dict  # key -> string value, in decode order
    inputs: list  # absolute layer indices; -1 is the network input


@dataclass
class LearningDescriptor:
    attributes: dict


@dataclass
class Phenotype:
    layers: list
    learning: LearningDescriptor


def sample_values(spec: ParameterSpec, rng: np.random.Generator) -> list:
    """Uniform values for one parameter spec (integers on the closed range)."""
    if spec.kind == INTEGER:
        return [int(v) for v in rng.integers(spec.minimum, spec.maximum + 1, size=spec.count)]
    return [float(v) for v in rng.uniform(spec.minimum, spec.maximum, size=spec.count)]


def sample_gene(grammar: Grammar, nonterminal: str, rng: np.random.Generator) -> ExpansionGene:
    alternatives = grammar.alternatives(nonterminal)
    choice = int(rng.integers(len(alternatives)))
    values = []
    for symbol in alternatives[choice]:
        if isinstance(symbol, Parameter):
            values.extend(sample_values(symbol.spec, rng))
    return ExpansionGene(choice, values)


def _grow(unit: UnitGenotype, grammar: Grammar, nonterminal: str, rng, depth: int):
    if depth > MAX_DERIVATION_DEPTH:
        raise DecodeError(
            f"derivation of <{unit.start_symbol}> exceeded depth {MAX_DERIVATION_DEPTH}"
        )
    gene = sample_gene(grammar, nonterminal, rng)
    unit.genes.setdefault(nonterminal, []).append(gene)
    for symbol in grammar.alternatives(nonterminal)[gene.choice]:
        if isinstance(symbol, NonterminalRef):
            _grow(unit, grammar, symbol.name, rng, depth + 1)


def random_unit(grammar: Grammar, start_symbol: str, rng: np.random.Generator) -> UnitGenotype:
    """Sample a complete derivation of `start_symbol` as a fresh unit."""
    if start_symbol not in grammar:
        raise GrammarError(f"grammar has no rule <{start_symbol}>")
    unit = UnitGenotype(start_symbol=start_symbol, inputs=[-1])
    _grow(unit, grammar, start_symbol, rng, depth=0)
    return unit


def random_individual(
    grammar: Grammar,
    structure: OuterStructure,
    default_budget: Budget,
    rng: np.random.Generator,
) -> Individual:
    """Sample an individual: unit counts uniform within each module's bounds,
    every unit a fresh random derivation, budget set to the default."""
    problems = _validate_for_sampling(grammar, structure)
    if problems:
        raise GrammarError("; ".join(problems))
    modules = []
    for spec in structure.modules:
        count = int(rng.integers(spec.min_units, spec.max_units + 1))
        units = []
        for _ in range(count):
            start = spec.start_symbols[int(rng.integers(len(spec.start_symbols)))]
            unit = random_unit(grammar, start, rng)
            if spec.kind == MACRO:
                unit.inputs = []
            units.append(unit)
        modules.append(units)
    return Individual(modules=modules, train_budget=default_budget)


def _validate_for_sampling(grammar: Grammar, structure: OuterStructure) -> list:
    from .grammar import validate

    return validate(grammar, structure)


class _GeneCursor:
    """Sequential per-nonterminal gene consumption with sample-on-miss repair."""

    def __init__(self, unit: UnitGenotype, grammar: Grammar, rng):
        self.unit = unit
        self.grammar = grammar
        self._rng = rng
        self.positions: dict = {}
        self.repaired = False

    def rng(self):
        if self._rng is None:
            # Deterministic fallback so decoding is a pure function even when
            # callers do not thread a generator through.
            self._rng = np.random.default_rng(0)
        return self._rng

    def next_gene(self, nonterminal: str) -> tuple:
        pos = self.positions.get(nonterminal, 0)
        genes = self.unit.genes.setdefault(nonterminal, [])
        if pos >= len(genes):
            genes.append(sample_gene(self.grammar, nonterminal, self.rng()))
            self.repaired = True
        self.positions[nonterminal] = pos + 1
        return genes[pos], pos


@dataclass
class TraceNode:
    """One expansion in a decoded derivation; children in symbol order."""

    nonterminal: str
    gene_index: int
    children: list = field(default_factory=list)


def _derive(
    cursor: _GeneCursor,
    nonterminal: str,
    attributes: dict,
    depth: int,
) -> TraceNode:
    if depth > MAX_DERIVATION_DEPTH:
        raise DecodeError(
            f"derivation of <{cursor.unit.start_symbol}> exceeded depth {MAX_DERIVATION_DEPTH}"
        )
    gene, gene_index = cursor.next_gene(nonterminal)
    alternatives = cursor.grammar.alternatives(nonterminal)
    if not 0 <= gene.choice < len(alternatives):
        raise DecodeError(
            f"gene for <{nonterminal}> selects alternative {gene.choice} "
            f"but the rule has {len(alternatives)}"
        )
    node = TraceNode(nonterminal, gene_index)
    alternative = alternatives[gene.choice]
    expected = sum(s.spec.count for s in alternative if isinstance(s, Parameter))
    if len(gene.values) != expected:
        raise DecodeError(
            f"gene for <{nonterminal}> carries {len(gene.values)} values, "
            f"alternative {gene.choice} needs {expected}"
        )
    cursor_values = iter(gene.values)
    for symbol in alternative:
        if isinstance(symbol, NonterminalRef):
            node.children.append(_derive(cursor, symbol.name, attributes, depth + 1))
        elif isinstance(symbol, TerminalAttribute):
            _put_attribute(attributes, symbol.key, symbol.value, nonterminal)
        else:
            spec = symbol.spec
            values = [next(cursor_values) for _ in range(spec.count)]
            _check_bounds(spec, values, nonterminal)
            rendered = " ".join(_render_value(v, spec.kind) for v in values)
            _put_attribute(attributes, spec.name, rendered, nonterminal)
    return node


def _render_value(value, kind: str) -> str:
    if kind == INTEGER:
        return str(int(value))
    return repr(float(value))


def _put_attribute(attributes: dict, key: str, value: str, nonterminal: str):
    if key in attributes:
        raise DecodeError(f"duplicate attribute {key!r} while expanding <{nonterminal}>")
    attributes[key] = value


def _check_bounds(spec: ParameterSpec, values, nonterminal: str):
    for v in values:
        if not spec.minimum <= v <= spec.maximum:
            raise DecodeError(
                f"value {v} for {spec.name!r} in <{nonterminal}> is outside "
                f"[{spec.minimum}, {spec.maximum}]"
            )
        if spec.kind == INTEGER and v != int(v):
            raise DecodeError(f"value {v} for integer parameter {spec.name!r} is not integral")


def decode_unit(unit: UnitGenotype, grammar: Grammar, rng=None) -> tuple:
    """Decode one unit to (attributes, trace root). Repairs are written back."""
    cursor = _GeneCursor(unit, grammar, rng)
    attributes: dict = {}
    root = _derive(cursor, unit.start_symbol, attributes, depth=0)
    return attributes, root


def resolve_inputs(offsets: list, layer_index: int) -> list:
    """Map a unit's negative offsets to absolute indices, clamping anything
    reaching past the first layer onto the network input (-1)."""
    resolved = []
    for offset in offsets:
        absolute = max(-1, layer_index + offset)
        if absolute >= layer_index:
            absolute = layer_index - 1  # defensive: inputs must be earlier
        if absolute not in resolved:
            resolved.append(absolute)
    return resolved or [max(-1, layer_index - 1)]


def decode(individual: Individual, grammar: Grammar, rng=None) -> Phenotype:
    """Map a genotype to its phenotype.

    Each unit's start symbol is expanded depth first, consuming one gene per
    nonterminal occurrence in order. Missing genes are sampled and recorded
    onto the genotype (never deleted), so re-decoding a repaired individual
    is gene-identical. Layer units become LayerDescriptors with connectivity
    offsets resolved to absolute indices; the macro unit becomes the
    LearningDescriptor.
    """
    layers = []
    learning = None
    layer_index = 0
    for units in individual.modules:
        for unit in units:
            attributes, _ = decode_unit(unit, grammar, rng)
            if unit.inputs:
                layers.append(
                    LayerDescriptor(
                        attributes=attributes,
                        inputs=resolve_inputs(unit.inputs, layer_index),
                    )
                )
                layer_index += 1
            else:
                if learning is not None:
                    raise DecodeError("individual has more than one learning unit")
                learning = LearningDescriptor(attributes=attributes)
    if learning is None:
        raise DecodeError("individual has no learning unit")
    return Phenotype(layers=layers, learning=learning)


def phenotype_to_text(phenotype: Phenotype) -> str:
    """Render a phenotype one layer per line, `key:value` pairs in decode
    order followed by the input list, then the learning line."""
    if not phenotype.layers:
        raise DecodeError("phenotype must contain at least one layer")
    lines = []
    for layer in phenotype.layers:
        parts = [f"{k}:{v}" for k, v in layer.attributes.items()]
        parts.append("input:" + ",".join(str(i) for i in layer.inputs))
        lines.append(" ".join(parts))
    lines.append(" ".join(f"{k}:{v}" for k, v in phenotype.learning.attributes.items()))
    return "\n".join(lines) + "\n"


def phenotype_from_text(text: str) -> Phenotype:
    """Inverse of phenotype_to_text. Bare tokens (no ':') extend the value of
    the preceding key, which round-trips multi-value parameters."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DecodeError("phenotype text needs at least one layer and a learning line")
    layers = []
    for line in lines[:-1]:
        attributes, extras = _parse_attribute_line(line)
        inputs_text = attributes.pop("input", None)
        if inputs_text is None:
            raise DecodeError(f"layer line missing input list: {line!r}")
        if extras:
            raise DecodeError(f"stray tokens {extras} in line {line!r}")
        inputs = [int(x) for x in inputs_text.split(",")]
        layers.append(LayerDescriptor(attributes=attributes, inputs=inputs))
    attributes, extras = _parse_attribute_line(lines[-1])
    if extras:
        raise DecodeError(f"stray tokens {extras} in learning line")
    return Phenotype(layers=layers, learning=LearningDescriptor(attributes=attributes))


def _parse_attribute_line(line: str) -> tuple:
    attributes: dict = {}
    extras = []
    last_key = None
    for token in line.split():
        if ":" in token:
            key, _, value = token.partition(":")
            attributes[key] = value
            last_key = key
        elif last_key is not None:
            attributes[last_key] += " " + token
        else:
            extras.append(token)
    return attributes, extras
