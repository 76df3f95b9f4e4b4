"""Mutation operators over individuals, including training-budget growth.

Structural operators edit the outer level (add/remove/duplicate units),
inner-level mutation re-picks expansion choices or resamples parameter
values, connectivity operators add/remove layer inputs, and the budget
operator grows an individual's training allowance. Any structural,
inner-level, or connectivity change resets the offspring's budget to the
default so new genotypes are not trained longer than necessary; the budget
operator only applies when nothing else fired.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Budget
from .genotype import (
    Individual,
    OuterStructure,
    LAYERS,
    decode,
    decode_unit,
    random_unit,
    sample_values,
)
from .grammar import Grammar, Parameter

MAX_MUTATION_ATTEMPTS = 100


class VariationError(RuntimeError):
    """Raised when no mutation operator can be applied."""


@dataclass(frozen=True)
class MutationRates:
    add_layer: float = 0.25
    remove_layer: float = 0.25
    dsge: float = 0.15
    add_input: float = 0.0
    remove_input: float = 0.0
    train_time: float = 0.20
    duplicate_fraction: float = 0.5

    def __post_init__(self):
        for name in (
            "add_layer",
            "remove_layer",
            "dsge",
            "add_input",
            "remove_input",
            "train_time",
            "duplicate_fraction",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"rate {name} must be in [0, 1], got {value}")


def _layer_positions(individual: Individual) -> list:
    """(module_index, unit_index) for every layer unit, in network order.

    Layer units carry a nonempty input list; the macro unit's is empty.
    """
    positions = []
    for m, units in enumerate(individual.modules):
        for u, unit in enumerate(units):
            if unit.inputs:
                positions.append((m, u))
    return positions


def add_layer(
    individual: Individual,
    module_index: int,
    grammar: Grammar,
    structure: OuterStructure,
    rng: np.random.Generator,
    duplicate_fraction: float = 0.5,
) -> bool:
    """Insert a unit (copy of an existing one, or freshly sampled) at a
    uniform position. No-op when the module is at max_units."""
    spec = structure.modules[module_index]
    units = individual.modules[module_index]
    if spec.kind != LAYERS or len(units) >= spec.max_units:
        return False
    if units and rng.random() < duplicate_fraction:
        source = units[int(rng.integers(len(units)))]
        new_unit = source.clone()
    else:
        start = spec.start_symbols[int(rng.integers(len(spec.start_symbols)))]
        new_unit = random_unit(grammar, start, rng)
    position = int(rng.integers(len(units) + 1))
    units.insert(position, new_unit)
    return True


def remove_layer(
    individual: Individual,
    module_index: int,
    structure: OuterStructure,
    rng: np.random.Generator,
) -> bool:
    """Remove a uniformly chosen unit and remap later units' input offsets:
    references to the removed layer clamp to the previous layer. No-op when
    the module is at min_units."""
    spec = structure.modules[module_index]
    units = individual.modules[module_index]
    if spec.kind != LAYERS or len(units) <= spec.min_units or not units:
        return False
    victim_local = int(rng.integers(len(units)))
    positions = _layer_positions(individual)
    victim_global = positions.index((module_index, victim_local))
    later_units = [individual.modules[m][u] for m, u in positions[victim_global + 1 :]]
    del units[victim_local]

    # Later layers sit one slot earlier now; keep each input aimed at the
    # same layer, clamping references to the removed one onto the previous.
    for j, unit in enumerate(later_units, start=victim_global + 1):
        remapped = []
        for offset in unit.inputs:
            target = j + offset
            if target == victim_global:
                new_offset = -1
            elif target < victim_global:
                new_offset = offset + 1
            else:
                new_offset = offset
            if new_offset not in remapped:
                remapped.append(new_offset)
        unit.inputs = remapped or [-1]
    return True


def _trace_candidates(individual: Individual, grammar: Grammar, rng) -> list:
    """Every expansion in the individual's derivation as (unit, node)."""
    candidates = []
    for units in individual.modules:
        for unit in units:
            _, root = decode_unit(unit, grammar, rng)
            stack = [root]
            while stack:
                node = stack.pop()
                candidates.append((unit, node))
                stack.extend(node.children)
    return candidates


def _subtree_gene_slots(node) -> list:
    """(nonterminal, gene_index) for every expansion strictly below `node`."""
    slots = []
    stack = list(node.children)
    while stack:
        child = stack.pop()
        slots.append((child.nonterminal, child.gene_index))
        stack.extend(child.children)
    return slots


def _resample_values_for(alternative, rng) -> list:
    values = []
    for symbol in alternative:
        if isinstance(symbol, Parameter):
            values.extend(sample_values(symbol.spec, rng))
    return values


def _mutate_at(candidates, grammar, rng) -> bool:
    """Mutate one gene among (unit, trace node) candidates: re-pick its
    alternative (dropping genes the old alternative's nonterminals had
    introduced) or resample one of its parameter values. Genes on
    single-alternative, parameterless rules are skipped for another."""
    if not candidates:
        return False
    for pick in rng.permutation(len(candidates)):
        unit, node = candidates[int(pick)]
        alternatives = grammar.alternatives(node.nonterminal)
        gene = unit.genes[node.nonterminal][node.gene_index]
        can_choice = len(alternatives) > 1
        can_value = len(gene.values) > 0
        if not can_choice and not can_value:
            continue
        if can_choice and (not can_value or rng.random() < 0.5):
            others = [i for i in range(len(alternatives)) if i != gene.choice]
            new_choice = int(others[int(rng.integers(len(others)))])
            for nt, index in sorted(_subtree_gene_slots(node), key=lambda s: -s[1]):
                del unit.genes[nt][index]
            gene.choice = new_choice
            gene.values = _resample_values_for(alternatives[new_choice], rng)
        else:
            position = int(rng.integers(len(gene.values)))
            spec = _spec_at(alternatives[gene.choice], position)
            gene.values[position] = sample_values(spec, rng)[0]
        return True
    return False


def dsge_mutate(individual: Individual, grammar: Grammar, rng: np.random.Generator) -> bool:
    """Mutate one expansion gene picked uniformly over the whole individual."""
    return _mutate_at(_trace_candidates(individual, grammar, rng), grammar, rng)


def mutate_unit_gene(unit, grammar: Grammar, rng: np.random.Generator) -> bool:
    """Mutate one expansion gene within a single unit's derivation."""
    _, root = decode_unit(unit, grammar, rng)
    candidates = []
    stack = [root]
    while stack:
        node = stack.pop()
        candidates.append((unit, node))
        stack.extend(node.children)
    return _mutate_at(candidates, grammar, rng)


def _spec_at(alternative, flat_position: int):
    consumed = 0
    for symbol in alternative:
        if isinstance(symbol, Parameter):
            if flat_position < consumed + symbol.spec.count:
                return symbol.spec
            consumed += symbol.spec.count
    raise IndexError(f"no parameter at flat position {flat_position}")


def add_input(individual: Individual, rng: np.random.Generator) -> bool:
    """Add a not-yet-present earlier-layer offset to a uniformly chosen layer."""
    positions = _layer_positions(individual)
    if not positions:
        return False
    index = int(rng.integers(len(positions)))
    m, u = positions[index]
    unit = individual.modules[m][u]
    candidates = [o for o in range(-index, 0) if o not in unit.inputs]
    if not candidates:
        return False
    unit.inputs.append(int(candidates[int(rng.integers(len(candidates)))]))
    return True


def remove_input(individual: Individual, rng: np.random.Generator) -> bool:
    """Delete one input from a layer that has at least two."""
    positions = _layer_positions(individual)
    eligible = [
        (m, u) for m, u in positions if len(individual.modules[m][u].inputs) >= 2
    ]
    if not eligible:
        return False
    m, u = eligible[int(rng.integers(len(eligible)))]
    unit = individual.modules[m][u]
    del unit.inputs[int(rng.integers(len(unit.inputs)))]
    return True


def mutate(
    parent: Individual,
    grammar: Grammar,
    structure: OuterStructure,
    rates: MutationRates,
    default_budget: Budget,
    rng: np.random.Generator,
) -> Individual:
    """Produce one offspring by applying each operator independently with its
    rate. Structural/inner/connectivity changes reset the budget to the
    default; the budget operator (only when nothing else fired) grows it by
    the default. Operators are resampled until at least one fires."""
    offspring = parent.clone()
    offspring.fitness = None
    offspring.metrics = None
    offspring.eval_key = None
    offspring.id = -1
    offspring.parent_id = parent.id

    for _ in range(MAX_MUTATION_ATTEMPTS):
        structural_fired = False
        for module_index, spec in enumerate(structure.modules):
            if spec.kind != LAYERS:
                continue
            if rng.random() < rates.add_layer:
                structural_fired |= add_layer(
                    offspring, module_index, grammar, structure, rng,
                    duplicate_fraction=rates.duplicate_fraction,
                )
            if rng.random() < rates.remove_layer:
                structural_fired |= remove_layer(offspring, module_index, structure, rng)
        # Inner-level mutation is per unit: every unit (the learning block
        # included) carries its own gene lists and gets its own draw.
        for units in offspring.modules:
            for unit in units:
                if rng.random() < rates.dsge:
                    structural_fired |= mutate_unit_gene(unit, grammar, rng)
        if rng.random() < rates.add_input:
            structural_fired |= add_input(offspring, rng)
        if rng.random() < rates.remove_input:
            structural_fired |= remove_input(offspring, rng)

        if structural_fired:
            offspring.train_budget = default_budget
            break
        if rng.random() < rates.train_time:
            offspring.train_budget = parent.train_budget.extended_by(default_budget)
            break
    else:
        raise VariationError("no applicable operator after resampling")

    decode(offspring, grammar, rng)  # record any repairs onto the genotype
    return offspring
