import numpy as np
import pytest

from gramnas.core import Budget
from gramnas.genotype import ExpansionGene, Individual, UnitGenotype, decode, parse_structure
from gramnas.variation import (
    MutationRates,
    VariationError,
    add_input,
    add_layer,
    dsge_mutate,
    mutate,
    remove_input,
    remove_layer,
)


def unit_of(start, genes, inputs=(-1,)):
    return UnitGenotype(
        start,
        {nt: [ExpansionGene(c, list(v)) for c, v in gene_list] for nt, gene_list in genes.items()},
        list(inputs),
    )


def learning_unit():
    return unit_of(
        "learning",
        {"learning": [(2, [100])], "adam": [(0, [0.01, 0.9, 0.9, 1e-5])]},
        inputs=(),
    )


def fc_unit(units=256, inputs=(-1,)):
    return unit_of(
        "fully-connected",
        {"fully-connected": [(0, [units])], "activation": [(1, [])], "bias": [(0, [])]},
        inputs=inputs,
    )


def chain_individual(n_layers, budget=None, inputs_per_layer=None):
    layers = []
    for i in range(n_layers):
        inputs = (-1,) if inputs_per_layer is None else tuple(inputs_per_layer[i])
        layers.append(fc_unit(units=128 + i, inputs=inputs))
    return Individual(
        modules=[
            layers,
            [unit_of("softmax", {"softmax": [(0, [])]})],
            [learning_unit()],
        ],
        train_budget=budget or Budget("epochs", 3),
    )


class TestRates:
    def test_bounds_checked(self):
        with pytest.raises(ValueError):
            MutationRates(add_layer=1.5)


class TestAddLayer:
    def test_noop_at_max_units(self, fc_grammar, rng):
        structure = parse_structure("layers fully-connected 1 2\nlayers softmax 1 1\nmacro learning")
        ind = chain_individual(2)
        assert add_layer(ind, 0, fc_grammar, structure, rng) is False
        assert len(ind.modules[0]) == 2

    def test_duplicate_decodes_identically(self, fc_grammar, fc_structure, rng):
        ind = chain_individual(1)
        assert add_layer(ind, 0, fc_grammar, fc_structure, rng, duplicate_fraction=1.0)
        assert len(ind.modules[0]) == 2
        attrs = [decode_unit_attrs(u, fc_grammar) for u in ind.modules[0]]
        assert attrs[0] == attrs[1]
        # deep copy: mutating one does not touch the other
        ind.modules[0][0].genes["fully-connected"][0].values[0] = 999
        assert decode_unit_attrs(ind.modules[0][0], fc_grammar) != decode_unit_attrs(
            ind.modules[0][1], fc_grammar
        )

    def test_random_unit_uses_module_symbols(self, fc_grammar, fc_structure, rng):
        for _ in range(20):
            ind = chain_individual(1)
            add_layer(ind, 0, fc_grammar, fc_structure, rng, duplicate_fraction=0.0)
            starts = {u.start_symbol for u in ind.modules[0]}
            assert starts <= {"fully-connected", "dropout"}


def decode_unit_attrs(unit, grammar):
    from gramnas.genotype import decode_unit

    return decode_unit(unit.clone(), grammar)[0]


class TestRemoveLayer:
    def test_noop_at_min_units(self, fc_grammar, fc_structure, rng):
        ind = chain_individual(1)
        assert remove_layer(ind, 0, fc_structure, rng) is False

    def test_count_drops_and_offsets_stay_valid(self, fc_grammar, fc_structure, rng):
        for _ in range(30):
            ind = chain_individual(5)
            assert remove_layer(ind, 0, fc_structure, rng)
            assert len(ind.modules[0]) == 4
            phenotype = decode(ind, fc_grammar)
            for index, layer in enumerate(phenotype.layers):
                assert all(-1 <= j < index for j in layer.inputs)

    def test_skip_input_to_removed_layer_clamps_to_previous(self, fc_grammar, fc_structure):
        # layer 3 takes a skip input from layer 1; removing layer 1 must
        # clamp that input onto layer 3's (shifted) previous layer.
        ind = chain_individual(4, inputs_per_layer=[(-1,), (-1,), (-1,), (-1, -2)])
        rng = _forced_choice_rng(1)
        assert remove_layer(ind, 0, fc_structure, rng)
        phenotype = decode(ind, fc_grammar)
        assert phenotype.layers[2].inputs == [1]

    def test_exhaustive_small_cases_decode(self, fc_grammar, fc_structure, rng):
        # oracle: any single removal of any layer with any skip pattern
        # leaves a decodable individual with strictly-earlier inputs
        for victim in range(3):
            for extra in (-2, -3):
                ind = chain_individual(3, inputs_per_layer=[(-1,), (-1,), (-1, extra)])
                forced = _forced_choice_rng(victim)
                assert remove_layer(ind, 0, fc_structure, forced)
                phenotype = decode(ind, fc_grammar)
                for index, layer in enumerate(phenotype.layers):
                    assert all(-1 <= j < index for j in layer.inputs)


class _forced_choice_rng:
    """Stands in for a Generator when the test needs one exact pick."""

    def __init__(self, value):
        self.value = value

    def integers(self, *args, **kwargs):
        return self.value

    def random(self, *args, **kwargs):
        return 0.0


class TestDsgeMutate:
    def test_changes_something(self, fc_grammar, rng):
        ind = chain_individual(3)
        before = ind.to_doc()
        changed = dsge_mutate(ind, fc_grammar, rng)
        assert changed
        assert ind.to_doc() != before

    def test_dropout_rate_resample_stays_in_bounds(self, fc_grammar, rng):
        dropout = unit_of("dropout", {"dropout": [(0, [0.5])]})
        ind = Individual(
            modules=[[dropout], [unit_of("softmax", {"softmax": [(0, [])]})], [learning_unit()]],
            train_budget=Budget("epochs", 3),
        )
        for _ in range(40):
            dsge_mutate(ind, fc_grammar, rng)
            value = ind.modules[0][0].genes["dropout"][0].values[0]
            assert 0.0 <= value <= 0.7

    def test_choice_mutation_moves_to_other_alternative(self, fc_grammar, rng):
        for _ in range(40):
            act = unit_of("activation", {"activation": [(1, [])]})
            ind = Individual(
                modules=[[act], [unit_of("softmax", {"softmax": [(0, [])]})], [learning_unit()]],
                train_budget=Budget("epochs", 3),
            )
            # keep mutating until the activation gene itself is picked
            for _ in range(20):
                if ind.modules[0][0].genes["activation"][0].choice != 1:
                    break
                dsge_mutate(ind, fc_grammar, rng)
            assert ind.modules[0][0].genes["activation"][0].choice in {0, 1, 2}

    def test_single_alternative_parameterless_gene_skipped(self, fc_grammar, rng):
        softmax_only = Individual(
            modules=[
                [unit_of("softmax", {"softmax": [(0, [])]})],
                [unit_of("softmax", {"softmax": [(0, [])]})],
                [learning_unit()],
            ],
            train_budget=Budget("epochs", 3),
        )
        # the only mutatable genes are in the learning unit, so mutation
        # must land there rather than on the softmax genes
        before_softmax = softmax_only.modules[0][0].to_doc() if hasattr(softmax_only.modules[0][0], "to_doc") else None
        assert dsge_mutate(softmax_only, fc_grammar, rng)
        assert softmax_only.modules[0][0].genes["softmax"][0].choice == 0

    def test_choice_change_drops_stale_subtree(self, fc_grammar):
        # forcing the learning gene's choice to flip removes the adam
        # genes and repair later fills the new branch
        ind = Individual(
            modules=[
                [unit_of("softmax", {"softmax": [(0, [])]})],
                [learning_unit()],
            ],
            train_budget=Budget("epochs", 3),
        )
        rng = np.random.default_rng(5)
        for _ in range(200):
            dsge_mutate(ind, fc_grammar, rng)
            learning_gene = ind.modules[1][0].genes["learning"][0]
            if learning_gene.choice != 2:
                break
        assert learning_gene.choice in {0, 1, 2}
        if learning_gene.choice != 2:
            assert ind.modules[1][0].genes.get("adam", []) == []
        decode(ind, fc_grammar, np.random.default_rng(0))


class TestConnectivityOperators:
    def test_single_layer_noops(self, rng):
        ind = chain_individual(0)
        ind.modules[0] = [fc_unit()]
        del ind.modules[0][1:]
        single = Individual(
            modules=[[fc_unit()], [], [learning_unit()]], train_budget=Budget("epochs", 3)
        )
        assert add_input(single, rng) is False
        assert remove_input(single, rng) is False

    def test_add_on_four_layer_chain(self, fc_grammar, rng):
        for _ in range(40):
            ind = chain_individual(3)  # + softmax = 4 layers
            add_input(ind, rng)
            layer_units = [u for units in ind.modules for u in units if u.inputs]
            for index, unit in enumerate(layer_units):
                assert len(set(unit.inputs)) == len(unit.inputs)
                assert all(-max(index, 1) <= o <= -1 for o in unit.inputs)

    def test_remove_leaves_one(self, rng):
        ind = chain_individual(4, inputs_per_layer=[(-1,), (-1,), (-1, -3), (-1,)])
        assert remove_input(ind, rng)
        assert len(ind.modules[0][2].inputs) == 1


class TestMutate:
    def test_train_time_only_adds_default(self, fc_grammar, fc_structure):
        parent = chain_individual(3, budget=Budget("epochs", 3))
        parent.id = 9
        rates = MutationRates(
            add_layer=0, remove_layer=0, dsge=0, add_input=0, remove_input=0, train_time=1.0
        )
        child = mutate(parent, fc_grammar, fc_structure, rates, Budget("epochs", 3), np.random.default_rng(0))
        assert child.train_budget == Budget("epochs", 6)
        assert child.fitness is None
        assert child.parent_id == 9

    def test_structural_resets_budget(self, fc_grammar, fc_structure):
        parent = chain_individual(3, budget=Budget("epochs", 18))
        rates = MutationRates(
            add_layer=1.0, remove_layer=0, dsge=0, add_input=0, remove_input=0, train_time=0
        )
        child = mutate(parent, fc_grammar, fc_structure, rates, Budget("epochs", 6), np.random.default_rng(0))
        assert child.train_budget == Budget("epochs", 6)

    def test_structural_beats_train_time_when_both_fire(self, fc_grammar, fc_structure):
        parent = chain_individual(3, budget=Budget("epochs", 18))
        rates = MutationRates(
            add_layer=1.0, remove_layer=0, dsge=0, add_input=0, remove_input=0, train_time=1.0
        )
        child = mutate(parent, fc_grammar, fc_structure, rates, Budget("epochs", 6), np.random.default_rng(0))
        assert child.train_budget == Budget("epochs", 6)

    def test_all_zero_rates_error(self, fc_grammar, fc_structure):
        parent = chain_individual(2)
        rates = MutationRates(
            add_layer=0, remove_layer=0, dsge=0, add_input=0, remove_input=0, train_time=0
        )
        with pytest.raises(VariationError, match="no applicable operator"):
            mutate(parent, fc_grammar, fc_structure, rates, Budget("epochs", 3), np.random.default_rng(0))

    def test_inapplicable_remove_resamples_to_another_operator(self, fc_grammar):
        structure = parse_structure("layers fully-connected 1 1\nlayers softmax 1 1\nmacro learning")
        parent = chain_individual(1)
        rates = MutationRates(
            add_layer=0, remove_layer=0.99, dsge=0, add_input=0, remove_input=0, train_time=0.5
        )
        child = mutate(parent, fc_grammar, structure, rates, Budget("epochs", 3), np.random.default_rng(1))
        # remove can never apply at min_units, so the budget operator wins
        assert child.train_budget == Budget("epochs", 6)

    def test_parent_untouched(self, fc_grammar, fc_structure, rng, epoch_budget):
        from gramnas.genotype import random_individual

        parent = random_individual(fc_grammar, fc_structure, epoch_budget, rng)
        parent.id = 4
        parent.fitness = 0.5
        before = parent.to_doc()
        for i in range(10):
            mutate(parent, fc_grammar, fc_structure, MutationRates(), epoch_budget, np.random.default_rng(i))
        assert parent.to_doc() == before

    def test_closure_over_many_mutations(self, fc_grammar, fc_structure, epoch_budget):
        from gramnas.genotype import random_individual

        rng = np.random.default_rng(7)
        rates = MutationRates(add_input=0.1, remove_input=0.1)
        parent = random_individual(fc_grammar, fc_structure, epoch_budget, rng)
        parent.id = 0
        for i in range(300):
            child = mutate(parent, fc_grammar, fc_structure, rates, epoch_budget, rng)
            _assert_valid(child, fc_grammar, fc_structure, parent, epoch_budget)
            child.id = i + 1
            parent = child

    def test_budget_rule_across_mutations(self, fc_grammar, fc_structure, epoch_budget):
        from gramnas.genotype import random_individual

        rng = np.random.default_rng(11)
        parent = random_individual(fc_grammar, fc_structure, epoch_budget, rng)
        parent.id = 0
        for _ in range(300):
            child = mutate(parent, fc_grammar, fc_structure, MutationRates(), epoch_budget, rng)
            same_genotype = child.to_doc()["modules"] == parent.to_doc()["modules"]
            if child.train_budget != parent.train_budget:
                if child.train_budget.amount == parent.train_budget.amount + epoch_budget.amount:
                    assert same_genotype  # pure budget growth
                else:
                    assert child.train_budget == epoch_budget  # structural reset
            parent = child


def _assert_valid(child, grammar, structure, parent, default_budget):
    for spec, units in zip(structure.modules, child.modules):
        assert spec.min_units <= len(units) <= spec.max_units
    phenotype = decode(child, grammar, np.random.default_rng(0))
    for index, layer in enumerate(phenotype.layers):
        assert all(-1 <= j < index for j in layer.inputs)
    assert child.fitness is None
    assert child.parent_id == parent.id
