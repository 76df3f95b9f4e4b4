import math

import numpy as np
import pytest

from gramnas.genotype import LayerDescriptor, LearningDescriptor, Phenotype
from gramnas.network import (
    InvalidArchitecture,
    compile_network,
    conv_output_size,
    cross_entropy,
)


def pheno(layers):
    return Phenotype(
        [LayerDescriptor(dict(attrs), list(inputs)) for attrs, inputs in layers],
        LearningDescriptor({}),
    )


def dense_attrs(units, act="relu", bias="True"):
    return {"layer": "fc", "act": act, "num-units": str(units), "bias": bias}


SOFTMAX_10 = {"layer": "fc", "act": "softmax", "num-units": "10", "bias": "True"}


def rng():
    return np.random.default_rng(0)


class TestCompile:
    def test_dense_weight_shapes(self):
        model = compile_network(
            pheno([(dense_attrs(8), [-1]), (SOFTMAX_10, [0])]), (4,), 10, rng()
        )
        dense = model.layers[0]
        assert dense.weight.shape == (4, 8)
        assert dense.bias.shape == (8,)

    def test_conv_same_stride2_halves(self):
        model = compile_network(
            pheno(
                [
                    (
                        {
                            "layer": "conv",
                            "num-filters": "4",
                            "filter-shape": "3",
                            "stride": "2",
                            "padding": "same",
                            "act": "relu",
                            "bias": "True",
                        },
                        [-1],
                    ),
                    (SOFTMAX_10, [0]),
                ]
            ),
            (32, 32, 3),
            10,
            rng(),
        )
        conv = model.layers[0]
        assert (conv.oh, conv.ow) == (16, 16)

    def test_pool_too_large_invalid(self):
        with pytest.raises(InvalidArchitecture):
            compile_network(
                pheno(
                    [
                        (
                            {
                                "layer": "pool-max",
                                "kernel-size": "5",
                                "stride": "3",
                                "padding": "valid",
                            },
                            [-1],
                        ),
                        (SOFTMAX_10, [0]),
                    ]
                ),
                (4, 4, 1),
                10,
                rng(),
            )

    def test_mismatched_spatial_merge_invalid(self):
        conv = {
            "layer": "conv",
            "num-filters": "2",
            "filter-shape": "2",
            "stride": "2",
            "padding": "valid",
            "act": "linear",
            "bias": "True",
        }
        bn = {"layer": "batch-norm"}
        with pytest.raises(InvalidArchitecture, match="spatial"):
            compile_network(
                pheno([(conv, [-1]), (bn, [0, -1]), (SOFTMAX_10, [1])]),
                (6, 6, 1),
                10,
                rng(),
            )

    def test_unknown_attribute_invalid(self):
        bad = dict(dense_attrs(8))
        bad["sparkle"] = "yes"
        with pytest.raises(InvalidArchitecture, match="sparkle"):
            compile_network(pheno([(bad, [-1]), (SOFTMAX_10, [0])]), (4,), 10, rng())

    def test_output_must_be_softmax_dense(self):
        with pytest.raises(InvalidArchitecture, match="softmax"):
            compile_network(pheno([(dense_attrs(8), [-1])]), (4,), 2, rng())

    def test_output_units_must_cover_classes(self):
        small = {"layer": "fc", "act": "softmax", "num-units": "3", "bias": "True"}
        with pytest.raises(InvalidArchitecture, match="classes"):
            compile_network(pheno([(small, [-1])]), (4,), 5, rng())

    def test_flatten_inserted_between_spatial_and_dense(self):
        model = compile_network(pheno([(SOFTMAX_10, [-1])]), (4, 4, 2), 10, rng())
        kinds = [layer.kind for layer in model.layers]
        assert kinds == ["flatten", "dense"]
        assert model.layers[1].weight.shape == (32, 10)

    def test_conv_on_flat_input_invalid(self):
        conv = {
            "layer": "conv",
            "num-filters": "2",
            "filter-shape": "2",
            "stride": "1",
            "padding": "same",
            "act": "linear",
            "bias": "True",
        }
        with pytest.raises(InvalidArchitecture):
            compile_network(pheno([(conv, [-1]), (SOFTMAX_10, [0])]), (4,), 2, rng())


class TestConvForward:
    def test_identity_1x1_filter(self):
        model = compile_network(
            pheno(
                [
                    (
                        {
                            "layer": "conv",
                            "num-filters": "1",
                            "filter-shape": "1",
                            "stride": "1",
                            "padding": "valid",
                            "act": "linear",
                            "bias": "True",
                        },
                        [-1],
                    ),
                    (SOFTMAX_10, [0]),
                ]
            ),
            (5, 5, 1),
            10,
            rng(),
        )
        conv = model.layers[0]
        conv.weight[...] = 1.0
        conv.bias[...] = 0.0
        x = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1)
        model.forward(x)
        np.testing.assert_allclose(model._outputs[0], x)

    def test_all_ones_3x3_window_sums(self):
        expected = _naive_valid_conv_sums(np.arange(1, 17, dtype=np.float64).reshape(4, 4), 3)
        np.testing.assert_array_equal(expected, np.array([[54.0, 63.0], [90.0, 99.0]]))
        model = compile_network(
            pheno(
                [
                    (
                        {
                            "layer": "conv",
                            "num-filters": "1",
                            "filter-shape": "3",
                            "stride": "1",
                            "padding": "valid",
                            "act": "linear",
                            "bias": "True",
                        },
                        [-1],
                    ),
                    (SOFTMAX_10, [0]),
                ]
            ),
            (4, 4, 1),
            10,
            rng(),
        )
        conv = model.layers[0]
        conv.weight[...] = 1.0
        conv.bias[...] = 0.0
        x = np.arange(1, 17, dtype=np.float64).reshape(1, 4, 4, 1)
        model.forward(x)
        np.testing.assert_allclose(model._outputs[0][0, :, :, 0], expected)

    def test_dropout_rate_zero_is_identity(self):
        model = compile_network(
            pheno([({"layer": "dropput", "rate": "0"}, [-1]), (SOFTMAX_10, [0])]),
            (6,),
            10,
            rng(),
        )
        x = np.random.default_rng(4).normal(size=(3, 6))
        for training in (False, True):
            model.forward(x, training=training, rng=np.random.default_rng(1))
            np.testing.assert_array_equal(model._outputs[0], x)


def _naive_valid_conv_sums(image, k):
    h, w = image.shape
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = image[i : i + k, j : j + k].sum()
    return out


class TestConvOutputSizes:
    def test_against_naive_oracle(self):
        for n in range(1, 8):
            for k in range(1, 8):
                for s in range(1, 8):
                    expected = _naive_positions(n, k, s, "valid")
                    if expected == 0:
                        with pytest.raises(InvalidArchitecture):
                            conv_output_size(n, k, s, "valid")
                    else:
                        assert conv_output_size(n, k, s, "valid") == expected
                    assert conv_output_size(n, k, s, "same") == math.ceil(n / s)


def _naive_positions(n, k, s, padding):
    count = 0
    start = 0
    while start + k <= n:
        count += 1
        start += s
    return count


class TestActivations:
    def test_softmax_rows_form_simplex(self):
        model = compile_network(pheno([(SOFTMAX_10, [-1])]), (4,), 10, rng())
        x = np.random.default_rng(8).normal(scale=30.0, size=(16, 4))
        probs = model.forward(x)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(16), atol=1e-9)
        assert (probs >= 0).all()

    def test_batch_norm_standardizes_training_batch(self):
        model = compile_network(
            pheno([({"layer": "batch-norm"}, [-1]), (SOFTMAX_10, [0])]),
            (7,),
            10,
            rng(),
        )
        x = np.random.default_rng(2).normal(loc=3.0, scale=2.5, size=(64, 7))
        model.forward(x, training=True, rng=np.random.default_rng(0))
        normalized = model._outputs[0]
        np.testing.assert_allclose(normalized.mean(axis=0), np.zeros(7), atol=1e-6)
        np.testing.assert_allclose(normalized.var(axis=0), np.ones(7), atol=1e-4)


class TestGradients:
    def _loss(self, model, x, onehot, train=True):
        probs = model.forward(x, training=train, rng=np.random.default_rng(99))
        return cross_entropy(probs, onehot)

    def test_finite_differences_on_mixed_net(self):
        r = np.random.default_rng(3)
        model = compile_network(
            pheno(
                [
                    (
                        {
                            "layer": "conv",
                            "num-filters": "3",
                            "filter-shape": "3",
                            "stride": "1",
                            "padding": "same",
                            "act": "sigmoid",
                            "bias": "True",
                        },
                        [-1],
                    ),
                    ({"layer": "batch-norm"}, [0]),
                    (
                        {
                            "layer": "pool-avg",
                            "kernel-size": "2",
                            "stride": "2",
                            "padding": "same",
                        },
                        [1],
                    ),
                    ({"layer": "dropput", "rate": "0.25"}, [2]),
                    (dense_attrs(5, act="relu"), [3, 0]),
                    ({"layer": "fc", "act": "softmax", "num-units": "3", "bias": "True"}, [4]),
                ]
            ),
            (5, 5, 2),
            3,
            r,
        )
        x = r.normal(size=(4, 5, 5, 2))
        onehot = np.eye(3)[r.integers(0, 3, size=4)]
        _, dprobs = self._loss(model, x, onehot)
        grads, _ = model.backward(dprobs)
        for li, name, arr in model.parameter_arrays():
            analytic = grads[li][name]
            flat = arr.ravel()
            for k in range(flat.size):
                old = flat[k]
                h = 1e-5 * max(1.0, abs(old))
                flat[k] = old + h
                lp, _ = self._loss(model, x, onehot)
                flat[k] = old - h
                lm, _ = self._loss(model, x, onehot)
                flat[k] = old
                numeric = (lp - lm) / (2 * h)
                rel = abs(analytic.ravel()[k] - numeric) / max(
                    abs(analytic.ravel()[k]) + abs(numeric), 1e-6
                )
                assert rel < 1e-4, f"layer {li} {name}[{k}]"

    def test_zero_upstream_gives_zero_gradients(self):
        r = np.random.default_rng(5)
        model = compile_network(
            pheno([(dense_attrs(6), [-1]), (SOFTMAX_10, [0])]), (4,), 10, r
        )
        x = r.normal(size=(3, 4))
        model.forward(x, training=True, rng=r)
        grads, dx = model.backward(np.zeros((3, 10)))
        for li, name, _ in model.parameter_arrays():
            assert not grads[li][name].any()
        assert not dx.any()

    def test_softmax_cross_entropy_identity(self):
        r = np.random.default_rng(6)
        model = compile_network(pheno([(SOFTMAX_10, [-1])]), (4,), 10, r)
        x = r.normal(size=(8, 4))
        probs = model.forward(x, training=True, rng=r)
        onehot = np.eye(10)[r.integers(0, 10, size=8)]
        _, dprobs = cross_entropy(probs, onehot)
        dense = model.layers[0]
        dz = dense._cache[1], dense._cache[2]
        from gramnas.network import _activation_backward

        combined = _activation_backward("softmax", dz[0], dz[1], dprobs)
        np.testing.assert_allclose(combined, (probs - onehot) / 8, atol=1e-12)

    def test_backward_without_forward_raises(self):
        model = compile_network(pheno([(SOFTMAX_10, [-1])]), (4,), 10, rng())
        with pytest.raises(RuntimeError, match="forward"):
            model.backward(np.zeros((1, 10)))


class TestCrossEntropy:
    def test_uniform_prediction(self):
        probs = np.full((4, 10), 0.1)
        onehot = np.eye(10)[[0, 3, 5, 9]]
        loss, _ = cross_entropy(probs, onehot)
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_perfect_prediction(self):
        onehot = np.eye(10)[[2, 7]]
        loss, _ = cross_entropy(onehot.astype(float), onehot)
        assert loss <= 1e-9

    def test_two_row_analytic(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        onehot = np.array([[1.0, 0.0], [1.0, 0.0]])
        loss, _ = cross_entropy(probs, onehot)
        assert loss == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            cross_entropy(np.ones((2, 3)), np.ones((2, 4)))


class TestSnapshot:
    def test_round_trip_restores_outputs(self):
        r = np.random.default_rng(9)
        model = compile_network(
            pheno(
                [
                    (dense_attrs(6), [-1]),
                    ({"layer": "batch-norm"}, [0]),
                    (SOFTMAX_10, [1]),
                ]
            ),
            (4,),
            10,
            r,
        )
        x = r.normal(size=(8, 4))
        snap = model.snapshot()
        before = model.forward(x).copy()
        model.forward(x, training=True, rng=r)  # moves running stats
        model.layers[0].weight += 0.5
        model.load_snapshot(snap)
        np.testing.assert_array_equal(model.forward(x), before)
