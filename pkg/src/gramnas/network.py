"""Compile decoded phenotypes into trainable networks (numpy forward/backward).

Layers are held in topological order; each layer lists the indices of the
layers feeding it (-1 is the network input). Multi-input layers concatenate
along the feature/channel axis and require exactly matching spatial
dimensions. A flatten step is inserted implicitly wherever a spatial output
feeds a dense layer. Architectures whose shapes do not work out raise
InvalidArchitecture, which evaluation maps to the failure fitness.
"""
from __future__ import annotations

import numpy as np

from .genotype import Phenotype

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
PROB_FLOOR = 1e-12

ACTIVATIONS = ("linear", "relu", "sigmoid", "softmax")


class InvalidArchitecture(ValueError):
    """Raised when a phenotype cannot be realised as a network."""


def glorot_uniform(shape, fan_in, fan_out, rng, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _activate(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        out = np.empty_like(z)
        positive = z >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
        ez = np.exp(z[~positive])
        out[~positive] = ez / (1.0 + ez)
        return out
    if name == "softmax":
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise InvalidArchitecture(f"unknown activation {name!r}")


def _activation_backward(name, z, out, dy):
    if name == "linear":
        return dy
    if name == "relu":
        return dy * (z > 0)
    if name == "sigmoid":
        return dy * out * (1.0 - out)
    if name == "softmax":
        return out * (dy - (dy * out).sum(axis=-1, keepdims=True))
    raise InvalidArchitecture(f"unknown activation {name!r}")


class Layer:
    kind = "?"

    def __init__(self, input_indices):
        self.input_indices = list(input_indices)
        self.grads: dict = {}

    def params(self) -> dict:
        return {}

    def state(self) -> dict:
        """Non-trainable tensors that still define behaviour (e.g. running
        batch-norm estimates)."""
        return {}

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class DenseLayer(Layer):
    kind = "dense"

    def __init__(self, input_indices, in_features, units, activation, bias, rng, dtype):
        super().__init__(input_indices)
        self.units = units
        self.activation = activation
        self.weight = glorot_uniform((in_features, units), in_features, units, rng, dtype)
        self.bias = np.zeros(units, dtype=dtype) if bias else None

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x, training, rng):
        z = x @ self.weight
        if self.bias is not None:
            z = z + self.bias
        out = _activate(self.activation, z)
        self._cache = (x, z, out)
        return out

    def backward(self, dy, from_preactivation=False):
        x, z, out = self._cache
        if from_preactivation:
            dz = dy
        else:
            dz = _activation_backward(self.activation, z, out, dy)
        self.grads = {"weight": x.T @ dz}
        if self.bias is not None:
            self.grads["bias"] = dz.sum(axis=0)
        return dz @ self.weight.T


def _pad_amounts(n, kernel, stride, padding):
    if padding == "valid":
        if n < kernel:
            raise InvalidArchitecture(
                f"valid window of size {kernel} does not fit a dimension of {n}"
            )
        return (n - kernel) // stride + 1, 0, 0
    out = -(-n // stride)  # ceil
    total = max((out - 1) * stride + kernel - n, 0)
    before = total // 2
    return out, before, total - before


def conv_output_size(n, kernel, stride, padding):
    """Spatial output extent: floor((n-k)/s)+1 for valid, ceil(n/s) for same."""
    return _pad_amounts(n, kernel, stride, padding)[0]


def _gather_patches(xp, kernel, stride, oh, ow):
    n, _, _, c = xp.shape
    patches = np.empty((n, oh, ow, kernel, kernel, c), dtype=xp.dtype)
    for i in range(kernel):
        for j in range(kernel):
            patches[:, :, :, i, j, :] = xp[
                :, i : i + stride * oh : stride, j : j + stride * ow : stride, :
            ]
    return patches


def _scatter_patches(dpatches, padded_shape, kernel, stride, oh, ow):
    dxp = np.zeros(padded_shape, dtype=dpatches.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dpatches[
                :, :, :, i, j, :
            ]
    return dxp


class Conv2DLayer(Layer):
    kind = "conv2d"

    def __init__(self, input_indices, in_shape, filters, kernel, stride, padding,
                 activation, bias, rng, dtype):
        super().__init__(input_indices)
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.activation = activation
        h, w, c = in_shape
        fan_in = kernel * kernel * c
        fan_out = kernel * kernel * filters
        self.weight = glorot_uniform((kernel, kernel, c, filters), fan_in, fan_out, rng, dtype)
        self.bias = np.zeros(filters, dtype=dtype) if bias else None
        self.oh, self._ph0, self._ph1 = _pad_amounts(h, kernel, stride, padding)
        self.ow, self._pw0, self._pw1 = _pad_amounts(w, kernel, stride, padding)

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x, training, rng):
        xp = np.pad(x, ((0, 0), (self._ph0, self._ph1), (self._pw0, self._pw1), (0, 0)))
        patches = _gather_patches(xp, self.kernel, self.stride, self.oh, self.ow)
        n = x.shape[0]
        flat = patches.reshape(n * self.oh * self.ow, -1)
        z = flat @ self.weight.reshape(-1, self.filters)
        if self.bias is not None:
            z = z + self.bias
        z = z.reshape(n, self.oh, self.ow, self.filters)
        out = _activate(self.activation, z)
        self._cache = (x.shape, xp.shape, patches, z, out)
        return out

    def backward(self, dy):
        x_shape, xp_shape, patches, z, out = self._cache
        dz = _activation_backward(self.activation, z, out, dy)
        n = x_shape[0]
        dz_flat = dz.reshape(n * self.oh * self.ow, self.filters)
        flat = patches.reshape(n * self.oh * self.ow, -1)
        self.grads = {"weight": (flat.T @ dz_flat).reshape(self.weight.shape)}
        if self.bias is not None:
            self.grads["bias"] = dz_flat.sum(axis=0)
        dpatches = (dz_flat @ self.weight.reshape(-1, self.filters).T).reshape(
            n, self.oh, self.ow, self.kernel, self.kernel, -1
        )
        dxp = _scatter_patches(dpatches, xp_shape, self.kernel, self.stride, self.oh, self.ow)
        h, w = x_shape[1], x_shape[2]
        return dxp[:, self._ph0 : self._ph0 + h, self._pw0 : self._pw0 + w, :]


class PoolLayer(Layer):
    def __init__(self, input_indices, in_shape, kind, kernel, stride, padding):
        super().__init__(input_indices)
        self.kind = kind
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        h, w, _ = in_shape
        self.oh, self._ph0, self._ph1 = _pad_amounts(h, kernel, stride, padding)
        self.ow, self._pw0, self._pw1 = _pad_amounts(w, kernel, stride, padding)

    def _window_counts(self, x_shape, dtype):
        # Number of non-padding cells under each window position; averages
        # divide by this so zero padding never dilutes them.
        ones = np.ones((1, x_shape[1], x_shape[2], 1), dtype=dtype)
        op = np.pad(ones, ((0, 0), (self._ph0, self._ph1), (self._pw0, self._pw1), (0, 0)))
        counts = _gather_patches(op, self.kernel, self.stride, self.oh, self.ow)
        return counts.reshape(1, self.oh, self.ow, -1, 1).sum(axis=3)

    def forward(self, x, training, rng):
        pad_value = -np.inf if self.kind == "pool_max" else 0.0
        xp = np.pad(
            x,
            ((0, 0), (self._ph0, self._ph1), (self._pw0, self._pw1), (0, 0)),
            constant_values=pad_value,
        )
        patches = _gather_patches(xp, self.kernel, self.stride, self.oh, self.ow)
        n, _, _, c = x.shape
        windows = patches.reshape(n, self.oh, self.ow, self.kernel * self.kernel, c)
        if self.kind == "pool_max":
            arg = windows.argmax(axis=3)
            out = np.take_along_axis(windows, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            self._cache = (x.shape, xp.shape, arg, None)
        else:
            counts = self._window_counts(x.shape, x.dtype)
            out = windows.sum(axis=3) / counts
            self._cache = (x.shape, xp.shape, None, counts)
        return out

    def backward(self, dy):
        x_shape, xp_shape, arg, counts = self._cache
        n, _, _, c = x_shape
        dwindows = np.zeros((n, self.oh, self.ow, self.kernel * self.kernel, c), dtype=dy.dtype)
        if self.kind == "pool_max":
            np.put_along_axis(dwindows, arg[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
        else:
            dwindows += (dy / counts)[:, :, :, None, :]
        dpatches = dwindows.reshape(n, self.oh, self.ow, self.kernel, self.kernel, c)
        dxp = _scatter_patches(dpatches, xp_shape, self.kernel, self.stride, self.oh, self.ow)
        h, w = x_shape[1], x_shape[2]
        return dxp[:, self._ph0 : self._ph0 + h, self._pw0 : self._pw0 + w, :]

    def params(self):
        return {}


class BatchNormLayer(Layer):
    kind = "batch_norm"

    def __init__(self, input_indices, channels, dtype):
        super().__init__(input_indices)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training, rng):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (
                BN_MOMENTUM * self.running_mean + (1.0 - BN_MOMENTUM) * mean
            ).astype(x.dtype)
            self.running_var = (
                BN_MOMENTUM * self.running_var + (1.0 - BN_MOMENTUM) * var
            ).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, axes)
        return self.gamma * xhat + self.beta

    def backward(self, dy):
        xhat, inv, axes = self._cache
        m = np.prod([dy.shape[a] for a in axes])
        self.grads = {
            "gamma": (dy * xhat).sum(axis=axes),
            "beta": dy.sum(axis=axes),
        }
        dxhat = dy * self.gamma
        return inv * (
            dxhat
            - dxhat.mean(axis=axes)
            - xhat * (dxhat * xhat).sum(axis=axes) / m
        )


class DropoutLayer(Layer):
    kind = "dropout"

    def __init__(self, input_indices, rate):
        super().__init__(input_indices)
        self.rate = rate

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dy):
        self.grads = {}
        if self._mask is None:
            return dy
        return dy * self._mask


class FlattenLayer(Layer):
    kind = "flatten"

    def forward(self, x, training, rng):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        self.grads = {}
        return dy.reshape(self._shape)


class NetworkModel:
    """Topologically ordered layers plus shape metadata. One model instance
    belongs to one training run at a time (forward caches feed backward)."""

    def __init__(self, layers, input_shape, num_classes, output_index):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.output_index = output_index

    def parameter_arrays(self) -> list:
        """Flat (layer_index, name, array) view over every trainable tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((i, name, arr))
        return out

    def num_parameters(self) -> int:
        return sum(arr.size for _, _, arr in self.parameter_arrays())

    def forward(self, batch, training=False, rng=None):
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ValueError(
                f"batch shape {tuple(batch.shape[1:])} does not match input {self.input_shape}"
            )
        outputs = []
        splits = []
        for layer in self.layers:
            xs = [batch if j == -1 else outputs[j] for j in layer.input_indices]
            if len(xs) == 1:
                x = xs[0]
                splits.append(None)
            else:
                x = np.concatenate(xs, axis=-1)
                splits.append([a.shape[-1] for a in xs])
            outputs.append(layer.forward(x, training, rng))
        self._outputs = outputs
        self._splits = splits
        return outputs[self.output_index]

    def backward(self, dloss_dout, output_preactivation=False):
        """Reverse-mode pass; returns (parameter grads per layer, input grad).

        With output_preactivation, dloss_dout is taken as the gradient at
        the output layer's logits (the fused softmax/cross-entropy route,
        which stays exact even when saturated probabilities underflow).
        """
        if not hasattr(self, "_outputs"):
            raise RuntimeError("backward called without a cached forward pass")
        accum = [None] * len(self.layers)
        accum[self.output_index] = dloss_dout
        d_input = None
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            dy = accum[idx]
            if dy is None:
                dy = np.zeros_like(self._outputs[idx])
            if idx == self.output_index and output_preactivation:
                dx = layer.backward(dy, from_preactivation=True)
            else:
                dx = layer.backward(dy)
            if self._splits[idx] is None:
                pieces = [dx]
            else:
                cuts = np.cumsum(self._splits[idx])[:-1]
                pieces = np.split(dx, cuts, axis=-1)
            for j, piece in zip(layer.input_indices, pieces):
                if j == -1:
                    d_input = piece if d_input is None else d_input + piece
                elif accum[j] is None:
                    accum[j] = piece.copy()
                else:
                    accum[j] += piece
        grads = [layer.grads for layer in self.layers]
        del self._outputs, self._splits
        return grads, d_input

    def snapshot(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in {**layer.params(), **layer.state()}.items():
                out[f"{i}.{name}"] = arr.copy()
        return out

    def load_snapshot(self, snap: dict):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                arr[...] = snap[f"{i}.{name}"]
            for name in layer.state():
                setattr(layer, name, snap[f"{i}.{name}"].copy())


def cross_entropy(probabilities, one_hot_targets):
    """Mean categorical cross-entropy and its gradient w.r.t. probabilities."""
    if probabilities.shape != one_hot_targets.shape:
        raise ValueError(
            f"shape mismatch: {probabilities.shape} vs {one_hot_targets.shape}"
        )
    n = probabilities.shape[0]
    clipped = np.maximum(probabilities, PROB_FLOOR)
    loss = float(-(one_hot_targets * np.log(clipped)).sum() / n)
    grad = -(one_hot_targets / clipped) / n
    return loss, grad


_BOOLEANS = {"True": True, "False": False}

_EXPECTED_KEYS = {
    "dense": {"layer", "act", "num-units", "bias"},
    "dropout": {"layer", "rate"},
    "conv2d": {"layer", "num-filters", "filter-shape", "stride", "padding", "act", "bias"},
    "pool": {"layer", "kernel-size", "stride", "padding"},
    "batch_norm": {"layer"},
}

_KIND_BY_LAYER_ATTR = {
    "fc": "dense",
    "conv": "conv2d",
    "pool-avg": "pool_avg",
    "pool-max": "pool_max",
    "batch-norm": "batch_norm",
    "dropout": "dropout",
    "dropput": "dropout",  # grammar terminal spelling
}


def _require_keys(attributes, kind_key):
    expected = _EXPECTED_KEYS[kind_key]
    actual = set(attributes)
    unknown = actual - expected
    missing = expected - actual
    if unknown:
        raise InvalidArchitecture(f"unknown attribute(s) {sorted(unknown)} on {kind_key} layer")
    if missing:
        raise InvalidArchitecture(f"missing attribute(s) {sorted(missing)} on {kind_key} layer")


def _as_int(attributes, key):
    try:
        return int(attributes[key])
    except ValueError:
        raise InvalidArchitecture(f"attribute {key}={attributes[key]!r} is not an integer") from None


def _as_float(attributes, key):
    try:
        return float(attributes[key])
    except ValueError:
        raise InvalidArchitecture(f"attribute {key}={attributes[key]!r} is not a number") from None


def _as_bool(attributes, key):
    value = attributes[key]
    if value not in _BOOLEANS:
        raise InvalidArchitecture(f"attribute {key}={value!r} is not True/False")
    return _BOOLEANS[value]


def _as_choice(attributes, key, allowed):
    value = attributes[key]
    if value not in allowed:
        raise InvalidArchitecture(f"attribute {key}={value!r} not in {sorted(allowed)}")
    return value


def compile_network(phenotype: Phenotype, input_shape, num_classes, rng, dtype=np.float64):
    """Build a NetworkModel from a phenotype.

    Inserts flatten steps between spatial outputs and dense layers, checks
    multi-input merges (equal spatial dims, channel concatenation), performs
    full shape inference, and initialises weights (Glorot-uniform, zero
    biases). The final layer must be the softmax-activated dense output with
    at least `num_classes` units.
    """
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) not in (1, 3) or any(d <= 0 for d in input_shape):
        raise InvalidArchitecture(f"unsupported input shape {input_shape}")
    if not phenotype.layers:
        raise InvalidArchitecture("phenotype has no layers")

    layers: list = []
    shapes: list = []  # output shape per model layer
    pheno_to_model: dict = {}
    flatten_over: dict = {}

    def shape_of(model_index):
        return input_shape if model_index == -1 else shapes[model_index]

    def flattened(model_index):
        shape = shape_of(model_index)
        if len(shape) == 1:
            return model_index
        if model_index not in flatten_over:
            layers.append(FlattenLayer([model_index]))
            shapes.append((int(np.prod(shape)),))
            flatten_over[model_index] = len(layers) - 1
        return flatten_over[model_index]

    def merged_shape(model_indices, kind):
        in_shapes = [shape_of(i) for i in model_indices]
        ranks = {len(s) for s in in_shapes}
        if len(ranks) != 1:
            raise InvalidArchitecture(
                f"{kind} layer mixes flat and spatial inputs {in_shapes}"
            )
        if ranks == {3}:
            spatial = {s[:2] for s in in_shapes}
            if len(spatial) != 1:
                raise InvalidArchitecture(
                    f"{kind} layer inputs have mismatched spatial dims {in_shapes}"
                )
            h, w = in_shapes[0][:2]
            return (h, w, sum(s[2] for s in in_shapes))
        return (sum(s[0] for s in in_shapes),)

    for pheno_index, descriptor in enumerate(phenotype.layers):
        attributes = descriptor.attributes
        layer_attr = attributes.get("layer")
        if layer_attr is None:
            raise InvalidArchitecture(f"layer {pheno_index} has no 'layer' attribute")
        kind = _KIND_BY_LAYER_ATTR.get(layer_attr)
        if kind is None:
            raise InvalidArchitecture(f"unknown attribute layer:{layer_attr}")

        inputs = [(-1 if j == -1 else pheno_to_model[j]) for j in descriptor.inputs]

        if kind == "dense":
            _require_keys(attributes, "dense")
            inputs = [flattened(j) for j in inputs]
            in_shape = merged_shape(inputs, kind)
            layer = DenseLayer(
                inputs,
                in_features=in_shape[0],
                units=_as_int(attributes, "num-units"),
                activation=_as_choice(attributes, "act", ACTIVATIONS),
                bias=_as_bool(attributes, "bias"),
                rng=rng,
                dtype=dtype,
            )
            out_shape = (layer.units,)
        elif kind == "conv2d":
            _require_keys(attributes, "conv2d")
            in_shape = merged_shape(inputs, kind)
            if len(in_shape) != 3:
                raise InvalidArchitecture("convolution needs a spatial input")
            layer = Conv2DLayer(
                inputs,
                in_shape,
                filters=_as_int(attributes, "num-filters"),
                kernel=_as_int(attributes, "filter-shape"),
                stride=_as_int(attributes, "stride"),
                padding=_as_choice(attributes, "padding", ("same", "valid")),
                activation=_as_choice(attributes, "act", ACTIVATIONS),
                bias=_as_bool(attributes, "bias"),
                rng=rng,
                dtype=dtype,
            )
            out_shape = (layer.oh, layer.ow, layer.filters)
        elif kind in ("pool_avg", "pool_max"):
            _require_keys(attributes, "pool")
            in_shape = merged_shape(inputs, kind)
            if len(in_shape) != 3:
                raise InvalidArchitecture("pooling needs a spatial input")
            layer = PoolLayer(
                inputs,
                in_shape,
                kind,
                kernel=_as_int(attributes, "kernel-size"),
                stride=_as_int(attributes, "stride"),
                padding=_as_choice(attributes, "padding", ("same", "valid")),
            )
            out_shape = (layer.oh, layer.ow, in_shape[2])
        elif kind == "batch_norm":
            _require_keys(attributes, "batch_norm")
            in_shape = merged_shape(inputs, kind)
            layer = BatchNormLayer(inputs, channels=in_shape[-1], dtype=dtype)
            out_shape = in_shape
        else:  # dropout
            _require_keys(attributes, "dropout")
            in_shape = merged_shape(inputs, kind)
            rate = _as_float(attributes, "rate")
            if not 0.0 <= rate < 1.0:
                raise InvalidArchitecture(f"dropout rate {rate} outside [0, 1)")
            layer = DropoutLayer(inputs, rate)
            out_shape = in_shape

        if any(d <= 0 for d in out_shape):
            raise InvalidArchitecture(
                f"layer {pheno_index} produces nonpositive dimensions {out_shape}"
            )
        layers.append(layer)
        shapes.append(out_shape)
        pheno_to_model[pheno_index] = len(layers) - 1

    output_index = pheno_to_model[len(phenotype.layers) - 1]
    last = layers[output_index]
    if last.kind != "dense" or last.activation != "softmax":
        raise InvalidArchitecture("output layer must be a softmax-activated dense layer")
    if last.units < num_classes:
        raise InvalidArchitecture(
            f"output layer has {last.units} units for {num_classes} classes"
        )
    return NetworkModel(layers, input_shape, num_classes, output_index)
