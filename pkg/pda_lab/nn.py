"""
Desk-scale classifiers (linear, MLP, small CNN) and the SGD optimizer shared by all training strategies.
"""
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import os

import numpy as np

from pda_lab.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    conv2d,
    load_tensor,
    matmul,
    relu,
    reshape,
    save_tensor,
    softmax_logloss,
)
from pda_lab.config import parse_config_lines

import logging
logger = logging.getLogger(__name__)


ARCHITECTURES = ("linear", "mlp", "cnn_small")
HIDDEN_WIDTH = 64
CHECKPOINT_MANIFEST = "manifest.txt"


class Dense:
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {self.name + ".weight": (self.in_features, self.out_features),
                self.name + ".bias": (self.out_features,)}

    def fans(self) -> Tuple[int, int]:
        return self.in_features, self.out_features

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        return matmul(x, params[self.name + ".weight"]) + params[self.name + ".bias"]


class Conv2d:
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.kernel_size
        return {self.name + ".weight": (self.out_channels, self.in_channels, k, k),
                self.name + ".bias": (self.out_channels,)}

    def fans(self) -> Tuple[int, int]:
        area = self.kernel_size ** 2
        return self.in_channels * area, self.out_channels * area

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        out = conv2d(x, params[self.name + ".weight"], self.stride, self.padding)
        return out + reshape(params[self.name + ".bias"], (1, self.out_channels, 1, 1))


class ReLU:
    name = "relu"

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        return relu(x)


class Flatten:
    name = "flatten"

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        return reshape(x, (x.shape[0], -1))


class Model:
    """
    Ordered layer stack plus named parameters θ. :meth:`forward` maps a batch of inputs of shape
    [N, *input_shape] to logits [N, num_classes]; the logits are the representation `z` used by the perturbation
    bound probes.

    :param arch: architecture name
    :param layers: layer descriptors in execution order
    :param input_shape: shape of a single input
    :param num_classes: number of classes m
    :param seed: initialisation seed (recorded in checkpoints)
    """
    def __init__(self, arch: str, layers: List[Any], input_shape: Sequence[int], num_classes: int, seed: int = 0):
        self.arch = arch
        self.layers = layers
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = num_classes
        self.seed = seed
        self.params = dict()  # type: Dict[str, Tensor]
        for layer in layers:
            for name, shape in layer.param_shapes().items():
                self.params[name] = Tensor(np.zeros(shape))

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: Any) -> Tensor:
        x = as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError("shape mismatch: model expects [N, {}], got {}".format(
                ", ".join(str(s) for s in self.input_shape), x.shape))
        for layer in self.layers:
            x = layer.forward(x, self.params)
        return x

    def __call__(self, x: Any) -> Tensor:
        return self.forward(x)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in state:
                raise KeyError("missing parameter '{}'".format(name))
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError("shape mismatch for '{}': {} vs {}".format(name, p.shape, value.shape))
            p.data = value.copy()

    def copy(self) -> "Model":
        clone = Model(self.arch, self.layers, self.input_shape, self.num_classes, self.seed)
        clone.load_state(self.state())
        return clone


def forward(model: Model, x: Any) -> Tensor:
    return model.forward(x)


def _layers_for(arch: str, input_shape: Tuple[int, ...], m: int) -> List[Any]:
    features = int(np.prod(input_shape))
    head = [Flatten()] if len(input_shape) > 1 else []
    if arch == "linear":
        return head + [Dense("dense0", features, m)]
    if arch == "mlp":
        return head + [Dense("dense0", features, HIDDEN_WIDTH), ReLU(),
                       Dense("dense1", HIDDEN_WIDTH, HIDDEN_WIDTH), ReLU(),
                       Dense("dense2", HIDDEN_WIDTH, m)]
    if arch == "cnn_small":
        if len(input_shape) != 3:
            raise ValueError("cnn_small needs [C, H, W] inputs, got {}".format(input_shape))
        c, h, w = input_shape
        conv0 = Conv2d("conv0", c, 8, 3, stride=2, padding=1)
        conv1 = Conv2d("conv1", 8, 16, 3, stride=2, padding=1)
        h_out = conv1.output_size(conv0.output_size(h))
        w_out = conv1.output_size(conv0.output_size(w))
        return [conv0, ReLU(), conv1, ReLU(), Flatten(), Dense("dense0", 16 * h_out * w_out, m)]
    raise ValueError("unknown architecture '{}' (choose from {})".format(arch, ", ".join(ARCHITECTURES)))


def build_model(arch: str, input_shape: Sequence[int], m: int, seed: int = 0, init: str = "uniform") -> Model:
    """
    Build and initialise a classifier.

    Weights are drawn from uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) in layer order from a generator
    seeded with `seed`; biases start at zero.

    :param arch: "linear", "mlp" (2 hidden dense layers of width 64) or "cnn_small" (2 strided 3x3 conv blocks
                 with 8 and 16 filters and a dense head)
    :param input_shape: shape of one input, e.g. (2,) or (1, 16, 16)
    :param m: number of classes (>= 2)
    :param seed: initialisation seed
    :param init: "uniform" or "zeros"
    :return: model
    """
    if m < 2:
        raise ValueError("need at least 2 classes, got {}".format(m))
    if init not in ("uniform", "zeros"):
        raise ValueError("unknown init '{}'".format(init))
    input_shape = tuple(int(s) for s in input_shape)
    model = Model(arch, _layers_for(arch, input_shape, m), input_shape, m, seed)
    if init == "uniform":
        rng = np.random.default_rng(seed)
        for layer in model.layers:
            if not hasattr(layer, "fans"):
                continue
            fan_in, fan_out = layer.fans()
            a = np.sqrt(6. / (fan_in + fan_out))
            weight = model.params[layer.name + ".weight"]
            weight.data = rng.uniform(-a, a, size=weight.shape)
    logger.debug("built {} model: input {}, {} classes, {} parameters".format(arch, input_shape, m,
                                                                              model.parameter_count()))
    return model


def logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for a whole array of inputs, evaluated batch-wise without a tape."""
    out = [model.forward(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.argmax(logits(model, images, batch_size), axis=1)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> Tuple[float, float]:
    """
    :return: mean log-loss and top-1 accuracy
    """
    z = logits(model, images, batch_size)
    loss = softmax_logloss(z, labels).item()
    return loss, float(np.mean(np.argmax(z, axis=1) == np.asarray(labels)))


def loss_and_gradients(model: Model, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean log-loss at `x` and its gradient with respect to every parameter.
    """
    with Tape() as tape:
        tape.watch(*model.parameters())
        loss = softmax_logloss(model.forward(x), y)
        grads = backward(loss)
    return loss.item(), {name: grads[p] for name, p in model.params.items()}


def joint_gradients(model: Model, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """
    Mean log-loss at `x` with its parameter gradients and its input gradient, from one backward sweep.

    :return: loss, gradient per parameter name, array shaped like `x`
    """
    with Tape() as tape:
        xt = Tensor(x)
        tape.watch(xt, *model.parameters())
        loss = softmax_logloss(model.forward(xt), y)
        grads = backward(loss)
    return loss.item(), {name: grads[p] for name, p in model.params.items()}, grads[xt]


class SGD:
    """
    Stochastic gradient descent with optional heavy-ball momentum and no weight decay.
    With momentum μ: v ← μ v + g, θ ← θ − η v; with μ = 0 the update is exactly θ − η g.

    :param learning_rate: step size η
    :param momentum: momentum coefficient μ
    """
    def __init__(self, learning_rate: float = 0.1, momentum: float = 0.):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive, got {}".format(learning_rate))
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1), got {}".format(momentum))
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = dict()  # type: Dict[str, np.ndarray]

    def step(self, model: Model, grads: Mapping[str, np.ndarray]):
        for name, param in model.params.items():
            if name not in grads:
                raise KeyError("missing gradient for parameter '{}'".format(name))
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != param.shape:
                raise ValueError("shape mismatch for gradient '{}': {} vs {}".format(name, g.shape, param.shape))
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            param.data = param.data - self.learning_rate * g


def sgd_step(opt: SGD, model: Model, grads: Mapping[str, np.ndarray]):
    opt.step(model, grads)


def save_checkpoint(model: Model, directory: str, epoch: int = 0, extra: Optional[Mapping[str, object]] = None):
    """
    Write one tensor file per parameter plus `manifest.txt` (architecture, shapes, seed, epoch).
    """
    os.makedirs(directory, exist_ok=True)
    lines = ["arch={}".format(model.arch),
             "input_shape={}".format(",".join(str(s) for s in model.input_shape)),
             "num_classes={}".format(model.num_classes),
             "seed={}".format(model.seed),
             "epoch={}".format(epoch)]
    for key, value in (extra or {}).items():
        lines.append("{}={}".format(key, value))
    for name, p in model.params.items():
        save_tensor(os.path.join(directory, name + ".pdat"), p)
        lines.append("param.{}={}".format(name, ",".join(str(s) for s in p.shape)))
    with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")
    logger.info("saved checkpoint to {}".format(directory))


def read_checkpoint_manifest(directory: str) -> Dict[str, str]:
    path = os.path.join(directory, CHECKPOINT_MANIFEST)
    with open(path, "r") as f:
        return parse_config_lines(f.read().splitlines(), source=path)


def load_checkpoint(directory: str) -> Model:
    manifest = read_checkpoint_manifest(directory)
    input_shape = tuple(int(s) for s in manifest["input_shape"].split(","))
    model = build_model(manifest["arch"], input_shape, int(manifest["num_classes"]),
                        seed=int(manifest.get("seed", 0)), init="zeros")
    model.load_state({name: load_tensor(os.path.join(directory, name + ".pdat")).data for name in model.params})
    return model
