"""Layer objects shared by the classifier zoo and the perturbation generator.

A layer owns named parameter tensors (plus running-statistic buffers for
batch normalization) and exposes ``forward(x, train)``. Parameter and buffer
names are flat dotted paths so models serialize as one name -> array mapping.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Layer:
    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, train: bool) -> Tensor:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, pad: int = 1):
        fan_in = in_ch * k * k
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride, self.pad = stride, pad

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, train):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Deconv(Layer):
    def __init__(self, rng, in_ch, out_ch, k=3, stride=2, pad=1, output_pad=0):
        fan_in = in_ch * k * k
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (in_ch, out_ch, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride, self.pad, self.output_pad = stride, pad, output_pad

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, train):
        return ad.deconv2d(x, self.w, self.b, stride=self.stride, pad=self.pad, output_pad=self.output_pad)


class BatchNorm(Layer):
    """Channel normalization; ``track=False`` always uses current statistics.

    Untracked mode is for the generator, which runs single samples: its batch
    statistics are the sample's own, so train and eval coincide and no running
    buffers exist.
    """

    def __init__(self, ch: int, track: bool = True, momentum: float = 0.9):
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.momentum = momentum
        self.state = {"mean": np.zeros(ch, dtype=np.float32), "var": np.ones(ch, dtype=np.float32)} if track else None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        if self.state is None:
            return {}
        return {"running_mean": self.state["mean"], "running_var": self.state["var"]}

    def forward(self, x, train):
        training = train or self.state is None
        return ad.batchnorm2d(
            x, self.gamma, self.beta, training=training, state=self.state, momentum=self.momentum
        )


class FeatureNorm(Layer):
    def __init__(self, features: int):
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, train):
        return ad.feature_norm(x, self.gamma, self.beta)


class Linear(Layer):
    def __init__(self, rng, in_f: int, out_f: int):
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_f), (out_f, in_f)), requires_grad=True)
        self.b = Tensor(np.zeros(out_f), requires_grad=True)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, train):
        return ad.fully_connected(x, self.w, self.b)


class ReLU(Layer):
    def __init__(self, tap: bool = False):
        self.tap = tap  # marked activations are collectable by attacks
        self.taps: list | None = None

    def forward(self, x, train):
        out = ad.relu(x)
        if self.tap and self.taps is not None:
            self.taps.append(out)
        return out


class Flatten(Layer):
    def forward(self, x, train):
        n = x.shape[0]
        return ad.reshape(x, (n, x.size // n))


class Residual(Layer):
    """Two conv+bn stages with an identity skip; channel count is preserved."""

    def __init__(self, rng, ch: int):
        self.conv1 = Conv(rng, ch, ch)
        self.bn1 = BatchNorm(ch)
        self.relu1 = ReLU(tap=True)
        self.conv2 = Conv(rng, ch, ch)
        self.bn2 = BatchNorm(ch)
        self.relu2 = ReLU(tap=True)

    def _children(self):
        return {
            "conv1": self.conv1,
            "bn1": self.bn1,
            "relu1": self.relu1,
            "conv2": self.conv2,
            "bn2": self.bn2,
            "relu2": self.relu2,
        }

    def params(self):
        out = {}
        for name, child in self._children().items():
            for pname, p in child.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def buffers(self):
        out = {}
        for name, child in self._children().items():
            for bname, b in child.buffers().items():
                out[f"{name}.{bname}"] = b
        return out

    def forward(self, x, train):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        return self.relu2.forward(ad.add(h, x), train)


class Stack:
    """Named sequence of layers with flat parameter/buffer naming."""

    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = layers

    def forward(self, x: Tensor, train: bool) -> Tensor:
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers:
            for pname, p in layer.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            for bname, b in layer.buffers().items():
                out[f"{name}.{bname}"] = b
        return out

    def relu_layers(self) -> list[ReLU]:
        found = []
        for _, layer in self.layers:
            if isinstance(layer, ReLU) and layer.tap:
                found.append(layer)
            if isinstance(layer, Residual):
                found.extend([layer.relu1, layer.relu2])
        return found

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params().items()}
        out.update(self.buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        buffers = self.buffers()
        expected = set(params) | set(buffers)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.ascontiguousarray(state[k], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
        for k, b in buffers.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != b.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {b.shape}")
            b[...] = arr
