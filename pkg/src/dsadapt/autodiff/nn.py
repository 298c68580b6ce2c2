"""Layer objects holding parameters, built on the functional ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, flatten, get_default_dtype, reshape


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


def _zeros(n: int) -> np.ndarray:
    return np.zeros(n, dtype=get_default_dtype())


class Module:
    training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def children(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = Tensor(_kaiming_uniform(rng, (dout, din), din), requires_grad=True)
        self.bias = Tensor(_zeros(dout), requires_grad=True)

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng: np.random.Generator):
        fan_in = cin * k * k
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(_zeros(cout), requires_grad=True)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng: np.random.Generator):
        # fan-in of the equivalent forward convolution
        fan_in = cout * k * k
        self.weight = Tensor(_kaiming_uniform(rng, (cin, cout, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(_zeros(cout), requires_grad=True)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        dt = get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training=self.training)


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)


class Tanh(Module):
    def forward(self, x):
        return ops.tanh(x)


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int | None = None):
        self.kernel, self.stride = kernel, stride

    def forward(self, x):
        return ops.maxpool2d(x, self.kernel, self.stride)


class AdaptiveMaxPool2d(Module):
    def __init__(self, out_h: int, out_w: int):
        self.out_h, self.out_w = out_h, out_w

    def forward(self, x):
        return ops.adaptive_maxpool2d(x, self.out_h, self.out_w)


class Flatten(Module):
    def forward(self, x):
        return flatten(x)


class Reshape(Module):
    def __init__(self, *shape: int):
        self.shape = shape

    def forward(self, x):
        return reshape(x, (x.shape[0],) + self.shape)


class Adam:
    """Adaptive moment estimation over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        # dedupe while keeping order; shared modules may list a tensor twice
        seen, unique = set(), []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        self.params = unique
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
