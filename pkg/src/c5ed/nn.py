"""Stateful layers on top of the functional ops, in real-channel and complex flavours.

Layers register their parameters (leaf tensors with ``requires_grad``) and
buffers (running statistics) by attribute assignment, so nested modules can be
walked for optimization, parameter counting and serialization.
"""
from __future__ import annotations

from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .complex import (
    ComplexBNState,
    ComplexKernel,
    ComplexTensor,
    complex_batchnorm,
    complex_concat,
    complex_conv2d,
    complex_conv2d_transpose,
    crelu,
)
from .tensor import BatchNormStats, Tensor, batchnorm2d, concat_channels, conv2d, conv2d_transpose, relu

Features = Union[Tensor, ComplexTensor]

REAL = "real"
COMPLEX = "complex"
MODES = (REAL, COMPLEX)


class Module:
    """Minimal container: tracks child modules and parameters in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers().items():
            yield prefix + name, buf
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def load_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].load_buffer(rest, value)
        else:
            self._set_buffer(head, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, items: Iterable[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def same_padding(k: int, dilation: int) -> int:
    if k % 2 == 0:
        raise ValueError(f"same padding needs an odd kernel size, got {k}")
    return dilation * (k - 1) // 2


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, dilation: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.dilation = cin, cout, k, dilation
        self.padding = same_padding(k, dilation)
        bound = 1.0 / np.sqrt(cin * k * k)
        self.weight = _uniform(rng, bound, (cout, cin, k, k))
        self.bias = _uniform(rng, bound, (cout,))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, dilation=self.dilation, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = same_padding(k, 1)
        bound = 1.0 / np.sqrt(cout * k * k)
        self.weight = _uniform(rng, bound, (cin, cout, k, k))
        self.bias = _uniform(rng, bound, (cout,))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = BatchNormStats.fresh(channels)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.stats, self.training, self.eps, self.momentum)

    def _buffers(self):
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}

    def _set_buffer(self, name, value):
        setattr(self.stats, {"running_mean": "mean", "running_var": "var"}[name], np.array(value))


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class ComplexConv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, dilation: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.dilation = cin, cout, k, dilation
        self.padding = same_padding(k, dilation)
        bound = 1.0 / np.sqrt(2 * cin * k * k)
        self.wr = _uniform(rng, bound, (cout, cin, k, k))
        self.wi = _uniform(rng, bound, (cout, cin, k, k))
        self.bias_re = _uniform(rng, bound, (cout,))
        self.bias_im = _uniform(rng, bound, (cout,))

    @property
    def kernel(self) -> ComplexKernel:
        return ComplexKernel(self.wr, self.wi, self.bias_re, self.bias_im)

    def forward(self, h: ComplexTensor) -> ComplexTensor:
        return complex_conv2d(h, self.kernel, dilation=self.dilation, padding=self.padding)


class ComplexConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = same_padding(k, 1)
        bound = 1.0 / np.sqrt(2 * cout * k * k)
        self.wr = _uniform(rng, bound, (cin, cout, k, k))
        self.wi = _uniform(rng, bound, (cin, cout, k, k))
        self.bias_re = _uniform(rng, bound, (cout,))
        self.bias_im = _uniform(rng, bound, (cout,))

    @property
    def kernel(self) -> ComplexKernel:
        return ComplexKernel(self.wr, self.wi, self.bias_re, self.bias_im)

    def forward(self, h: ComplexTensor) -> ComplexTensor:
        return complex_conv2d_transpose(h, self.kernel, stride=self.stride, padding=self.padding)


class ComplexBatchNorm2d(Module):
    _BUFFERS = ("mean_re", "mean_im", "v_rr", "v_ii", "v_ri")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.state = ComplexBNState(channels, eps=eps, momentum=momentum)
        self._sync_params()

    def _sync_params(self):
        s = self.state
        self.g_rr, self.g_ii, self.g_ri, self.beta_re, self.beta_im = s.parameters()

    def forward(self, h: ComplexTensor) -> ComplexTensor:
        return complex_batchnorm(h, self.state, self.training)

    def _buffers(self):
        return self.state.buffers()

    def _set_buffer(self, name, value):
        if name not in self._BUFFERS:
            raise KeyError(name)
        setattr(self.state, name, np.array(value))


class CReLU(Module):
    def forward(self, h: ComplexTensor) -> ComplexTensor:
        return crelu(h)


# -- mode dispatch ----------------------------------------------------------

def make_conv(mode: str, cin: int, cout: int, k: int, dilation: int = 1, rng=None) -> Module:
    return (Conv2d if mode == REAL else ComplexConv2d)(cin, cout, k, dilation, rng=rng)


def make_conv_transpose(mode: str, cin: int, cout: int, k: int, rng=None) -> Module:
    return (ConvTranspose2d if mode == REAL else ComplexConvTranspose2d)(cin, cout, k, rng=rng)


def make_norm(mode: str, channels: int) -> Module:
    return BatchNorm2d(channels) if mode == REAL else ComplexBatchNorm2d(channels)


def make_act(mode: str) -> Module:
    return ReLU() if mode == REAL else CReLU()


def cat(features: Sequence[Features]) -> Features:
    if isinstance(features[0], ComplexTensor):
        return complex_concat(features)
    return concat_channels(list(features))

