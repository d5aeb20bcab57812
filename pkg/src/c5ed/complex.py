"""Complex-valued layers built from pairs of real tensors.

A complex array is carried as a :class:`ComplexTensor` holding its real and
imaginary parts as two real :class:`~c5ed.tensor.Tensor` objects, so every
operation here differentiates through the real autodiff core.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, concat_channels, conv2d, conv2d_transpose, relu

__all__ = [
    "ComplexTensor",
    "ComplexKernel",
    "ComplexBNState",
    "complex_conv2d",
    "complex_conv2d_transpose",
    "complex_batchnorm",
    "complex_concat",
    "crelu",
    "whitening_matrix",
]


@dataclass
class ComplexTensor:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real part {self.re.shape} and imaginary part {self.im.shape} differ in shape")

    @classmethod
    def from_numpy(cls, z, requires_grad: bool = False) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(Tensor(z.real, requires_grad), Tensor(np.imag(z), requires_grad))

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re.data, self.im.data)

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.re.detach(), self.im.detach())

    def __add__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(self.re - other.re, self.im - other.im)

    def scale(self, factor: float) -> "ComplexTensor":
        return ComplexTensor(self.re * factor, self.im * factor)


@dataclass
class ComplexKernel:
    """Complex filter ``wr + i*wi`` of shape (Cout, Cin, k, k) with a complex bias."""

    wr: Tensor
    wi: Tensor
    bias_re: Optional[Tensor] = None
    bias_im: Optional[Tensor] = None

    def __post_init__(self):
        if self.wr.shape != self.wi.shape:
            raise ShapeError(f"kernel parts differ in shape: {self.wr.shape} vs {self.wi.shape}")


def complex_conv2d(h: ComplexTensor, kernel: ComplexKernel, dilation: int = 1, padding: int = 0,
                   stride: int = 1) -> ComplexTensor:
    """Complex convolution as four real convolutions.

    ``(wr + i wi) * (a + i b) = (wr*a - wi*b) + i (wi*a + wr*b)``.
    """
    kw = dict(dilation=dilation, padding=padding, stride=stride)
    re = conv2d(h.re, kernel.wr, kernel.bias_re, **kw) - conv2d(h.im, kernel.wi, None, **kw)
    im = conv2d(h.re, kernel.wi, kernel.bias_im, **kw) + conv2d(h.im, kernel.wr, None, **kw)
    return ComplexTensor(re, im)


def complex_conv2d_transpose(h: ComplexTensor, kernel: ComplexKernel, stride: int = 1,
                             padding: int = 0) -> ComplexTensor:
    kw = dict(stride=stride, padding=padding)
    re = conv2d_transpose(h.re, kernel.wr, kernel.bias_re, **kw) - conv2d_transpose(h.im, kernel.wi, None, **kw)
    im = conv2d_transpose(h.re, kernel.wi, kernel.bias_im, **kw) + conv2d_transpose(h.im, kernel.wr, None, **kw)
    return ComplexTensor(re, im)


def complex_concat(inputs: Sequence[ComplexTensor]) -> ComplexTensor:
    return ComplexTensor(concat_channels([z.re for z in inputs]), concat_channels([z.im for z in inputs]))


def crelu(h: ComplexTensor) -> ComplexTensor:
    """ReLU applied separately to the real and imaginary parts; output stays complex."""
    return ComplexTensor(relu(h.re), relu(h.im))


@dataclass
class ComplexBNState:
    """Learnable scale/shift and running statistics for complex batch normalization.

    ``g_rr, g_ii, g_ri`` are the entries of the symmetric 2x2 scale applied to
    the whitened (re, im) vector; ``v_*`` are the running covariance entries.
    """

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    g_rr: Tensor = None
    g_ii: Tensor = None
    g_ri: Tensor = None
    beta_re: Tensor = None
    beta_im: Tensor = None
    mean_re: np.ndarray = field(default=None, repr=False)
    mean_im: np.ndarray = field(default=None, repr=False)
    v_rr: np.ndarray = field(default=None, repr=False)
    v_ii: np.ndarray = field(default=None, repr=False)
    v_ri: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        c = self.channels
        if self.g_rr is None:
            self.g_rr = Tensor(np.full(c, 1.0 / np.sqrt(2.0)), requires_grad=True)
        if self.g_ii is None:
            self.g_ii = Tensor(np.full(c, 1.0 / np.sqrt(2.0)), requires_grad=True)
        if self.g_ri is None:
            self.g_ri = Tensor(np.zeros(c), requires_grad=True)
        if self.beta_re is None:
            self.beta_re = Tensor(np.zeros(c), requires_grad=True)
        if self.beta_im is None:
            self.beta_im = Tensor(np.zeros(c), requires_grad=True)
        if self.mean_re is None:
            self.mean_re = np.zeros(c, dtype=DTYPE)
            self.mean_im = np.zeros(c, dtype=DTYPE)
            self.v_rr = np.ones(c, dtype=DTYPE)
            self.v_ii = np.ones(c, dtype=DTYPE)
            self.v_ri = np.zeros(c, dtype=DTYPE)

    def set_scale(self, g_rr: float, g_ii: float, g_ri: float) -> None:
        """Fill the 2x2 scale with constant entries (used in tests and probes)."""
        c = self.channels
        self.g_rr = Tensor(np.full(c, g_rr), requires_grad=True)
        self.g_ii = Tensor(np.full(c, g_ii), requires_grad=True)
        self.g_ri = Tensor(np.full(c, g_ri), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.g_rr, self.g_ii, self.g_ri, self.beta_re, self.beta_im]

    def buffers(self) -> dict[str, np.ndarray]:
        return {"mean_re": self.mean_re, "mean_im": self.mean_im,
                "v_rr": self.v_rr, "v_ii": self.v_ii, "v_ri": self.v_ri}


def _inv_sqrt_2x2(v_rr, v_ii, v_ri):
    """Inverse principal square root of [[v_rr, v_ri], [v_ri, v_ii]] in closed form.

    With ``s = sqrt(det)`` and ``t = sqrt(trace + 2s)``, the square root is
    ``(V + sI)/t`` and its inverse ``(adj(V) + sI) / (s t)``.
    Works elementwise on Tensors or ndarrays.
    """
    det = v_rr * v_ii - v_ri * v_ri
    s = det.sqrt() if isinstance(det, Tensor) else np.sqrt(det)
    t2 = v_rr + v_ii + 2.0 * s
    t = t2.sqrt() if isinstance(t2, Tensor) else np.sqrt(t2)
    inv = 1.0 / (s * t)
    return (v_ii + s) * inv, (v_rr + s) * inv, -(v_ri * inv)


def whitening_matrix(v_rr, v_ii, v_ri, eps: float = 0.0) -> np.ndarray:
    """Per-channel 2x2 whitening matrices (C, 2, 2) for the given covariance entries."""
    w_rr, w_ii, w_ri = _inv_sqrt_2x2(np.asarray(v_rr) + eps, np.asarray(v_ii) + eps, np.asarray(v_ri))
    return np.stack([np.stack([w_rr, w_ri], -1), np.stack([w_ri, w_ii], -1)], -2)


def complex_batchnorm(h: ComplexTensor, state: ComplexBNState, training: bool = True) -> ComplexTensor:
    """Whiten each channel's (re, im) distribution, then apply the learnable 2x2 scale and shift.

    In training mode batch statistics over N, H, W are used and the running
    statistics in ``state`` are updated; in eval mode the running ones are used.
    """
    if h.re.ndim != 4:
        raise ShapeError(f"complex_batchnorm expects N x C x H x W parts, got {h.shape}")
    n, c, hh, ww = h.shape
    if c != state.channels:
        raise ShapeError(f"state has {state.channels} channels, input has {c}")
    axes = (0, 2, 3)
    m = n * hh * ww

    def per_channel(a):
        return a.reshape(1, c, 1, 1)

    if training:
        if m < 2:
            raise ShapeError("complex_batchnorm in training mode needs at least 2 values per channel")
        mu_re = h.re.mean(axis=axes, keepdims=True)
        mu_im = h.im.mean(axis=axes, keepdims=True)
        cr = h.re - mu_re
        ci = h.im - mu_im
        v_rr = cr.square().mean(axis=axes, keepdims=True)
        v_ii = ci.square().mean(axis=axes, keepdims=True)
        v_ri = (cr * ci).mean(axis=axes, keepdims=True)
        mom = state.momentum
        unbias = m / (m - 1)
        state.mean_re = (1 - mom) * state.mean_re + mom * mu_re.data.reshape(c)
        state.mean_im = (1 - mom) * state.mean_im + mom * mu_im.data.reshape(c)
        state.v_rr = (1 - mom) * state.v_rr + mom * unbias * v_rr.data.reshape(c)
        state.v_ii = (1 - mom) * state.v_ii + mom * unbias * v_ii.data.reshape(c)
        state.v_ri = (1 - mom) * state.v_ri + mom * unbias * v_ri.data.reshape(c)
    else:
        cr = h.re - Tensor(per_channel(state.mean_re))
        ci = h.im - Tensor(per_channel(state.mean_im))
        v_rr = Tensor(per_channel(state.v_rr))
        v_ii = Tensor(per_channel(state.v_ii))
        v_ri = Tensor(per_channel(state.v_ri))

    w_rr, w_ii, w_ri = _inv_sqrt_2x2(v_rr + state.eps, v_ii + state.eps, v_ri)
    xr = w_rr * cr + w_ri * ci
    xi = w_ri * cr + w_ii * ci

    g_rr, g_ii, g_ri = per_channel(state.g_rr), per_channel(state.g_ii), per_channel(state.g_ri)
    out_re = g_rr * xr + g_ri * xi + per_channel(state.beta_re)
    out_im = g_ri * xr + g_ii * xi + per_channel(state.beta_im)
    return ComplexTensor(out_re, out_im)
