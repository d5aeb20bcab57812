"""Fourier-domain simulation: transforms, sampling masks, undersampling and data consistency.

k-space arrays are kept DC-centered: the zero-frequency sample of an H x W
array sits at index ``(H // 2, W // 2)``. Both transforms are unitary, so
:func:`ifft2` is the exact adjoint (and inverse) of :func:`fft2`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .complex import ComplexTensor
from .tensor import ShapeError, Tensor

__all__ = [
    "KSpace",
    "SamplingMask",
    "fft2",
    "ifft2",
    "centered_fft2",
    "centered_ifft2",
    "make_gaussian_mask",
    "stack_masks",
    "default_center_fraction",
    "gaussian_column_weights",
    "undersample",
    "zero_filled",
    "data_consistency",
    "magnitude_normalize",
    "denormalize",
    "kspace_consistency_loss",
]


def centered_fft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT over the last two axes, with DC moved to the center."""
    return np.fft.fftshift(np.fft.fft2(x, norm="ortho"), axes=(-2, -1))


def centered_ifft2(k: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho")


def _linear_complex_op(x: ComplexTensor, forward, adjoint, name: str) -> ComplexTensor:
    z = forward(x.numpy())
    packed = np.stack([z.real, z.imag], axis=-1)

    def _bw(g):
        back = adjoint(g[..., 0] + 1j * g[..., 1])
        return back.real, back.imag

    out = Tensor.from_op(packed, (x.re, x.im), _bw, name)
    return ComplexTensor(out[..., 0], out[..., 1])


def fft2(x: ComplexTensor) -> ComplexTensor:
    """Differentiable unitary 2D Fourier transform of a ComplexTensor (last two axes)."""
    return _linear_complex_op(x, centered_fft2, centered_ifft2, "fft2")


def ifft2(k: ComplexTensor) -> ComplexTensor:
    return _linear_complex_op(k, centered_ifft2, centered_fft2, "ifft2")


@dataclass
class KSpace:
    data: ComplexTensor
    centered: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class SamplingMask:
    """Binary column mask (1 = sampled) replicated over rows.

    ``matrix`` is H x W in the DC-centered layout used by :func:`fft2`, or
    (N, 1, H, W) for a batch with one mask per example.
    """

    matrix: np.ndarray
    reduction_factor: float
    center_fraction: float
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape[-2:]

    @property
    def columns(self) -> np.ndarray:
        return self.matrix[..., 0, :]

    @property
    def center_width(self) -> int:
        return int(np.floor(self.center_fraction * self.matrix.shape[-1]))

    @property
    def sampled_fraction(self) -> float:
        return float(self.matrix.mean())

    @classmethod
    def full(cls, h: int, w: int) -> "SamplingMask":
        return cls(np.ones((h, w)), 1.0, 1.0, 0)

    @classmethod
    def empty(cls, h: int, w: int) -> "SamplingMask":
        return cls(np.zeros((h, w)), float("inf"), 0.0, 0)


def stack_masks(masks: list[SamplingMask]) -> SamplingMask:
    """Combine per-example masks into one (N, 1, H, W) batch mask."""
    first = masks[0]
    matrix = np.stack([m.matrix for m in masks])[:, None]
    return SamplingMask(matrix, first.reduction_factor, first.center_fraction, first.seed)


def center_columns(w: int, count: int) -> np.ndarray:
    start = w // 2 - count // 2
    return np.arange(start, start + count)


_CENTER_FRACTIONS = {4: 1 / 20, 6: 1 / 40, 8: 1 / 80}


def default_center_fraction(reduction: float) -> float:
    """Center-tile width (fraction of W) paired with each reduction factor: 1/20, 1/40, 1/80 for R = 4, 6, 8."""
    if reduction in _CENTER_FRACTIONS:
        return _CENTER_FRACTIONS[reduction]
    return min(1.0, 0.2 / reduction)


def gaussian_column_weights(w: int, sigma: float | None = None) -> np.ndarray:
    """Unnormalized zero-mean Gaussian weight of each column's offset from the DC column."""
    sigma = w / 6.0 if sigma is None else sigma
    offsets = np.arange(w) - w // 2
    return np.exp(-0.5 * (offsets / sigma) ** 2)


def make_gaussian_mask(h: int, w: int, reduction: float, center_fraction: float, seed: int,
                       sigma: float | None = None) -> SamplingMask:
    """1D variable-density column mask with an exact budget of ``floor(w / reduction)`` columns.

    The ``floor(center_fraction * w)`` central columns are always sampled; the
    rest of the budget is drawn without replacement with probability
    proportional to a Gaussian (std ``w / 6`` by default) of the column offset.
    """
    if reduction < 1:
        raise ValueError(f"reduction factor must be >= 1, got {reduction}")
    if not 0 <= center_fraction <= 1:
        raise ValueError(f"center fraction must lie in [0, 1], got {center_fraction}")
    budget = int(np.floor(w / reduction))
    n_center = int(np.floor(center_fraction * w))
    if budget < n_center:
        raise ValueError(f"column budget {budget} (= floor({w}/{reduction})) is smaller than the "
                         f"{n_center}-column center tile")
    cols = np.zeros(w)
    cols[center_columns(w, n_center)] = 1.0
    remaining = budget - n_center
    if remaining:
        rng = np.random.default_rng(seed)
        candidates = np.flatnonzero(cols == 0)
        p = gaussian_column_weights(w, sigma)[candidates]
        chosen = rng.choice(candidates, size=remaining, replace=False, p=p / p.sum())
        cols[chosen] = 1.0
    return SamplingMask(np.tile(cols, (h, 1)), float(reduction), float(center_fraction), int(seed))


def _check_shapes(a: tuple, mask: SamplingMask, what: str):
    if tuple(a[-2:]) != mask.shape:
        raise ShapeError(f"{what} spatial shape {tuple(a[-2:])} does not match mask {mask.shape}")


def undersample(x_f: ComplexTensor, mask: SamplingMask) -> tuple[KSpace, ComplexTensor]:
    """Return ``(k_u, x_u)`` with ``k_u = M * F(x_f)`` and ``x_u = F^-1(k_u)``.

    A fully sampled mask returns ``x_u = x_f`` exactly, without transform round-off.
    """
    _check_shapes(x_f.shape, mask, "image")
    k_f = centered_fft2(x_f.numpy())
    k_u = mask.matrix * k_f
    x_u = x_f.numpy().copy() if np.all(mask.matrix == 1) else centered_ifft2(k_u)
    return KSpace(ComplexTensor.from_numpy(k_u)), ComplexTensor.from_numpy(x_u)


def zero_filled(k_u: KSpace) -> ComplexTensor:
    return ComplexTensor.from_numpy(centered_ifft2(k_u.data.numpy()))


def data_consistency(x_pred: ComplexTensor, k_u: KSpace, mask: SamplingMask) -> ComplexTensor:
    """Hard data consistency: ``F^-1(M * k_u + (1 - M) * F(x_pred))``.

    Gradients reach ``x_pred`` only through the unsampled frequencies.
    """
    _check_shapes(x_pred.shape, mask, "prediction")
    if k_u.shape != x_pred.shape:
        raise ShapeError(f"k-space shape {k_u.shape} does not match prediction {x_pred.shape}")
    m = mask.matrix
    keep = Tensor(1.0 - m)
    k_pred = fft2(x_pred)
    merged = ComplexTensor(k_pred.re * keep + Tensor(m * k_u.data.re.data),
                           k_pred.im * keep + Tensor(m * k_u.data.im.data))
    return ifft2(merged)


def kspace_consistency_loss(x_pred: ComplexTensor, k_u: KSpace, mask: SamplingMask) -> Tensor:
    """Mean of ``|dRe| + |dIm|`` between ``k_u`` and ``M * F(x_pred)``, halved to average both parts.

    Equals the mean absolute error over all real scalars of the two parts, the
    same scaling :func:`~c5ed.tensor.l1_loss` uses on a stacked (re, im) image.
    """
    _check_shapes(x_pred.shape, mask, "prediction")
    if k_u.shape != x_pred.shape:
        raise ShapeError(f"k-space shape {k_u.shape} does not match prediction {x_pred.shape}")
    m = Tensor(mask.matrix)
    k_pred = fft2(x_pred)
    d_re = (k_pred.re * m - k_u.data.re).abs()
    d_im = (k_pred.im * m - k_u.data.im).abs()
    return (d_re.sum() + d_im.sum()) * (0.5 / d_re.size)


def magnitude_normalize(x: ComplexTensor) -> tuple[ComplexTensor, float]:
    """Scale so the largest elementwise magnitude is 1; returns ``(normalized, scale)``."""
    scale = float(x.magnitude().max())
    if scale == 0.0:
        raise ValueError("cannot magnitude-normalize an all-zero image")
    return ComplexTensor(Tensor(x.re.data / scale), Tensor(x.im.data / scale)), scale


def denormalize(x: ComplexTensor, scale: float) -> ComplexTensor:
    return ComplexTensor(Tensor(x.re.data * scale), Tensor(x.im.data * scale))
