"""Image-quality metrics on magnitude images with pixel range [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["psnr", "ms_ssim", "max_ms_ssim_scales", "phase_rmse", "MS_SSIM_WEIGHTS"]

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03
_SIGMA = 1.5
_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
_MIN_SIDE = 8


def _as_batch(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape((-1,) + a.shape[-2:])


def psnr(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """Mean per-image PSNR in dB over the leading axes; identical images give ``inf``."""
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = ((pred - target) ** 2).mean(axis=(1, 2))
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(data_range ** 2 / mse)
    return float(values.mean())


def max_ms_ssim_scales(shape: tuple[int, ...]) -> int:
    side = min(shape[-2:])
    scales = 0
    while side >= _MIN_SIDE:
        scales += 1
        side //= 2
    return scales


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float) -> tuple[float, float]:
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2

    def blur(a):
        return gaussian_filter(a, _SIGMA, mode="reflect", truncate=_TRUNCATE)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(cs.mean()), float((lum * cs).mean())


def _ms_ssim_single(x: np.ndarray, y: np.ndarray, scales: int, data_range: float) -> float:
    w = np.asarray(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    value = 1.0
    for j in range(scales):
        cs, ssim = _ssim_terms(x, y, data_range)
        term = ssim if j == scales - 1 else cs
        value *= max(term, 0.0) ** w[j]
        if j < scales - 1:
            x, y = _downsample(x), _downsample(y)
    return float(min(value, 1.0))


def ms_ssim(pred: np.ndarray, target: np.ndarray, scales: int | None = None, data_range: float = 1.0) -> float:
    """Multi-scale SSIM, averaged over the leading (batch) axes.

    Contrast-structure terms enter at every scale and luminance at the
    coarsest; the standard five exponents are truncated and renormalized when
    fewer scales are used. Each scale halves the image by 2x2 averaging and
    the smallest must keep at least 8 pixels per side. ``scales=None`` uses
    as many as fit, up to 5. Negative terms are clipped to 0.
    """
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    feasible = max_ms_ssim_scales(pred.shape)
    if scales is None:
        scales = min(5, feasible)
    if scales < 1 or scales > min(5, feasible):
        raise ValueError(f"{scales} scales requested but a {pred.shape[-2:]} image supports at most "
                         f"{min(5, feasible)}")
    return float(np.mean([_ms_ssim_single(p, t, scales, data_range) for p, t in zip(pred, target)]))


def phase_rmse(pred: np.ndarray, target: np.ndarray, magnitude_threshold: float = 0.1) -> float:
    """RMS wrapped phase error (radians) over pixels where the target magnitude exceeds the threshold."""
    pred, target = np.asarray(pred), np.asarray(target)
    support = np.abs(target) > magnitude_threshold
    if not support.any():
        raise ValueError("no target pixels above the magnitude threshold")
    diff = np.angle(pred[support] * np.conj(target[support]))
    return float(np.sqrt(np.mean(diff ** 2)))
