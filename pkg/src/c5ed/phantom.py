"""Synthetic complex phantoms: random ellipse anatomy with an optional smooth phase map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .complex import ComplexTensor
from .kspace import magnitude_normalize

__all__ = [
    "PHASE_MODES",
    "PhantomParts",
    "synthesize",
    "make_phantom",
    "phase_gradient_bound",
    "PhantomSet",
    "make_phantom_set",
]

PHASE_MODES = ("none", "smooth")
# monomials of the phase polynomial, in coefficient order
_MONOMIALS = ("1", "u", "v", "u^2", "uv", "v^2")


@dataclass
class PhantomParts:
    magnitude: np.ndarray
    phase: np.ndarray
    phase_coefficients: np.ndarray
    n_ellipses: int


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-1.0, 1.0, size)
    v, u = np.meshgrid(axis, axis, indexing="ij")
    return u, v


def _ellipses(size: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    u, v = _grid(size)
    count = int(rng.integers(3, 9))
    image = np.zeros((size, size))
    for i in range(count):
        if i == 0:
            cx, cy = rng.uniform(-0.1, 0.1, 2)
            a, b = rng.uniform(0.6, 0.9, 2)
            value = 1.0
        else:
            cx, cy = rng.uniform(-0.5, 0.5, 2)
            a, b = rng.uniform(0.08, 0.45, 2)
            value = rng.uniform(-0.6, 0.6)
        theta = rng.uniform(0.0, np.pi)
        du, dv = u - cx, v - cy
        ur = du * np.cos(theta) + dv * np.sin(theta)
        vr = -du * np.sin(theta) + dv * np.cos(theta)
        image[(ur / a) ** 2 + (vr / b) ** 2 <= 1.0] += value
    return np.clip(image, 0.0, None), count


def _smooth_phase(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    c = rng.uniform(-1.0, 1.0, len(_MONOMIALS))
    c *= np.pi / np.abs(c).sum()
    u, v = _grid(size)
    phase = c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v
    return phase, c


def phase_gradient_bound(coefficients: np.ndarray) -> float:
    """Upper bound on |grad phase| over [-1, 1]^2 (per unit of the normalized coordinates)."""
    c = np.abs(coefficients)
    du = c[1] + 2 * c[3] + c[4]
    dv = c[2] + c[4] + 2 * c[5]
    return float(np.hypot(du, dv))


def synthesize(size: int, seed: int, phase_mode: str = "none", noise: float = 0.0) -> PhantomParts:
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    if phase_mode not in PHASE_MODES:
        raise ValueError(f"phase_mode must be one of {PHASE_MODES}, got {phase_mode!r}")
    rng = np.random.default_rng(seed)
    magnitude, count = _ellipses(size, rng)
    if phase_mode == "smooth":
        phase, coeffs = _smooth_phase(size, rng)
    else:
        phase, coeffs = np.zeros((size, size)), np.zeros(len(_MONOMIALS))
    if noise:
        magnitude = np.abs(magnitude + noise * rng.normal(size=magnitude.shape))
    return PhantomParts(magnitude, phase, coeffs, count)


def make_phantom(size: int, seed: int, phase_mode: str = "none", noise: float = 0.0) -> ComplexTensor:
    """A magnitude-normalized complex phantom of shape (size, size)."""
    parts = synthesize(size, seed, phase_mode, noise)
    if phase_mode == "none":
        z = ComplexTensor.from_numpy(parts.magnitude.astype(np.float64))
    else:
        z = ComplexTensor.from_numpy(parts.magnitude * np.exp(1j * parts.phase))
    return magnitude_normalize(z)[0]


@dataclass
class PhantomSet:
    images: np.ndarray  # (n, H, W) complex
    size: int
    seed: int
    phase_mode: str = "none"
    noise: float = 0.0
    splits: tuple[float, float, float] = (0.625, 0.1875, 0.1875)
    seeds: list[int] = field(default_factory=list)

    def split_indices(self) -> dict[str, np.ndarray]:
        n = len(self.images)
        n_train = int(round(self.splits[0] * n))
        n_val = int(round(self.splits[1] * n))
        idx = np.arange(n)
        return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}

    def split(self, name: str) -> np.ndarray:
        return self.images[self.split_indices()[name]]


def make_phantom_set(n: int, size: int, seed: int, phase_mode: str = "none", noise: float = 0.0,
                     splits: tuple[float, float, float] = (0.625, 0.1875, 0.1875)) -> PhantomSet:
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]
    images = np.stack([make_phantom(size, s, phase_mode, noise).numpy() for s in seeds])
    return PhantomSet(images, size, seed, phase_mode, noise, tuple(splits), seeds)
