"""Dilated dense branches, the ensemble denoiser, and the data-consistent cascade.

A :class:`NetworkSpec` declares the whole model; :func:`build_cascade` turns it
into a :class:`Cascade`. In ``"real"`` mode the complex image travels as two
stacked real channels (re, im); in ``"complex"`` mode every layer is complex.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .complex import ComplexTensor
from .kspace import KSpace, SamplingMask, data_consistency
from .nn import COMPLEX, MODES, REAL, Features, Module, ModuleList
from .tensor import Tensor, backward, concat_channels

__all__ = [
    "LayerSpec",
    "BranchSpec",
    "NetworkSpec",
    "rf_closed_form",
    "rf_empirical",
    "DilatedDenseBlock",
    "Branch",
    "RefinementBlock",
    "EnsembleDenoiser",
    "Cascade",
    "build_ddb",
    "build_branch",
    "build_ensemble_denoiser",
    "build_cascade",
    "count_parameters",
    "make_ablation",
    "matched_real_spec",
    "load_preset",
    "PRESETS",
]


@dataclass(frozen=True)
class LayerSpec:
    kernel_size: int = 3
    dilation: int = 1
    filters: int = 16

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")


def rf_closed_form(layers: Sequence[LayerSpec]) -> int:
    """Receptive field side of a stride-1 stack: ``sum(dilation * (k - 1)) + 1``."""
    return sum(l.dilation * (l.kernel_size - 1) for l in layers) + 1


@dataclass
class BranchSpec:
    layers: list[LayerSpec]
    target_rf: Optional[int] = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a branch needs at least one layer")
        rf = rf_closed_form(self.layers)
        if self.target_rf is None:
            self.target_rf = rf
        elif rf != self.target_rf:
            raise ValueError(f"layers give a receptive field of {rf}, target is {self.target_rf}")

    @classmethod
    def from_dilations(cls, dilations: Sequence[int], filters: int, kernel_size: int = 3) -> "BranchSpec":
        return cls([LayerSpec(kernel_size, d, filters) for d in dilations])


@dataclass
class NetworkSpec:
    branches: list[BranchSpec]
    cascade_depth: int = 5
    mode: str = REAL
    inter_block_dense: bool = True
    refinement_filters: tuple[int, int] = (16, 16)
    image_channels: Optional[int] = None
    name: str = "custom"
    notes: str = ""

    def __post_init__(self):
        if self.cascade_depth < 1:
            raise ValueError(f"cascade depth must be >= 1, got {self.cascade_depth}")
        if not self.branches:
            raise ValueError("a network needs at least one branch")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_channels is None:
            self.image_channels = 2 if self.mode == REAL else 1
        self.refinement_filters = tuple(self.refinement_filters)

    @property
    def growth_filters(self) -> int:
        return self.branches[0].layers[0].filters

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "notes": self.notes,
            "mode": self.mode,
            "cascade_depth": self.cascade_depth,
            "inter_block_dense": self.inter_block_dense,
            "refinement_filters": list(self.refinement_filters),
            "image_channels": self.image_channels,
            "branches": [
                {"target_rf": b.target_rf, "layers": [asdict(l) for l in b.layers]} for b in self.branches
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        branches = [BranchSpec([LayerSpec(**l) for l in b["layers"]], b.get("target_rf")) for b in d["branches"]]
        return cls(
            branches=branches,
            cascade_depth=int(d.get("cascade_depth", 5)),
            mode=d.get("mode", REAL),
            inter_block_dense=bool(d.get("inter_block_dense", True)),
            refinement_filters=tuple(d.get("refinement_filters", (16, 16))),
            image_channels=d.get("image_channels"),
            name=d.get("name", "custom"),
            notes=d.get("notes", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_json(Path(path).read_text())


PRESETS = ("c5ed", "complex-c5ed", "ablation", "tiny", "smoke")


def load_preset(name: str, **overrides) -> NetworkSpec:
    """Load a bundled preset (see ``c5ed/presets/*.json``), optionally overriding top-level fields."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("c5ed.presets").joinpath(f"{name}.json").read_text()
    spec = NetworkSpec.from_json(text)
    if "mode" in overrides and "image_channels" not in overrides:
        overrides["image_channels"] = None
    return replace(spec, **overrides) if overrides else spec


def make_ablation(spec: NetworkSpec) -> NetworkSpec:
    """Copy of ``spec`` with every dilation rate set to 1 (layer counts unchanged)."""
    branches = [BranchSpec([replace(l, dilation=1) for l in b.layers]) for b in spec.branches]
    return replace(spec, branches=branches, name=f"{spec.name}-ablation")


def matched_real_spec(spec: NetworkSpec) -> NetworkSpec:
    """Real-channel spec whose every filter has the same shape as the complex spec's kernel parts."""
    return replace(spec, mode=REAL, image_channels=spec.image_channels if spec.mode == REAL else 1,
                   name=f"{spec.name}-matched-real")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class DilatedDenseBlock(Module):
    """Layer l sees the concatenation of the block input and every earlier layer's output.

    Each layer is dilated conv -> batch norm -> ReLU (complex counterparts in
    complex mode). The block returns the concatenation of its input and all
    layer outputs.
    """

    def __init__(self, spec: BranchSpec, in_channels: int, mode: str, rng):
        super().__init__()
        self.mode, self.in_channels = mode, in_channels
        self.convs, self.norms = ModuleList(), ModuleList()
        self.acts = [nn.make_act(mode) for _ in spec.layers]
        channels = in_channels
        self.layer_in_channels = []
        for layer in spec.layers:
            self.layer_in_channels.append(channels)
            self.convs.append(nn.make_conv(mode, channels, layer.filters, layer.kernel_size, layer.dilation, rng))
            self.norms.append(nn.make_norm(mode, layer.filters))
            channels += layer.filters
        self.out_channels = channels

    def forward(self, x: Features) -> Features:
        feats = [x]
        for conv, norm, act in zip(self.convs, self.norms, self.acts):
            feats.append(act(norm(conv(nn.cat(feats)))))
        return nn.cat(feats)


class Branch(Module):
    """A dilated dense block followed by a 1x1 conv to a single image."""

    def __init__(self, spec: BranchSpec, image_channels: int, mode: str, rng):
        super().__init__()
        self.spec, self.mode, self.in_channels = spec, mode, image_channels
        self.ddb = DilatedDenseBlock(spec, image_channels, mode, rng)
        self.head = nn.make_conv(mode, self.ddb.out_channels, image_channels, 1, 1, rng)

    def forward(self, x: Features) -> Features:
        return self.head(self.ddb(x))


class RefinementBlock(Module):
    """Two 3x3 conv layers for feature extraction, then a 3x3 transpose conv to ``out_channels``."""

    def __init__(self, in_channels: int, out_channels: int, filters: Sequence[int], mode: str, rng):
        super().__init__()
        f1, f2 = filters
        self.mode, self.in_channels = mode, in_channels
        self.conv1 = nn.make_conv(mode, in_channels, f1, 3, 1, rng)
        self.norm1 = nn.make_norm(mode, f1)
        self.conv2 = nn.make_conv(mode, f1, f2, 3, 1, rng)
        self.norm2 = nn.make_norm(mode, f2)
        self.out = nn.make_conv_transpose(mode, f2, out_channels, 3, rng)
        self.act = nn.make_act(mode)

    def forward(self, x: Features) -> Features:
        y = self.act(self.norm1(self.conv1(x)))
        y = self.act(self.norm2(self.conv2(y)))
        return self.out(y)


class EnsembleDenoiser(Module):
    """Parallel branches whose single-image outputs are merged by a refinement block."""

    def __init__(self, spec: NetworkSpec, rng):
        super().__init__()
        c = spec.image_channels
        self.mode, self.in_channels = spec.mode, c
        self.branches = ModuleList(Branch(b, c, spec.mode, rng) for b in spec.branches)
        self.refine = RefinementBlock(c * len(spec.branches), c, spec.refinement_filters, spec.mode, rng)
        self.last_intermediates: list[Features] = []

    def forward(self, x: Features) -> Features:
        inter = [branch(x) for branch in self.branches]
        self.last_intermediates = inter
        return self.refine(nn.cat(inter))


def _to_features(x: ComplexTensor, mode: str, channels: int) -> Features:
    if mode == COMPLEX:
        return x
    return concat_channels([x.re, x.im]) if channels == 2 else x.re


def _from_features(y: Features, mode: str, channels: int) -> ComplexTensor:
    if mode == COMPLEX:
        return y
    if channels == 2:
        return ComplexTensor(y[:, 0:1], y[:, 1:2])
    return ComplexTensor(y, Tensor(np.zeros(y.shape)))


class Cascade(Module):
    """Denoiser stages interleaved with hard data consistency.

    Stage k denoises ``s_k`` residually and projects onto the measured data:
    ``x_{k+1} = DC(s_k + DN_k(s_k))``. Without inter-block dense connections
    ``s_k = x_k``; with them, for k >= 1, ``s_k`` is a refinement block applied
    to the channel-concatenation of ``x_0 ... x_k``. ``x_0`` is the zero-filled
    input, which is already data consistent.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec, self.mode = spec, spec.mode
        c = spec.image_channels
        self.stages = ModuleList(EnsembleDenoiser(spec, rng) for _ in range(spec.cascade_depth))
        self.refs = ModuleList()
        if spec.inter_block_dense:
            for k in range(1, spec.cascade_depth):
                self.refs.append(RefinementBlock((k + 1) * c, c, spec.refinement_filters, spec.mode, rng))

    def forward(self, x_u: ComplexTensor, k_u: KSpace, mask: SamplingMask) -> ComplexTensor:
        mode, c = self.mode, self.spec.image_channels
        outs = [_to_features(x_u, mode, c)]
        for k, stage in enumerate(self.stages):
            s = self.refs[k - 1](nn.cat(outs)) if (self.spec.inter_block_dense and k > 0) else outs[-1]
            y = s + stage(s)
            x = data_consistency(_from_features(y, mode, c), k_u, mask)
            outs.append(_to_features(x, mode, c))
        return _from_features(outs[-1], mode, c)

    def first_stage_intermediates(self) -> list[ComplexTensor]:
        """Each first-stage branch's 1x1-conv image from the most recent forward pass."""
        return [_from_features(t, self.mode, self.spec.image_channels) for t in self.stages[0].last_intermediates]


# ---------------------------------------------------------------------------
# builders and analysis
# ---------------------------------------------------------------------------

def build_ddb(spec: BranchSpec, in_channels: int, mode: str = REAL, seed: int = 0) -> DilatedDenseBlock:
    return DilatedDenseBlock(spec, in_channels, mode, np.random.default_rng(seed))


def build_branch(spec: BranchSpec, image_channels: int = 2, mode: str = REAL, seed: int = 0) -> Branch:
    return Branch(spec, image_channels, mode, np.random.default_rng(seed))


def build_ensemble_denoiser(spec: NetworkSpec, seed: int = 0) -> EnsembleDenoiser:
    return EnsembleDenoiser(spec, np.random.default_rng(seed))


def build_cascade(spec: NetworkSpec, seed: int = 0) -> Cascade:
    return Cascade(spec, seed)


def count_parameters(model: Module) -> int:
    """Total number of real scalars in the model's learnable parameters."""
    return sum(p.size for p in model.parameters())


def _positive_probe_copy(block: Module) -> Module:
    probe = copy.deepcopy(block)
    probe.eval()
    for m in probe.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan = m.weight.data[0].size
            m.weight.data[...] = 1.0 / fan
            m.bias.data[...] = 0.0
        elif isinstance(m, (nn.ComplexConv2d, nn.ComplexConvTranspose2d)):
            fan = m.wr.data[0].size
            m.wr.data[...] = 1.0 / fan
            m.wi.data[...] = 0.0
            m.bias_re.data[...] = 0.0
            m.bias_im.data[...] = 0.0
        elif isinstance(m, nn.BatchNorm2d):
            m.gamma.data[...] = 1.0
            m.beta.data[...] = 0.0
            m.stats.mean[...] = 0.0
            m.stats.var[...] = 1.0
        elif isinstance(m, nn.ComplexBatchNorm2d):
            s = m.state
            for arr in (s.g_rr, s.g_ii):
                arr.data[...] = 1.0
            for arr in (s.g_ri, s.beta_re, s.beta_im):
                arr.data[...] = 0.0
            s.mean_re[...] = 0.0
            s.mean_im[...] = 0.0
            s.v_rr[...] = 1.0
            s.v_ii[...] = 1.0
            s.v_ri[...] = 0.0
    return probe


def rf_empirical(block: Module, probe_size: int) -> int:
    """Measure a block's receptive field from the gradient footprint of its center output pixel.

    Works on a copy of ``block`` with every filter set to a positive constant
    (imaginary parts zero in complex mode) and normalization reduced to the
    identity, so no contributions cancel. Returns the side of the bounding
    box of nonzero input-gradient entries.
    """
    probe = _positive_probe_copy(block)
    n = probe_size
    shape = (1, probe.in_channels, n, n)
    if probe.mode == COMPLEX:
        x = ComplexTensor(Tensor(np.ones(shape), requires_grad=True), Tensor(np.ones(shape), requires_grad=True))
        inputs = [x.re, x.im]
    else:
        x = Tensor(np.ones(shape), requires_grad=True)
        inputs = [x]
    y = probe(x)
    parts = [y.re, y.im] if isinstance(y, ComplexTensor) else [y]
    c = n // 2
    loss = parts[0][:, :, c, c].sum()
    for p in parts[1:]:
        loss = loss + p[:, :, c, c].sum()
    backward(loss)
    footprint = np.zeros((n, n), dtype=bool)
    for t in inputs:
        if t.grad is not None:
            footprint |= np.any(t.grad[0] != 0, axis=0)
    rows = np.flatnonzero(footprint.any(axis=1))
    cols = np.flatnonzero(footprint.any(axis=0))
    if rows.size == 0:
        raise ValueError("the probe found no input dependence at all")
    if rows[0] == 0 or cols[0] == 0 or rows[-1] == n - 1 or cols[-1] == n - 1:
        raise ValueError(f"probe size {n} is too small: the gradient footprint reaches the border; "
                         f"use a probe larger than the expected receptive field (e.g. {2 * n + 1})")
    return int(max(rows[-1] - rows[0], cols[-1] - cols[0]) + 1)
