"""Combined image/k-space loss, Adam, and the checkpoint-selecting training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .complex import ComplexTensor
from .kspace import (
    KSpace,
    SamplingMask,
    default_center_fraction,
    kspace_consistency_loss,
    make_gaussian_mask,
    stack_masks,
    undersample,
)
from .metrics import ms_ssim, psnr
from .network import Cascade
from .phantom import PhantomSet
from .tensor import Tensor, backward, l1_loss, no_grad

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "Adam",
    "combined_loss",
    "image_l1",
    "masks_for",
    "evaluate",
    "train",
    "TrainResult",
    "history_csv",
    "model_state",
    "load_model_state",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_psnr", "val_msssim")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    image_weight: float = 1.0
    kspace_weight: float = 1.0
    regenerate_masks: bool = True
    reduction: float = 4.0
    center_fraction: Optional[float] = None
    n_phantoms: int = 64
    image_size: int = 32
    phase_mode: str = "none"
    noise: float = 0.0
    splits: tuple[float, float, float] = (0.625, 0.1875, 0.1875)
    checkpoint: str = "best_val"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        self.splits = tuple(self.splits)

    @property
    def resolved_center_fraction(self) -> float:
        return default_center_fraction(self.reduction) if self.center_fraction is None else self.center_fraction

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def image_l1(x_pred: ComplexTensor, x_f: ComplexTensor) -> Tensor:
    """Mean absolute error over every real scalar of both parts."""
    return (l1_loss(x_pred.re, x_f.re) + l1_loss(x_pred.im, x_f.im)) * 0.5


def combined_loss(x_pred: ComplexTensor, x_f: ComplexTensor, k_u: KSpace, mask: SamplingMask,
                  weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """``w_img * |x_f - x_pred|_1 + w_k * |k_u - M F(x_pred)|_1`` (both as means)."""
    w_img, w_k = weights
    loss = image_l1(x_pred, x_f) * w_img
    if w_k:
        loss = loss + kspace_consistency_loss(x_pred, k_u, mask) * w_k
    return loss


def _mask_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


_SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}


def masks_for(cfg: TrainConfig, h: int, w: int, split: str, indices: Sequence[int], epoch: int = 0) -> list[SamplingMask]:
    """Per-example masks; validation/test masks never depend on the epoch."""
    cf = cfg.resolved_center_fraction
    ep = epoch if (split == "train" and cfg.regenerate_masks) else 0
    return [make_gaussian_mask(h, w, cfg.reduction, cf, _mask_seed(cfg.seed, _SPLIT_TAGS[split], ep, int(i)))
            for i in indices]


def _batch(images: np.ndarray, masks: list[SamplingMask]):
    x_f = ComplexTensor.from_numpy(images[:, None])
    mask = stack_masks(masks)
    k_u, x_u = undersample(x_f, mask)
    return x_f, k_u, x_u, mask


def evaluate(model: Cascade, images: np.ndarray, masks: list[SamplingMask], batch_size: int,
             weights: tuple[float, float] = (1.0, 1.0)) -> dict:
    """Loss and magnitude metrics of ``model`` and of the zero-filled input over a set of images."""
    model.eval()
    losses, preds, inputs = [], [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            x_f, k_u, x_u, mask = _batch(chunk, masks[start:start + batch_size])
            pred = model(x_u, k_u, mask)
            losses.append(combined_loss(pred, x_f, k_u, mask, weights).item() * len(chunk))
            preds.append(pred.numpy()[:, 0])
            inputs.append(x_u.numpy()[:, 0])
    model.train()
    pred = np.concatenate(preds)
    zf = np.concatenate(inputs)
    target_mag, pred_mag, zf_mag = np.abs(images), np.abs(pred), np.abs(zf)
    per_image = [
        {"psnr": psnr(pm, tm), "ms_ssim": ms_ssim(pm, tm),
         "zero_filled_psnr": psnr(zm, tm), "zero_filled_ms_ssim": ms_ssim(zm, tm)}
        for pm, zm, tm in zip(pred_mag, zf_mag, target_mag)
    ]
    return {
        "loss": float(np.sum(losses) / len(images)),
        "psnr": psnr(pred_mag, target_mag),
        "ms_ssim": ms_ssim(pred_mag, target_mag),
        "zero_filled_psnr": psnr(zf_mag, target_mag),
        "zero_filled_ms_ssim": ms_ssim(zf_mag, target_mag),
        "per_image": per_image,
        "predictions": pred,
        "zero_filled": zf,
    }


def model_state(model: Cascade) -> dict[str, np.ndarray]:
    state = {f"param:{n}": p.data.copy() for n, p in model.named_parameters()}
    state.update({f"buffer:{n}": np.array(b, copy=True) for n, b in model.named_buffers()})
    return state


def load_model_state(model: Cascade, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for key, value in state.items():
        kind, name = key.split(":", 1)
        if kind == "param":
            if params[name].shape != value.shape:
                raise ValueError(f"parameter {name}: stored shape {value.shape} != model shape {params[name].shape}")
            params[name].data[...] = value
        else:
            model.load_buffer(name, value)


@dataclass
class TrainResult:
    model: Cascade
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    best_state: dict = field(repr=False, default_factory=dict)


def train(model: Cascade, data: PhantomSet, cfg: TrainConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize ``model`` on the training split and keep the epoch with least validation loss.

    Fully deterministic given ``cfg.seed``. Raises :class:`TrainingDiverged`
    as soon as a batch loss is not finite.
    """
    idx = data.split_indices()
    if len(idx["train"]) == 0 or len(idx["val"]) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    h, w = data.images.shape[-2:]
    weights = (cfg.image_weight, cfg.kspace_weight)
    rng = np.random.default_rng(_mask_seed(cfg.seed, 99))
    opt = Adam(model.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    val_images = data.images[idx["val"]]
    val_masks = masks_for(cfg, h, w, "val", idx["val"])

    history: list[dict] = []
    best_loss, best_epoch, best_state = math.inf, 0, {}
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = idx["train"][rng.permutation(len(idx["train"]))]
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start:start + cfg.batch_size]
            x_f, k_u, x_u, mask = _batch(data.images[chosen], masks_for(cfg, h, w, "train", chosen, epoch))
            loss = combined_loss(model(x_u, k_u, mask), x_f, k_u, mask, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            batch_losses.append(value)
        val = evaluate(model, val_images, val_masks, cfg.batch_size, weights)
        row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_loss": val["loss"],
               "val_psnr": val["psnr"], "val_msssim": val["ms_ssim"]}
        history.append(row)
        log.info("epoch %d train %.5f val %.5f psnr %.3f", epoch, row["train_loss"], row["val_loss"], row["val_psnr"])
        if on_epoch is not None:
            on_epoch(row)
        if val["loss"] < best_loss:
            best_loss, best_epoch, best_state = val["loss"], epoch, model_state(model)
    load_model_state(model, best_state)
    return TrainResult(model, history, best_epoch, best_loss, best_state)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()
