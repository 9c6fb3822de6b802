"""Loss functions: foreground-weighted BCE for both decoders, plus the
entropy, consistency and rotation baseline losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7

AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass
class LossValue:
    value: torch.Tensor  # scalar, differentiable
    n_pixels: int
    n_images: int

    def __post_init__(self):
        if not torch.isfinite(self.value):
            raise FloatingPointError(f"non-finite loss value: {self.value}")

    def item(self) -> float:
        return float(self.value.detach())


def _check_binary(target: torch.Tensor) -> None:
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target must be binary {0,1}")


def weighted_bce(
    pred: torch.Tensor,
    target: torch.Tensor,
    weights: torch.Tensor,
    normalization: str = "pixel_mean",
) -> LossValue:
    """Binary cross entropy with the foreground term scaled by a per-image
    background/foreground ratio w.

    pred, target: B x H x W; weights: B. With ``pixel_mean`` the sum is
    divided by the total pixel count so magnitudes are resolution
    independent; ``image_sum`` divides by the image count only (the two
    differ by the constant |Omega|).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    _check_binary(target)
    if weights.shape != (pred.shape[0],):
        raise ValueError("weights must be one scalar per image")
    p = pred.clamp(EPS, 1 - EPS)
    t = target.to(p.dtype)
    w = weights.to(p.dtype).view(-1, 1, 1)
    per_pixel = -(w * t * torch.log(p) + (1 - t) * torch.log(1 - p))
    total = per_pixel.sum()
    n_images = pred.shape[0]
    n_pixels = pred[0].numel()
    if normalization == "pixel_mean":
        value = total / (n_images * n_pixels)
    elif normalization == "image_sum":
        value = total / n_images
    else:
        raise ValueError(f"unknown normalization '{normalization}'")
    return LossValue(value, n_pixels=n_pixels, n_images=n_images)


def entropy_loss(pred: torch.Tensor) -> LossValue:
    """Mean per-pixel binary entropy of the predictions; penalizes
    uncertain outputs on unlabelled images."""
    p = pred.clamp(EPS, 1 - EPS)
    value = -(p * torch.log(p) + (1 - p) * torch.log(1 - p)).mean()
    return LossValue(value, n_pixels=pred[0].numel(), n_images=pred.shape[0])


def apply_augmentation(batch: torch.Tensor, name: str) -> torch.Tensor:
    """Spatial augmentation on a B x H x W (or B x C x H x W) batch."""
    dims = (-2, -1)
    if name == "identity":
        return batch
    if name == "hflip":
        return torch.flip(batch, dims=[-1])
    if name == "vflip":
        return torch.flip(batch, dims=[-2])
    if name == "rot90":
        return torch.rot90(batch, 1, dims)
    if name == "rot180":
        return torch.rot90(batch, 2, dims)
    if name == "rot270":
        return torch.rot90(batch, 3, dims)
    raise ValueError(f"unknown augmentation '{name}'; valid: {AUGMENTATIONS}")


def invert_augmentation(batch: torch.Tensor, name: str) -> torch.Tensor:
    inverse = {"rot90": "rot270", "rot270": "rot90"}.get(name, name)
    return apply_augmentation(batch, inverse)


def consistency_loss(pred_clean: torch.Tensor, pred_aug: torch.Tensor, transform: str) -> LossValue:
    """Mean squared disagreement between the prediction on the clean image
    and the realigned prediction on its augmented view."""
    realigned = invert_augmentation(pred_aug, transform)
    if pred_clean.shape != realigned.shape:
        raise ValueError(
            f"shape mismatch after inverse transform: {tuple(pred_clean.shape)} vs {tuple(realigned.shape)}"
        )
    value = ((pred_clean - realigned) ** 2).mean()
    return LossValue(value, n_pixels=pred_clean[0].numel(), n_images=pred_clean.shape[0])


def rotation_loss(probs: torch.Tensor, labels: torch.Tensor) -> LossValue:
    """Mean negative log-probability of the true rotation class."""
    if probs.ndim != 2 or probs.shape[1] != 4:
        raise ValueError(f"probs must be B x 4, got {tuple(probs.shape)}")
    if torch.any(labels < 0) or torch.any(labels > 3):
        raise ValueError("rotation labels must be in {0,1,2,3}")
    picked = probs.gather(1, labels.view(-1, 1).long()).clamp(min=EPS)
    value = -torch.log(picked).mean()
    return LossValue(value, n_pixels=1, n_images=probs.shape[0])
