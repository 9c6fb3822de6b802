"""Training loops: joint edge-supervised training, supervised baseline,
entropy/consistency regularizers, rotation pre-training and K-shot
fine-tuning."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .model import DualDecoderNet
from .objectives import (
    AUGMENTATIONS,
    LossValue,
    apply_augmentation,
    consistency_loss,
    entropy_loss,
    rotation_loss,
    weighted_bce,
)

METHODS = ("supervised", "edge_joint", "entropy", "consistency", "rotation_pretrain")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.001
    method: str = "edge_joint"
    unlabelled_fraction: float = 1.0
    seed: int = 0
    lambda_reg: float = 1.0  # weight of the entropy/consistency term
    joint_mode: str = "alternate"  # or "summed": one backward for both losses
    normalization: str = "pixel_mean"
    rotation_lr: float = 0.1  # SGD learning rate for rotation pre-training

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'; valid: {METHODS}")
        if (self.unlabelled_fraction == 0) != (self.method == "supervised"):
            raise ValueError("unlabelled_fraction must be 0 iff method is 'supervised'")


@dataclass
class FinetuneConfig:
    epochs: int = 20
    learning_rate: float = 0.001
    seed: int = 0
    flip_augment: bool = True


@dataclass
class EpochRecord:
    epoch: int
    supervised_loss: float
    self_supervised_loss: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint_path: Path | None = None

    def save_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "L_S", "L_SS", "wall_time"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.supervised_loss:.6f}", f"{r.self_supervised_loss:.6f}", f"{r.wall_time:.3f}"])


@dataclass
class LabelledData:
    images: torch.Tensor  # N x H x W, float32 in [0,1]
    masks: torch.Tensor  # N x H x W, {0,1}
    weights: torch.Tensor  # N, background/foreground ratio per mask

    def __len__(self):
        return self.images.shape[0]


@dataclass
class UnlabelledData:
    images: torch.Tensor
    edge_targets: torch.Tensor  # N x H x W, {0,1}
    weights: torch.Tensor

    def __len__(self):
        return self.images.shape[0]


class TrainingDivergence(RuntimeError):
    pass


def _checked(loss_fn, *args, context: str = "", **kwargs) -> LossValue:
    try:
        return loss_fn(*args, **kwargs)
    except FloatingPointError as exc:
        raise TrainingDivergence(f"non-finite loss at {context}: {exc}") from exc


class _BatchSampler:
    """Seeded shuffled mini-batches; cycles endlessly, reshuffling after
    each pass."""

    def __init__(self, n: int, batch_size: int, generator: torch.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.gen = generator
        self._order = torch.randperm(n, generator=generator)
        self._pos = 0

    def next_batch(self) -> torch.Tensor:
        if self._pos + self.batch_size > self.n:
            self._order = torch.randperm(self.n, generator=self.gen)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx

    def batches_per_epoch(self) -> int:
        return max(1, self.n // self.batch_size)


def joint_train(
    model: DualDecoderNet,
    labelled: LabelledData,
    unlabelled: UnlabelledData,
    config: TrainConfig,
) -> tuple[DualDecoderNet, TrainHistory]:
    """Alternating joint optimization: optimizer A (encoder + seg decoder)
    steps on the supervised loss, optimizer B (encoder + edge decoder) on
    the edge proxy loss. Each Adam keeps its own moments for the shared
    encoder."""
    if len(labelled) == 0 or len(unlabelled) == 0:
        raise ValueError("joint training needs non-empty labelled and unlabelled pools")
    opt_seg = torch.optim.Adam(model.seg_parameters(), lr=config.learning_rate)
    opt_edge = torch.optim.Adam(model.edge_parameters(), lr=config.learning_rate)
    lab_sampler = _BatchSampler(len(labelled), config.batch_size, torch.Generator().manual_seed(config.seed))
    unlab_sampler = _BatchSampler(len(unlabelled), config.batch_size, torch.Generator().manual_seed(config.seed + 1))

    history = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sup_losses, ss_losses = [], []
        for it in range(lab_sampler.batches_per_epoch()):
            ctx = f"epoch {epoch} iter {it}"
            li = lab_sampler.next_batch()
            ui = unlab_sampler.next_batch()
            if config.joint_mode == "alternate":
                model.zero_grad(set_to_none=True)
                l_s = _checked(
                    weighted_bce,
                    model.forward_segmentation(labelled.images[li]),
                    labelled.masks[li],
                    labelled.weights[li],
                    normalization=config.normalization,
                    context=ctx + " (L_S)",
                )
                l_s.value.backward()
                opt_seg.step()

                model.zero_grad(set_to_none=True)
                l_ss = _checked(
                    weighted_bce,
                    model.forward_edges(unlabelled.images[ui]),
                    unlabelled.edge_targets[ui],
                    unlabelled.weights[ui],
                    normalization=config.normalization,
                    context=ctx + " (L_SS)",
                )
                l_ss.value.backward()
                opt_edge.step()
            else:  # summed: one backward pass, both optimizers step
                model.zero_grad(set_to_none=True)
                l_s = _checked(
                    weighted_bce,
                    model.forward_segmentation(labelled.images[li]),
                    labelled.masks[li],
                    labelled.weights[li],
                    normalization=config.normalization,
                    context=ctx + " (L_S)",
                )
                l_ss = _checked(
                    weighted_bce,
                    model.forward_edges(unlabelled.images[ui]),
                    unlabelled.edge_targets[ui],
                    unlabelled.weights[ui],
                    normalization=config.normalization,
                    context=ctx + " (L_SS)",
                )
                (l_s.value + l_ss.value).backward()
                opt_seg.step()
                opt_edge.step()
            sup_losses.append(l_s.item())
            ss_losses.append(l_ss.item())
        history.records.append(
            EpochRecord(epoch, _mean(sup_losses), _mean(ss_losses), time.perf_counter() - t0)
        )
    return model, history


def train_supervised(
    model: DualDecoderNet, labelled: LabelledData, config: TrainConfig
) -> tuple[DualDecoderNet, TrainHistory]:
    if config.method != "supervised" or config.unlabelled_fraction != 0:
        raise ValueError("train_supervised requires method='supervised' and unlabelled_fraction=0")
    if len(labelled) == 0:
        raise ValueError("labelled pool is empty")
    opt = torch.optim.Adam(model.seg_parameters(), lr=config.learning_rate)
    sampler = _BatchSampler(len(labelled), config.batch_size, torch.Generator().manual_seed(config.seed))
    history = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        for it in range(sampler.batches_per_epoch()):
            li = sampler.next_batch()
            model.zero_grad(set_to_none=True)
            l_s = _checked(
                weighted_bce,
                model.forward_segmentation(labelled.images[li]),
                labelled.masks[li],
                labelled.weights[li],
                normalization=config.normalization,
                context=f"epoch {epoch} iter {it}",
            )
            l_s.value.backward()
            opt.step()
            losses.append(l_s.item())
        history.records.append(EpochRecord(epoch, _mean(losses), 0.0, time.perf_counter() - t0))
    return model, history


def train_with_regularizer(
    model: DualDecoderNet,
    labelled: LabelledData,
    unlabelled: UnlabelledData,
    config: TrainConfig,
) -> tuple[DualDecoderNet, TrainHistory]:
    """Semi-supervised baselines: L_S + lambda * R(unlabelled batch) with R
    either entropy or consistency; a single optimizer over encoder + seg
    decoder."""
    if config.method not in ("entropy", "consistency"):
        raise ValueError("train_with_regularizer requires method 'entropy' or 'consistency'")
    if len(labelled) == 0 or len(unlabelled) == 0:
        raise ValueError("needs non-empty labelled and unlabelled pools")
    opt = torch.optim.Adam(model.seg_parameters(), lr=config.learning_rate)
    lab_sampler = _BatchSampler(len(labelled), config.batch_size, torch.Generator().manual_seed(config.seed))
    unlab_sampler = _BatchSampler(len(unlabelled), config.batch_size, torch.Generator().manual_seed(config.seed + 1))
    aug_gen = torch.Generator().manual_seed(config.seed + 2)
    history = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sup_losses, reg_losses = [], []
        for it in range(lab_sampler.batches_per_epoch()):
            ctx = f"epoch {epoch} iter {it}"
            li = lab_sampler.next_batch()
            ui = unlab_sampler.next_batch()
            model.zero_grad(set_to_none=True)
            l_s = _checked(
                weighted_bce,
                model.forward_segmentation(labelled.images[li]),
                labelled.masks[li],
                labelled.weights[li],
                normalization=config.normalization,
                context=ctx + " (L_S)",
            )
            ub = unlabelled.images[ui]
            if config.method == "entropy":
                reg = _checked(entropy_loss, model.forward_segmentation(ub), context=ctx + " (entropy)")
            else:
                t_idx = int(torch.randint(len(AUGMENTATIONS), (1,), generator=aug_gen))
                name = AUGMENTATIONS[t_idx]
                pred_clean = model.forward_segmentation(ub)
                pred_aug = model.forward_segmentation(apply_augmentation(ub, name))
                reg = _checked(consistency_loss, pred_clean, pred_aug, name, context=ctx + " (consistency)")
            (l_s.value + config.lambda_reg * reg.value).backward()
            opt.step()
            sup_losses.append(l_s.item())
            reg_losses.append(reg.item())
        history.records.append(
            EpochRecord(epoch, _mean(sup_losses), _mean(reg_losses), time.perf_counter() - t0)
        )
    return model, history


_ROTATION_NAMES = ("identity", "rot90", "rot180", "rot270")


def sample_rotation_labels(n: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform rotation classes in {0,1,2,3}."""
    return torch.randint(0, 4, (n,), generator=generator)


def pretrain_rotation(
    model: DualDecoderNet, unlabelled_images: torch.Tensor, config: TrainConfig
) -> tuple[DualDecoderNet, TrainHistory]:
    """Rotation pretext pre-training of the encoder: each batch image gets
    a uniformly sampled rotation in {0, 90, 180, 270} degrees and the
    encoder + head is trained with SGD to classify it."""
    if model.rotation_head is None:
        raise ValueError("model was built without a rotation head")
    if unlabelled_images.shape[0] == 0:
        raise ValueError("unlabelled pool is empty")
    opt = torch.optim.SGD(model.rotation_parameters(), lr=config.rotation_lr)
    label_gen = torch.Generator().manual_seed(config.seed + 1)
    sampler = _BatchSampler(unlabelled_images.shape[0], config.batch_size, torch.Generator().manual_seed(config.seed))
    history = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        for it in range(sampler.batches_per_epoch()):
            idx = sampler.next_batch()
            batch = unlabelled_images[idx]
            labels = sample_rotation_labels(batch.shape[0], label_gen)
            rotated = torch.stack(
                [apply_augmentation(img, _ROTATION_NAMES[int(k)]) for img, k in zip(batch, labels)]
            )
            model.zero_grad(set_to_none=True)
            loss = _checked(
                rotation_loss,
                model.forward_rotation(rotated),
                labels,
                context=f"epoch {epoch} iter {it} (rotation)",
            )
            loss.value.backward()
            opt.step()
            losses.append(loss.item())
        history.records.append(EpochRecord(epoch, 0.0, _mean(losses), time.perf_counter() - t0))
    return model, history


def finetune(model: DualDecoderNet, support: LabelledData, config: FinetuneConfig) -> DualDecoderNet:
    """K-shot fine-tuning of the segmentation model on the support set.
    The edge decoder is frozen and unused; only encoder + seg decoder are
    optimized."""
    k = len(support)
    if k == 0:
        raise ValueError("support set is empty")
    opt = torch.optim.Adam(model.seg_parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    batch_size = min(k, 4)
    sampler = _BatchSampler(k, batch_size, gen)
    flips = ("identity", "hflip", "vflip")
    for epoch in range(config.epochs):
        for it in range(sampler.batches_per_epoch()):
            idx = sampler.next_batch()
            imgs, masks = support.images[idx], support.masks[idx]
            if config.flip_augment:
                name = flips[int(torch.randint(len(flips), (1,), generator=gen))]
                imgs = apply_augmentation(imgs, name)
                masks = apply_augmentation(masks, name)
            model.zero_grad(set_to_none=True)
            loss = _checked(
                weighted_bce,
                model.forward_segmentation(imgs),
                masks,
                support.weights[idx],
                context=f"finetune epoch {epoch} iter {it}",
            )
            loss.value.backward()
            opt.step()
    return model


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0
