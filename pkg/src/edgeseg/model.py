"""Shared-encoder dual-decoder segmentation network.

A small fully convolutional regression network: one encoder feeding both a
segmentation decoder and an edge-prediction decoder, plus an optional
4-way rotation classification head on the bottleneck features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ArchConfig:
    input_channels: int = 1
    encoder_channels: tuple[int, ...] = (32, 64, 128)
    bottleneck_channels: int = 512

    def __post_init__(self):
        if len(self.encoder_channels) == 0:
            raise ValueError("encoder_channels must not be empty")

    @property
    def n_stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** self.n_stages


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers = []
        in_ch = arch.input_channels
        for out_ch in arch.encoder_channels:
            layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            in_ch = out_ch
        layers += [nn.Conv2d(in_ch, arch.bottleneck_channels, 3, padding=1), nn.ReLU(inplace=True)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Mirrors the encoder: nearest-neighbour 2x upsampling followed by
    convolution at each stage, then a 1-channel logit map."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        stages = []
        in_ch = arch.bottleneck_channels
        for out_ch in reversed(arch.encoder_channels):
            stages += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True)]
            in_ch = out_ch
        stages.append(nn.Conv2d(in_ch, 1, 1))
        self.net = nn.Sequential(*stages)

    def forward(self, x):
        return self.net(x)


class DualDecoderNet(nn.Module):
    """f(x; theta) with theta = {encoder, seg_decoder} and the edge model
    sharing the encoder: theta' = {encoder, edge_decoder}."""

    def __init__(self, arch: ArchConfig, with_rotation_head: bool = False):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.seg_decoder = Decoder(arch)
        self.edge_decoder = Decoder(arch)
        self.rotation_head = nn.Linear(arch.bottleneck_channels, 4) if with_rotation_head else None

    def _check_batch(self, batch: torch.Tensor) -> torch.Tensor:
        if batch.ndim == 3:
            batch = batch.unsqueeze(1)
        d = self.arch.spatial_divisor
        _, _, h, w = batch.shape
        if h % d or w % d:
            raise ValueError(f"input spatial size {h}x{w} must be divisible by {d}")
        return batch

    def forward_segmentation(self, batch: torch.Tensor) -> torch.Tensor:
        batch = self._check_batch(batch)
        return torch.sigmoid(self.seg_decoder(self.encoder(batch))).squeeze(1)

    def forward_edges(self, batch: torch.Tensor) -> torch.Tensor:
        batch = self._check_batch(batch)
        return torch.sigmoid(self.edge_decoder(self.encoder(batch))).squeeze(1)

    def forward_rotation(self, batch: torch.Tensor) -> torch.Tensor:
        if self.rotation_head is None:
            raise ValueError("model was built without a rotation head")
        batch = self._check_batch(batch)
        feats = self.encoder(batch)
        pooled = feats.mean(dim=(2, 3))
        return torch.softmax(self.rotation_head(pooled), dim=1)

    forward = forward_segmentation

    def seg_parameters(self):
        return list(self.encoder.parameters()) + list(self.seg_decoder.parameters())

    def edge_parameters(self):
        return list(self.encoder.parameters()) + list(self.edge_decoder.parameters())

    def rotation_parameters(self):
        if self.rotation_head is None:
            raise ValueError("model was built without a rotation head")
        return list(self.encoder.parameters()) + list(self.rotation_head.parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(arch: ArchConfig, seed: int, with_rotation_head: bool = False) -> DualDecoderNet:
    """Deterministic init: fan-in scaled uniform weights, zero biases.
    The rotation head starts at zero so an untrained head predicts the
    uniform distribution."""
    model = DualDecoderNet(arch, with_rotation_head)
    gen = torch.Generator().manual_seed(seed)
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
        elif isinstance(module, nn.Linear):
            with torch.no_grad():
                module.weight.zero_()
                module.bias.zero_()
    return model


def expected_parameter_count(arch: ArchConfig, with_rotation_head: bool = False) -> int:
    """Closed-form parameter count from the layer shapes."""

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    total = 0
    in_ch = arch.input_channels
    for out_ch in arch.encoder_channels:
        total += conv(in_ch, out_ch, 3)
        in_ch = out_ch
    total += conv(in_ch, arch.bottleneck_channels, 3)
    for _ in range(2):  # two mirrored decoders
        in_ch = arch.bottleneck_channels
        for out_ch in reversed(arch.encoder_channels):
            total += conv(in_ch, out_ch, 3)
            in_ch = out_ch
        total += conv(in_ch, 1, 1)
    if with_rotation_head:
        total += arch.bottleneck_channels * 4 + 4
    return total


def save_checkpoint(model: DualDecoderNet, path: Path, config_hash: str = "") -> None:
    payload = {
        "state_dict": model.state_dict(),
        "arch": {
            "input_channels": model.arch.input_channels,
            "encoder_channels": list(model.arch.encoder_channels),
            "bottleneck_channels": model.arch.bottleneck_channels,
        },
        "with_rotation_head": model.rotation_head is not None,
        "config_hash": config_hash,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path) -> tuple[DualDecoderNet, str]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    arch = ArchConfig(
        input_channels=payload["arch"]["input_channels"],
        encoder_channels=tuple(payload["arch"]["encoder_channels"]),
        bottleneck_channels=payload["arch"]["bottleneck_channels"],
    )
    model = DualDecoderNet(arch, payload["with_rotation_head"])
    own = model.state_dict()
    for key, tensor in payload["state_dict"].items():
        if key not in own:
            raise ValueError(f"checkpoint has unexpected parameter '{key}'")
        if own[key].shape != tensor.shape:
            raise ValueError(
                f"checkpoint shape mismatch for '{key}': {tuple(tensor.shape)} vs {tuple(own[key].shape)}"
            )
    model.load_state_dict(payload["state_dict"])
    return model, payload["config_hash"]
