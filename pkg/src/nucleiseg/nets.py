"""Torch building blocks: the block-structured encoder used for
self-supervised pretraining and the residual U-Net used by both the
detection and the segmentation stage."""
from __future__ import annotations

import random
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

ENCODER_PRESETS = {
    "compact": {"widths": (16, 32, 64, 128), "convs_per_block": 2, "embedding_dim": 128},
    "deep": {"widths": (64, 128, 256, 512), "convs_per_block": 3, "embedding_dim": 512},
}

UNET_PRESETS = {
    "compact": {"widths": (16, 32, 64), "blocks_per_stage": 1},
    "resunet34": {"widths": (64, 128, 256, 512), "blocks_per_stage": 3},
}


@dataclass
class EncoderSpec:
    widths: tuple = (16, 32, 64, 128)
    convs_per_block: int = 2
    embedding_dim: int = 128
    in_channels: int = 3
    preset: str = "compact"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("an encoder needs at least two blocks")

    @classmethod
    def from_preset(cls, name="compact", in_channels=3):
        if name not in ENCODER_PRESETS:
            raise ValueError(f"unknown encoder preset {name!r}")
        return cls(in_channels=in_channels, preset=name, **ENCODER_PRESETS[name])

    def as_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def seed_everything(seed, deterministic=True):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _conv_bn_relu(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect", bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=False)]


class BlockEncoder(nn.Module):
    """Sequential convolutional blocks followed by a pooled linear embedding.

    Block 1 runs at input resolution; every later block halves it first.
    ``forward`` returns the embedding together with each block's
    post-activation feature maps so that gradients can be taken against any
    of them.
    """

    def __init__(self, spec=None):
        super().__init__()
        self.spec = spec or EncoderSpec()
        blocks = []
        cin = self.spec.in_channels
        for i, w in enumerate(self.spec.widths):
            layers = [nn.MaxPool2d(2)] if i > 0 else []
            for j in range(self.spec.convs_per_block):
                layers += _conv_bn_relu(cin if j == 0 else w, w)
            blocks.append(nn.Sequential(*layers))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.project = nn.Linear(cin, self.spec.embedding_dim)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        emb = self.project(x.mean(dim=(2, 3)))
        return emb, feats


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None if cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


def _stage(cin, cout, n):
    return nn.Sequential(*[ResidualBlock(cin if i == 0 else cout, cout) for i in range(n)])


class ResUNet(nn.Module):
    """Residual U-Net producing two-class logits at input resolution."""

    def __init__(self, in_channels=3, widths=(16, 32, 64), blocks_per_stage=1, n_classes=2):
        super().__init__()
        widths = tuple(widths)
        self.encoder = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.encoder.append(_stage(cin, w, blocks_per_stage))
            cin = w
        self.decoder = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.decoder.append(_stage(cin + w, w, blocks_per_stage))
            cin = w
        self.head = nn.Conv2d(cin, n_classes, 1)

    @classmethod
    def from_preset(cls, name="compact", in_channels=3):
        if name not in UNET_PRESETS:
            raise ValueError(f"unknown backbone preset {name!r}")
        return cls(in_channels=in_channels, **UNET_PRESETS[name])

    def forward(self, x):
        h, w = x.shape[-2:]
        depth = len(self.encoder) - 1
        pad_h = (-h) % (2 ** depth)
        pad_w = (-w) % (2 ** depth)
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        skips = []
        for i, stage in enumerate(self.encoder):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            skips.append(x)
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = stage(torch.cat([x, skip], dim=1))
        return self.head(x)[..., :h, :w]


def to_tensor(images):
    """Stack ``H x W x C`` float images into an ``N x C x H x W`` float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
