"""Small encoder-decoder segmenter and the checkpoint container used by experts and distill."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn


def _conv_bn(cin, cout, stride=1, dilation=1, k=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=dilation * (k // 2), dilation=dilation,
                  bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ASPP(nn.Module):
    """Atrous pyramid with an image-level pooling branch."""

    def __init__(self, cin, cout, rates=(2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            [_conv_bn(cin, cout, k=1)] + [_conv_bn(cin, cout, dilation=r) for r in rates])
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = _conv_bn(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        feats.append(self.pool(x).expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(feats, dim=1))


class SegNet(nn.Module):
    """DeepLabv3+-shaped network at desk scale: stride-4 encoder, ASPP, one skip."""

    def __init__(self, num_classes: int, width: int = 24):
        super().__init__()
        self.stem = nn.Sequential(_conv_bn(3, width // 2), _conv_bn(width // 2, width, stride=2))
        self.encoder = nn.Sequential(_conv_bn(width, 2 * width, stride=2),
                                     _conv_bn(2 * width, 2 * width, dilation=2))
        self.aspp = ASPP(2 * width, 2 * width)
        self.skip = _conv_bn(width, width // 2, k=1)
        self.decoder = nn.Sequential(_conv_bn(2 * width + width // 2, width),
                                     nn.Conv2d(width, num_classes, 1))

    def forward(self, x):
        size = x.shape[2:]
        low = self.stem(x - 0.5)
        high = self.aspp(self.encoder(low))
        high = F.interpolate(high, size=low.shape[2:], mode="bilinear", align_corners=False)
        out = self.decoder(torch.cat([high, self.skip(low)], dim=1))
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainedSegmenter:
    model: nn.Module
    num_output_classes: int
    metadata: dict = field(default_factory=dict)
    width: int = 24

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        torch.save({"state_dict": self.model.state_dict(),
                    "num_output_classes": self.num_output_classes,
                    "width": self.width,
                    "metadata": self.metadata}, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainedSegmenter":
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        model = SegNet(ckpt["num_output_classes"], ckpt["width"])
        model.load_state_dict(ckpt["state_dict"])
        model.eval()
        return cls(model, ckpt["num_output_classes"], ckpt["metadata"], ckpt["width"])
