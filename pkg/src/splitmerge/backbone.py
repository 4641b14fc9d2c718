"""ResNet-18 + FPN feature extractors for the split and merge stages."""

from __future__ import annotations

from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.resnet import BasicBlock

STANDARD_WIDTHS = (64, 128, 256, 512)
HALF_WIDTHS = (32, 64, 128, 256)


class ResNetFeatures(nn.Module):
    """ResNet-18 trunk returning the four stage outputs."""

    def __init__(self, widths: Sequence[int] = STANDARD_WIDTHS, max_pool: bool = True):
        super().__init__()
        self.widths = tuple(widths)
        self.conv1 = nn.Conv2d(3, widths[0], kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1) if max_pool else nn.Identity()
        inplanes = widths[0]
        layers = []
        for i, planes in enumerate(widths):
            stride = 1 if i == 0 else 2
            downsample = None
            if stride != 1 or inplanes != planes:
                downsample = nn.Sequential(
                    nn.Conv2d(inplanes, planes, 1, stride=stride, bias=False),
                    nn.BatchNorm2d(planes),
                )
            layers.append(nn.Sequential(
                BasicBlock(inplanes, planes, stride, downsample),
                BasicBlock(planes, planes),
            ))
            inplanes = planes
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [c1, c2, c3, c4]


class TopDownFPN(nn.Module):
    """Lateral 1x1 projections merged top-down by addition.

    Only the finest level is exported, so only it gets a 3x3 output conv;
    per-level output convs would never receive a gradient.
    """

    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        x = self.lateral[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            x = self.lateral[i](feats[i]) + F.interpolate(x, size=feats[i].shape[-2:], mode="nearest")
        return self.output(x)


class _Backbone(nn.Module):
    stride: int

    def __init__(self, image_size: int, widths: Sequence[int], max_pool: bool, fpn_channels: int):
        super().__init__()
        if image_size % 32:
            raise ValueError(f"image size {image_size} is not divisible by 32")
        self.image_size = image_size
        self.out_channels = fpn_channels
        self.body = ResNetFeatures(widths, max_pool=max_pool)
        self.fpn = TopDownFPN(widths, fpn_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} is not divisible by 32")
        return self.fpn(self.body(x))


class SplitBackbone(_Backbone):
    """Half-width ResNet-18 without the stem max-pool; stride-2 output."""

    stride = 2

    def __init__(self, image_size: int = 960, fpn_channels: int = 128):
        super().__init__(image_size, HALF_WIDTHS, max_pool=False, fpn_channels=fpn_channels)


class MergeBackbone(_Backbone):
    """Standard ResNet-18; stride-4 output."""

    stride = 4

    def __init__(self, image_size: int = 960, fpn_channels: int = 256, pretrained: bool = False):
        super().__init__(image_size, STANDARD_WIDTHS, max_pool=True, fpn_channels=fpn_channels)
        if pretrained:
            from torchvision.models import ResNet18_Weights, resnet18

            state = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1).state_dict()
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            self.body.load_state_dict(state)
