"""Reference CIFAR-scale architectures, built to be walkable.

Every network is a flat nn.Sequential of leaf modules and BasicBlocks so
the module tree order equals execution order, which is what the manifest
writer needs. Convs carry no bias (batchnorm follows each one); the
classifier head keeps biases.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import torch
from torch import nn

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

VGG_PLANS = {
    "vgg13": (64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"),
    "vgg16": (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M"),
}


class BasicBlock(nn.Module):
    """Two 3x3 convs with a skip; 1x1 projection when shape changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.bn2(self.conv2(self.relu(self.bn1(self.conv1(x)))))
        return self.relu(out + identity)


def _vgg(plan, class_count: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = 3
    for item in plan:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
            continue
        layers += [nn.Conv2d(in_ch, item, 3, padding=1, bias=False),
                   nn.BatchNorm2d(item), nn.ReLU(inplace=True)]
        in_ch = item
    layers += [
        nn.Flatten(),
        nn.Linear(512, 512), nn.ReLU(inplace=True), nn.Dropout(0.5),
        nn.Linear(512, 512), nn.ReLU(inplace=True), nn.Dropout(0.5),
        nn.Linear(512, class_count),
    ]
    return nn.Sequential(*layers)


def _resnet(blocks_per_stage, class_count: int) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(3, 64, 3, padding=1, bias=False),
        nn.BatchNorm2d(64),
        nn.ReLU(inplace=True),
    ]
    in_ch = 64
    for stage, (out_ch, count) in enumerate(zip((64, 128, 256, 512), blocks_per_stage)):
        for b in range(count):
            stride = 2 if stage > 0 and b == 0 else 1
            layers.append(BasicBlock(in_ch, out_ch, stride))
            in_ch = out_ch
    layers += [nn.AdaptiveAvgPool2d((1, 1)), nn.Flatten(), nn.Linear(512, class_count)]
    return nn.Sequential(*layers)


def _tiny2(class_count: int) -> nn.Sequential:
    # two weighted layers; the smallest net the round-trip harness accepts
    return nn.Sequential(
        nn.Conv2d(3, 4, 3, padding=1, bias=False),
        nn.ReLU(inplace=True),
        nn.Flatten(),
        nn.Linear(4 * 8 * 8, class_count),
    )


class ArchSpec(NamedTuple):
    builder: Callable[[int], nn.Sequential]
    input_size: tuple[int, int]
    normalization: tuple[tuple[float, ...], tuple[float, ...]]


ARCHITECTURES: dict[str, ArchSpec] = {
    "tiny2": ArchSpec(_tiny2, (8, 8), (CIFAR_MEAN, CIFAR_STD)),
    "vgg13": ArchSpec(lambda k: _vgg(VGG_PLANS["vgg13"], k), (32, 32), (CIFAR_MEAN, CIFAR_STD)),
    "vgg16": ArchSpec(lambda k: _vgg(VGG_PLANS["vgg16"], k), (32, 32), (CIFAR_MEAN, CIFAR_STD)),
    "resnet18": ArchSpec(lambda k: _resnet((2, 2, 2, 2), k), (32, 32), (CIFAR_MEAN, CIFAR_STD)),
    "resnet34": ArchSpec(lambda k: _resnet((3, 4, 6, 3), k), (32, 32), (CIFAR_MEAN, CIFAR_STD)),
}


def build(arch_name: str, class_count: int = 10) -> nn.Sequential:
    if arch_name not in ARCHITECTURES:
        known = ", ".join(sorted(ARCHITECTURES))
        raise ValueError(f"unknown architecture {arch_name!r}; known: {known}")
    return ARCHITECTURES[arch_name].builder(class_count)
