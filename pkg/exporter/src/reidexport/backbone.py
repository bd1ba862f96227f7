"""Truncated, stride-modified ResNet-50 feature extractor.

The classifier pieces (global pooling, fully connected layer) are dropped
and the last stage runs at stride 1, so a 384 x 128 input comes out as a
24 x 8 x 2048 activation volume (overall stride 16 instead of 32).
"""

from __future__ import annotations

import torch
from torch import nn
from torchvision.models import resnet50

# image statistics the model zoo weights were trained with
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

INPUT_HEIGHT = 384
INPUT_WIDTH = 128
OUTPUT_CHANNELS = 2048


def build_feature_extractor(weights: str = "pretrained") -> nn.Module:
    """ResNet-50 up to the last convolutional stage, last stage at stride 1.

    ``weights``: "pretrained" (model zoo), "random" (seeded, reproducible),
    or a path to a state dict for the standard torchvision ResNet-50 layout.
    """
    if weights == "pretrained":
        try:
            net = resnet50(weights="IMAGENET1K_V1")
        except Exception as e:
            raise RuntimeError(
                "could not load the pretrained model zoo weights; pass "
                "--weights random or --weights <state_dict.pth>") from e
    elif weights == "random":
        # seeded so repeated exports stay byte-identical
        with torch.random.fork_rng():
            torch.manual_seed(0)
            net = resnet50(weights=None)
    else:
        net = resnet50(weights=None)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)

    # last stage to stride 1: both the 3x3 conv and the downsample shortcut
    net.layer4[0].conv2.stride = (1, 1)
    net.layer4[0].downsample[0].stride = (1, 1)

    trunk = nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk
