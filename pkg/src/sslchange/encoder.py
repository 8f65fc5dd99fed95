"""ResUNet feature encoder with a ResNet-18 layout and shallow-feature clipping.

The backbone mirrors torchvision's module sequence
``[conv1, bn1, relu, maxpool, layer1, layer2, layer3, layer4]``; features are
tapped at positions 2, 4, 5, 6, 7 of that sequence (stem activation and the
four residual stages), upsampled to the input resolution and fused by a 1x1
convolution.
"""
import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import architecture_hash, freeze_module
from .exceptions import ArchitectureError, ConfigurationError, ShapeError

TAP_POSITIONS = (2, 4, 5, 6, 7)
STAGE_NAMES = ("stem", "layer1", "layer2", "layer3", "layer4")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


def _make_layer(in_ch, out_ch, blocks, stride):
    layers = [BasicBlock(in_ch, out_ch, stride)]
    layers += [BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


@dataclass
class FeaturePyramid:
    fused: torch.Tensor
    shallow: list


@dataclass(frozen=True)
class ClipSpec:
    keep_count: int = 3


class ResUNetEncoder(nn.Module):
    def __init__(self, width=0.25, out_channels=64, in_channels=3, blocks=(2, 2, 2, 2)):
        super().__init__()
        widths = [max(int(c * width), 4) for c in (64, 64, 128, 256, 512)]
        self.width = width
        self.out_channels = out_channels
        self.stage_channels = tuple(widths)

        self.conv1 = nn.Conv2d(in_channels, widths[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = _make_layer(widths[0], widths[1], blocks[0], 1)
        self.layer2 = _make_layer(widths[1], widths[2], blocks[1], 2)
        self.layer3 = _make_layer(widths[2], widths[3], blocks[2], 2)
        self.layer4 = _make_layer(widths[3], widths[4], blocks[3], 2)
        self.fuse = nn.Conv2d(sum(widths), out_channels, 1)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def sequence(self):
        return [self.conv1, self.bn1, self.relu, self.maxpool,
                self.layer1, self.layer2, self.layer3, self.layer4]

    def shallow_features(self, x, keep=len(TAP_POSITIONS)):
        taps = []
        for pos, module in enumerate(self.sequence()):
            x = module(x)
            if pos in TAP_POSITIONS:
                taps.append(x)
                if len(taps) == keep:
                    break
        return taps

    def pyramid(self, x):
        check_input(x)
        shallow = self.shallow_features(x)
        size = x.shape[-2:]
        up = [t if t.shape[-2:] == size else
              F.interpolate(t, size=size, mode="bilinear", align_corners=False)
              for t in shallow]
        return FeaturePyramid(self.fuse(torch.cat(up, dim=1)), shallow)

    def forward(self, x):
        return self.pyramid(x).fused


def check_input(x):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected a batch of 3-channel images, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} is not a multiple of 32")


def encode(encoder, x):
    """Run ``encoder`` on one image (3xHxW) or a batch; returns a FeaturePyramid."""
    single = x.dim() == 3
    pyr = encoder.pyramid(x[None] if single else x)
    if single:
        return FeaturePyramid(pyr.fused[0], [s[0] for s in pyr.shallow])
    return pyr


class ClippedEncoder(nn.Module):
    """Frozen copy of the first ``keep_count`` backbone stages.

    ``features`` returns the tapped maps; ``forward`` resizes them to a quarter
    of the input resolution (the layer1 grid) and concatenates on channels.
    Batch-norm statistics stay frozen: the module is pinned to eval mode.
    """

    scale = 4

    def __init__(self, encoder, keep_count=3):
        super().__init__()
        if not 1 <= keep_count <= len(TAP_POSITIONS):
            raise ConfigurationError(
                f"keep_count must be in [1, {len(TAP_POSITIONS)}], got {keep_count}")
        self.keep_count = keep_count
        self.stages = nn.ModuleList(copy.deepcopy(m) for m in
                                    encoder.sequence()[: TAP_POSITIONS[keep_count - 1] + 1])
        self.out_channels = sum(encoder.stage_channels[:keep_count])
        freeze_module(self)

    def train(self, mode=True):
        return super().train(False)

    def features(self, x):
        taps = []
        for pos, module in enumerate(self.stages):
            x = module(x)
            if pos in TAP_POSITIONS:
                taps.append(x)
        return taps

    def forward(self, x):
        check_input(x)
        size = (x.shape[-2] // self.scale, x.shape[-1] // self.scale)
        taps = [t if t.shape[-2:] == size else
                F.interpolate(t, size=size, mode="bilinear", align_corners=False)
                for t in self.features(x)]
        return torch.cat(taps, dim=1)


class FrozenFullEncoder(nn.Module):
    """Unclipped transfer: the whole encoder's fused full-resolution output."""

    scale = 1

    def __init__(self, encoder):
        super().__init__()
        self.encoder = freeze_module(copy.deepcopy(encoder))
        self.out_channels = encoder.out_channels

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        return self.encoder(x)


def clip_encoder(encoder, spec=ClipSpec()):
    return ClippedEncoder(encoder, spec.keep_count)


def save_encoder(encoder, path, **extra):
    torch.save({
        "state_dict": encoder.state_dict(),
        "arch": {"width": encoder.width, "out_channels": encoder.out_channels},
        "arch_hash": architecture_hash(encoder),
        **extra,
    }, path)


def load_encoder(path, encoder=None):
    """Load an encoder checkpoint; refuses a mismatched target architecture."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if encoder is None:
        encoder = ResUNetEncoder(**ckpt["arch"])
    if architecture_hash(encoder) != ckpt["arch_hash"]:
        raise ArchitectureError(f"checkpoint {path} does not match the target encoder architecture")
    encoder.load_state_dict(ckpt["state_dict"])
    return encoder
