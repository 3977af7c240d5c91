"""Segmentation network: shared encoder, pinhole/panoramic/target heads, pixel gate."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


def _conv(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class FeatureExtractor(nn.Module):
    """Four conv stages, output stride 4."""

    def __init__(self, widths=(32, 64, 128, 128), strides=(1, 2, 2, 1)):
        super().__init__()
        layers, cin = [], 3
        for w, s in zip(widths, strides):
            layers.append(_conv(cin, w, s))
            cin = w
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


class BranchHead(nn.Module):
    """conv3x3 -> branch feature; conv1x1 -> class logits (upsampled to input size)."""

    def __init__(self, cin, width, num_classes):
        super().__init__()
        self.feature = _conv(cin, width)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, feat):
        f = self.feature(feat)
        return f, self.classifier(f)


class ConvGate(nn.Module):
    def __init__(self, width, hidden=128):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(2 * width, hidden, 3, padding=1),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 2, 3, padding=1),
        )
        # equal weights for both branches at initialization
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, f_pin, f_pan):
        """Returns per-pixel weights (N, 2, h, w); channel 0 is the pinhole branch."""
        return torch.softmax(self.body(torch.cat([f_pin, f_pan], dim=1)), dim=1)


def gated_fusion(f_pin, f_pan, gate):
    return gate[:, 0:1] * f_pin + gate[:, 1:2] * f_pan


@dataclass
class SegOutput:
    logits_pin: torch.Tensor
    logits_pan: torch.Tensor
    logits_t: torch.Tensor
    f_pin: torch.Tensor
    f_pan: torch.Tensor
    f_t: torch.Tensor
    gate: torch.Tensor  # (N, 2, H, W) at input resolution

    def fused_logits(self) -> torch.Tensor:
        return (self.logits_pin + self.logits_pan + self.logits_t) / 3.0


class SegModel(nn.Module):
    def __init__(self, num_classes=5, widths=(32, 64, 128, 128), branch_width=128, gate_hidden=128):
        super().__init__()
        self.num_classes = num_classes
        self.f = FeatureExtractor(widths)
        self.h_pin = BranchHead(self.f.out_channels, branch_width, num_classes)
        self.h_pan = BranchHead(self.f.out_channels, branch_width, num_classes)
        self.g = ConvGate(branch_width, gate_hidden)
        self.h_t = nn.Conv2d(branch_width, num_classes, 1)

    @staticmethod
    def check_input(img):
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(f"expected images of shape (N, 3, H, W), got {tuple(img.shape)}")
        if img.shape[2] % 4 or img.shape[3] % 4:
            raise ValueError(f"image size {tuple(img.shape[2:])} must be divisible by 4")

    @staticmethod
    def upsample(x, size):
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)

    def pin_logits(self, img):
        self.check_input(img)
        _, logits = self.h_pin(self.f(img))
        return self.upsample(logits, img.shape[2:])

    def pan_logits(self, img):
        self.check_input(img)
        _, logits = self.h_pan(self.f(img))
        return self.upsample(logits, img.shape[2:])

    def heads(self, feat, size) -> SegOutput:
        """All three heads on precomputed encoder features."""
        f_pin, lp = self.h_pin(feat)
        f_pan, lq = self.h_pan(feat)
        gate = self.g(f_pin, f_pan)
        f_t = gated_fusion(f_pin, f_pan, gate)
        lt = self.h_t(f_t)
        up = lambda x: self.upsample(x, size)
        return SegOutput(up(lp), up(lq), up(lt), f_pin, f_pan, f_t, up(gate))

    def forward(self, img) -> SegOutput:
        self.check_input(img)
        return self.heads(self.f(img), img.shape[2:])

    forward_full = forward


def fused_logits(model: SegModel, img) -> torch.Tensor:
    return model(img).fused_logits()


@torch.no_grad()
def fused_inference(model: SegModel, img) -> torch.Tensor:
    """Class map (N, H, W) from the mean of the three heads' logits."""
    return fused_logits(model, img).argmax(dim=1)
