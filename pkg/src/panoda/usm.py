"""Unpaired semantic morphing: deformation network, dual-view discriminator, losses.

Discriminators return logits; probabilities are ``sigmoid(logit)``. Losses are
written on logits so that saturated discriminators stay finite.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import Role
from .deformation import integrate_velocity, smoothness_penalty, warp_image

REAL_TARGET = 0.9  # one-sided label smoothing on panoramic (real) samples
LUMA = (0.299, 0.587, 0.114)


def grayscale(img: torch.Tensor) -> torch.Tensor:
    """(N, 3, H, W) -> (N, 1, H, W) luminance; single-channel input passes through."""
    if img.shape[1] == 1:
        return img
    w = img.new_tensor(LUMA).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.2, inplace=True))


class DeformationNetwork(nn.Module):
    """3-level encoder-decoder mapping (moving, fixed) grayscale images to a velocity field.

    The velocity head is zero-initialized, so a fresh network produces the identity
    deformation; ``max_velocity`` bounds |v| per component through a tanh.
    """

    def __init__(self, base=16, max_velocity=4.0, steps=7):
        super().__init__()
        self.max_velocity = max_velocity
        self.steps = steps
        self.enc1 = _block(2, base)
        self.enc2 = _block(base, 2 * base, 2)
        self.enc3 = _block(2 * base, 4 * base, 2)
        self.dec2 = _block(4 * base + 2 * base, 2 * base)
        self.dec1 = _block(2 * base + base, base)
        self.velocity = nn.Conv2d(base, 2, 3, padding=1)
        nn.init.zeros_(self.velocity.weight)
        nn.init.zeros_(self.velocity.bias)

    def forward(self, moving_gray, fixed_gray):
        x1 = self.enc1(torch.cat([moving_gray, fixed_gray], dim=1))
        x2 = self.enc2(x1)
        x3 = self.enc3(x2)
        y = F.interpolate(x3, size=x2.shape[2:], mode="bilinear", align_corners=False)
        y = self.dec2(torch.cat([y, x2], dim=1))
        y = F.interpolate(y, size=x1.shape[2:], mode="bilinear", align_corners=False)
        y = self.dec1(torch.cat([y, x1], dim=1))
        return self.max_velocity * torch.tanh(self.velocity(y))

    def fields(self, moving_gray, fixed_gray):
        """(phi_i2a, phi_a2i) = (exp(v), exp(-v)), mutually inverse by construction."""
        v = self(moving_gray, fixed_gray)
        return integrate_velocity(v, self.steps), integrate_velocity(-v, self.steps)


class DvD(nn.Module):
    """U-shaped discriminator with an image-level and a pixel-level output.

    The encoder's lowest-resolution features give the image score; the decoder,
    fed by skip connections, gives a full-resolution realness map.
    """

    def __init__(self, base=16, in_channels=1):
        super().__init__()
        self.e1 = _block(in_channels, base, 2)
        self.e2 = _block(base, 2 * base, 2)
        self.e3 = _block(2 * base, 4 * base, 2)
        self.img_head = nn.Linear(4 * base, 1)
        self.d2 = _block(4 * base + 2 * base, 2 * base)
        self.d1 = _block(2 * base + base, base)
        self.d0 = _block(base + in_channels, base)
        self.pix_head = nn.Conv2d(base, 1, 1)

    def encode(self, x):
        s1 = self.e1(x)
        s2 = self.e2(s1)
        s3 = self.e3(s2)
        return s3, (x, s1, s2)

    def decode(self, s3, skips):
        x, s1, s2 = skips
        up = lambda t, ref: F.interpolate(t, size=ref.shape[2:], mode="bilinear", align_corners=False)
        y = self.d2(torch.cat([up(s3, s2), s2], dim=1))
        y = self.d1(torch.cat([up(y, s1), s1], dim=1))
        y = self.d0(torch.cat([up(y, x), x], dim=1))
        return self.pix_head(y)

    def forward(self, x):
        """Returns (image logit (N,), pixel logit map (N, 1, H, W))."""
        s3, skips = self.encode(x)
        img_logit = self.img_head(s3.mean(dim=(2, 3))).squeeze(1)
        return img_logit, self.decode(s3, skips)


# ---------------------------------------------------------------------------
# losses on logits

def smoothed_bce(logit: torch.Tensor, target: float) -> torch.Tensor:
    """-(t log sigmoid(l) + (1 - t) log(1 - sigmoid(l))), mean over all entries."""
    return -(target * F.logsigmoid(logit) + (1.0 - target) * F.logsigmoid(-logit)).mean()


def dis_loss(real_logit, fake_logit, real_target=REAL_TARGET):
    return smoothed_bce(real_logit, real_target) + smoothed_bce(fake_logit, 0.0)


def adv_loss(fake_logit):
    """-mean log D(fake)."""
    return -F.logsigmoid(fake_logit).mean()


@contextlib.contextmanager
def frozen(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def discriminator_losses(D: DvD, x_fake_gray, x_real_gray, real_target=REAL_TARGET):
    """Image- and pixel-level discriminator losses; the fake input is detached."""
    fake_img, fake_pix = D(x_fake_gray.detach())
    real_img, real_pix = D(x_real_gray.detach())
    return {
        "l_dis_img": dis_loss(real_img, fake_img, real_target),
        "l_dis_pix": dis_loss(real_pix, fake_pix, real_target),
    }


def adversarial_losses(D: DvD, x_fake_gray):
    """Generator losses; D's parameters receive no gradient."""
    with frozen(D):
        img, pix = D(x_fake_gray)
    return {"l_adv_img": adv_loss(img), "l_adv_pix": adv_loss(pix)}


@torch.no_grad()
def _probs_nograd(teacher, x):
    return torch.softmax(teacher(x).fused_logits(), dim=1)


def teacher_probs(teacher, x):
    return torch.softmax(teacher(x).fused_logits(), dim=1)


def cycle_losses(x_i, x_a, phi_i2a, phi_a2i, teacher=None):
    """Reconstruction and semantic cycle losses (mean absolute error).

    ``teacher`` must be in eval mode with frozen parameters; gradients reach the
    fields through the warps only. Without a teacher ``l_sem`` is zero.
    """
    x_i2a = warp_image(x_i, phi_i2a)
    x_a2i = warp_image(x_a, phi_a2i)
    l_recon = (x_i - warp_image(x_i2a, phi_a2i)).abs().mean() + (x_a - warp_image(x_a2i, phi_i2a)).abs().mean()
    if teacher is None:
        return {"l_recon": l_recon, "l_sem": l_recon.new_zeros(())}
    with frozen(teacher):
        l_sem = (teacher_probs(teacher, x_i2a) - warp_image(_probs_nograd(teacher, x_i), phi_i2a)).abs().mean()
        l_sem = l_sem + (teacher_probs(teacher, x_a2i) - warp_image(_probs_nograd(teacher, x_a), phi_a2i)).abs().mean()
    return {"l_recon": l_recon, "l_sem": l_sem}


@dataclass
class MorphLossReport:
    l_dis_img: torch.Tensor
    l_dis_pix: torch.Tensor
    l_adv_img: torch.Tensor
    l_adv_pix: torch.Tensor
    l_recon: torch.Tensor
    l_sem: torch.Tensor
    l_smooth: torch.Tensor
    l_morph_total: torch.Tensor
    ramp: float

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def morph_loss_total(parts: dict, alpha: float, cur_it: int, max_its: int) -> MorphLossReport:
    """ramp * (recon + sem + smooth) + alpha * (adv_img + adv_pix), ramp = cur_it / max_its."""
    if max_its <= 0:
        raise ValueError("max_its must be positive")
    if not 0 <= cur_it <= max_its:
        raise ValueError(f"cur_it={cur_it} outside [0, {max_its}]")
    ramp = cur_it / max_its
    z = torch.zeros(())
    get = lambda k: parts.get(k, z)
    total = ramp * (get("l_recon") + get("l_sem") + get("l_smooth")) + alpha * (get("l_adv_img") + get("l_adv_pix"))
    return MorphLossReport(
        l_dis_img=get("l_dis_img"), l_dis_pix=get("l_dis_pix"),
        l_adv_img=get("l_adv_img"), l_adv_pix=get("l_adv_pix"),
        l_recon=get("l_recon"), l_sem=get("l_sem"), l_smooth=get("l_smooth"),
        l_morph_total=total, ramp=ramp,
    )


@dataclass
class MorphResult:
    phi_i2a: torch.Tensor
    phi_a2i: torch.Tensor
    x_i2a: torch.Tensor
    y_i2a: torch.Tensor | None


def morph_forward(F_net: DeformationNetwork, x_i, x_a, y_i=None, fixed_role: Role | None = None) -> MorphResult:
    """Deform pinhole images ``x_i`` toward panoramic ``x_a``.

    ``fixed_role`` names the domain ``x_a`` was drawn from when known; pinhole
    fixed images are rejected since only pinhole images are ever deformed.
    """
    if fixed_role is Role.PIN_SRC:
        raise ValueError("the fixed image must come from a panoramic domain; only pinhole images are deformed")
    if x_i.shape[2:] != x_a.shape[2:]:
        raise ValueError(f"moving {tuple(x_i.shape[2:])} and fixed {tuple(x_a.shape[2:])} sizes differ")
    phi_i2a, phi_a2i = F_net.fields(grayscale(x_i), grayscale(x_a))
    x_i2a = warp_image(x_i, phi_i2a)
    y_i2a = None
    if y_i is not None:
        y_i2a = warp_image(y_i.unsqueeze(1), phi_i2a.detach(), mode="nearest").squeeze(1)
    return MorphResult(phi_i2a, phi_a2i, x_i2a, y_i2a)


def smooth_loss(phi_i2a, phi_a2i):
    return smoothness_penalty(phi_i2a) + smoothness_penalty(phi_a2i)
