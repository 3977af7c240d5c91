"""Distortion gating alignment: teacher, pseudo-labels, class-mix, augmentation, losses."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .datamodel import IGNORE
from .segnet import SegModel, SegOutput


# ---------------------------------------------------------------------------
# EMA teacher

@dataclass
class TeacherState:
    model: SegModel
    gamma: float = 0.999

    @classmethod
    def from_student(cls, student: SegModel, gamma: float = 0.999) -> TeacherState:
        model = copy.deepcopy(student)
        for p in model.parameters():
            p.requires_grad_(False)
        model.eval()
        return cls(model, gamma)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: SegModel, gamma: float | None = None) -> TeacherState:
    """theta_tea <- gamma * theta_tea + (1 - gamma) * theta for every parameter.

    Floating-point buffers (normalization statistics) follow the same rule, integer
    buffers are copied.
    """
    g = teacher.gamma if gamma is None else gamma
    t_state = teacher.model.state_dict(keep_vars=True)
    s_state = student.state_dict(keep_vars=True)
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if torch.is_floating_point(t):
            t.data.copy_(g * t.data + (1.0 - g) * s.data)
        else:
            t.data.copy_(s.data)
    return teacher


# ---------------------------------------------------------------------------
# pseudo-labels

@dataclass
class PseudoLabel:
    labels: torch.Tensor  # (N, H, W) long, IGNORE below threshold
    confidence: torch.Tensor  # (N, H, W)

    @property
    def coverage(self) -> float:
        return float((self.labels != IGNORE).double().mean())


def threshold_probs(probs: torch.Tensor, eta: float) -> PseudoLabel:
    conf, lab = probs.max(dim=1)
    lab = torch.where(conf >= eta, lab, torch.full_like(lab, IGNORE))
    return PseudoLabel(lab, conf)


@torch.no_grad()
def pseudo_labels(teacher: TeacherState | SegModel, t_img: torch.Tensor, eta: float = 0.95) -> PseudoLabel:
    model = teacher.model if isinstance(teacher, TeacherState) else teacher
    was_training = model.training
    model.eval()
    probs = torch.softmax(model(t_img).fused_logits(), dim=1)
    model.train(was_training)
    return threshold_probs(probs, eta)


# ---------------------------------------------------------------------------
# class-mix

@dataclass
class MixResult:
    image: torch.Tensor  # (3, H, W)
    labels: torch.Tensor  # (H, W)
    mask: torch.Tensor  # (H, W) bool, True where the pixel comes from the source


def class_mix(src_img, src_labels, tgt_img, tgt_labels, generator=None, classes=None) -> MixResult:
    """Paste the pixels of half (rounded up) of the source's classes onto the target.

    Works on single images: ``src_img`` (3, H, W), ``src_labels`` (H, W). ``classes``
    overrides the random choice.
    """
    present = torch.unique(src_labels)
    present = present[present != IGNORE]
    if present.numel() == 0:
        raise ValueError("source image has no labeled pixels to mix")
    if classes is None:
        k = present.numel()
        pick = torch.randperm(k, generator=generator)[: math.ceil(k / 2)]
        classes = present[pick]
    else:
        classes = torch.as_tensor(classes, dtype=src_labels.dtype)
    mask = torch.isin(src_labels, classes)
    image = torch.where(mask.unsqueeze(0), src_img, tgt_img)
    labels = torch.where(mask, src_labels.to(tgt_labels.dtype), tgt_labels)
    return MixResult(image, labels, mask)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentParams:
    p_flip: float = 0.5
    p_jitter: float = 0.8
    jitter_strength: float = 0.2
    p_blur: float = 0.5
    blur_sigma: float = 1.0
    p_erase: float = 0.0
    erase_frac: float = 0.15

    @classmethod
    def from_config(cls, cfg, erase: bool = False) -> AugmentParams:
        return cls(cfg.p_flip, cfg.p_jitter, cfg.jitter_strength, cfg.p_blur, cfg.blur_sigma,
                   cfg.p_erase if erase else 0.0, cfg.erase_frac)


def color_jitter(img, brightness, contrast, saturation):
    gray = (img * img.new_tensor((0.299, 0.587, 0.114)).view(3, 1, 1)).sum(0, keepdim=True)
    img = img * brightness
    img = (img - gray.mean()) * contrast + gray.mean()
    gray = (img * img.new_tensor((0.299, 0.587, 0.114)).view(3, 1, 1)).sum(0, keepdim=True)
    img = (img - gray) * saturation + gray
    return img.clamp(0, 1)


def gaussian_blur(img, sigma, radius=2):
    xs = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-(xs ** 2) / (2 * sigma ** 2))
    k = k / k.sum()
    x = img.unsqueeze(0)
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(3, 1, 1, -1), groups=3)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(3, 1, -1, 1), groups=3)
    return x.squeeze(0)


def augment(img, labels=None, params: AugmentParams | None = None, generator=None):
    """Photometric + geometric augmentation of one image (3, H, W) and its labels.

    Labels only follow the geometric transform (flip). Every random draw is taken
    whether or not the corresponding transform fires, so the stream position does
    not depend on the outcomes.
    """
    p = params or AugmentParams()
    u = torch.rand(4, generator=generator)
    mags = torch.rand(7, generator=generator)
    fill = torch.rand(3, generator=generator).to(img.dtype).view(3, 1, 1)
    if u[0] < p.p_flip:
        img = img.flip(-1)
        if labels is not None:
            labels = labels.flip(-1)
    if u[1] < p.p_jitter:
        s = p.jitter_strength
        img = color_jitter(img, 1 - s + 2 * s * float(mags[0]), 1 - s + 2 * s * float(mags[1]),
                           1 - s + 2 * s * float(mags[2]))
    if u[2] < p.p_blur:
        img = gaussian_blur(img, 0.1 + (p.blur_sigma - 0.1) * float(mags[3]))
    if u[3] < p.p_erase:
        h, w = img.shape[1:]
        area = p.erase_frac * h * w
        aspect = math.exp(math.log(0.5) + math.log(4.0) * float(mags[4]))
        eh = max(1, min(h, int(round(math.sqrt(area / aspect)))))
        ew = max(1, min(w, int(round(math.sqrt(area * aspect)))))
        y0 = int(float(mags[5]) * (h - eh + 1))
        x0 = int(float(mags[6]) * (w - ew + 1))
        img = img.clone()
        img[:, y0:y0 + eh, x0:x0 + ew] = fill
    return img, labels


# LAB conversion (sRGB, D65 white)
_RGB2XYZ = torch.tensor([[0.412453, 0.357580, 0.180423],
                         [0.212671, 0.715160, 0.072169],
                         [0.019334, 0.119193, 0.950227]], dtype=torch.float64)
_WHITE = torch.tensor([0.950456, 1.0, 1.088754], dtype=torch.float64)
_DELTA = 6 / 29


def _f(t):
    return torch.where(t > _DELTA ** 3, t.clamp(min=1e-12) ** (1 / 3), t / (3 * _DELTA ** 2) + 4 / 29)


def _finv(t):
    return torch.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4 / 29))


def rgb_to_lab(img):
    """(3, H, W) RGB in [0, 1] -> (3, H, W) L*a*b*."""
    lin = torch.where(img > 0.04045, ((img + 0.055) / 1.055) ** 2.4, img / 12.92)
    m = _RGB2XYZ.to(img.dtype)
    xyz = torch.einsum("ij,jhw->ihw", m, lin) / _WHITE.to(img.dtype).view(3, 1, 1)
    fx, fy, fz = _f(xyz)
    return torch.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)])


def lab_to_rgb(lab):
    L, a, b = lab
    fy = (L + 16) / 116
    fx = fy + a / 500
    fz = fy - b / 200
    xyz = torch.stack([_finv(fx), _finv(fy), _finv(fz)]) * _WHITE.to(lab.dtype).view(3, 1, 1)
    lin = torch.einsum("ij,jhw->ihw", torch.linalg.inv(_RGB2XYZ).to(lab.dtype), xyz)
    lin = lin.clamp(min=0)
    return torch.where(lin > 0.0031308, 1.055 * lin.clamp(min=1e-12) ** (1 / 2.4) - 0.055, 12.92 * lin)


def lab_transfer(src, ref, eps=1e-6):
    """Match per-channel mean and std of ``src`` to ``ref`` in L*a*b* space."""
    ls, lr = rgb_to_lab(src), rgb_to_lab(ref)
    ms, ss = ls.mean(dim=(1, 2), keepdim=True), ls.std(dim=(1, 2), keepdim=True)
    mr, sr = lr.mean(dim=(1, 2), keepdim=True), lr.std(dim=(1, 2), keepdim=True)
    out = (ls - ms) / (ss + eps) * (sr + eps) + mr
    return lab_to_rgb(out).clamp(0, 1)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, labels):
    """Mean CE over non-IGNORE pixels."""
    if not (labels != IGNORE).any():
        raise ValueError("every pixel is IGNORE; cross-entropy is undefined")
    return F.cross_entropy(logits, labels.long(), ignore_index=IGNORE)


def supervised_losses(S: SegModel, x_i2a, y_i2a, v, delta):
    """Pinhole-branch CE on deformed pinhole images, panoramic-branch CE on panoramic sources."""
    return {"l_pin": cross_entropy(S.pin_logits(x_i2a), y_i2a),
            "l_pan": cross_entropy(S.pan_logits(v), delta)}


def pixel_kl(logits_p, logits_q):
    """KL(softmax(p) || softmax(q)) per pixel, (N, H, W)."""
    lp = F.log_softmax(logits_p, dim=1)
    lq = F.log_softmax(logits_q, dim=1)
    return (lp.exp() * (lp - lq)).sum(dim=1)


def uncertainty_loss(out: SegOutput, y):
    """Returns (d_kl, l_t) for one batch of images.

    Each counted pixel contributes exp(-kl) * CE + kl, where kl compares the
    pinhole and panoramic branch distributions at that pixel. Pixels labeled
    IGNORE are not counted; if there are none left the CE part vanishes and the
    KL term is averaged over all pixels.
    """
    kl = pixel_kl(out.logits_pin, out.logits_pan)
    valid = y != IGNORE
    if valid.any():
        ce = F.cross_entropy(out.logits_t, torch.where(valid, y, 0).long(), reduction="none")
        per_pixel = torch.exp(-kl) * ce + kl
        d_kl = kl[valid].mean()
        l_t = per_pixel[valid].mean()
    else:
        d_kl = kl.mean()
        l_t = d_kl
    return d_kl, l_t


def uncertainty_alignment(S: SegModel, x, y):
    return uncertainty_loss(S(x), y)


def seg_loss_total(l_pin, l_pan, l_t, beta):
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return l_pin + l_pan + beta * l_t
